"""Registration sweep over models, modality pairs, metrics and grid spacings.

Every inhale image is registered onto the exhale CT of the same model. The
liver masks of both phases, closed with a small ball, give pre and post DSC.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from .errors import ConfigError
from .modality import LIVER, MODALITIES
from .registration import RegistrationConfig, close_mask, evaluate_registration, register
from .volume import LabelMap

log = logging.getLogger(__name__)

SWEEP_SCHEMA = "# schema: sweep v1"
SUMMARY_SCHEMA = "# schema: sweep-summary v1"
COLUMNS = ("model", "pair", "metric", "grid_spacing", "pre_dsc", "post_dsc", "iterations",
           "final_metric", "wall_time", "status")
MONOMODAL = ("CT",)
SPACINGS = (50.0, 70.0, 90.0, 110.0, 130.0, 150.0)


def default_metrics() -> dict:
    return {m: ["MS", "NC", "MMI"] if m in MONOMODAL else ["NC", "MMI"] for m in MODALITIES}


@dataclass(frozen=True)
class SweepConfig:
    pairs: tuple = MODALITIES  # moving modality, always registered to exhale CT
    metrics: dict = field(default_factory=default_metrics)
    grid_spacings: tuple = SPACINGS
    histogram_bins: int = 50
    learning_rate: float = 1.0
    max_iterations: int = 300
    working_spacing: float | None = 6.0  # mm; registration runs on resampled copies
    closing_radius: float = 5.0
    output: str = "sweep"

    def __post_init__(self):
        if not self.pairs:
            raise ConfigError("no modality pairs")
        for p in self.pairs:
            if p not in MODALITIES:
                raise ConfigError(f"unknown modality {p!r}")
            ms = self.metrics.get(p)
            if not ms:
                raise ConfigError(f"no metrics for pair {p}")
            if "MS" in ms and p not in MONOMODAL:
                raise ConfigError(f"MS cannot drive the multimodal pair {p}->CT")
            for m in ms:
                if m not in ("MS", "NC", "MMI"):
                    raise ConfigError(f"unknown metric {m!r}")
        if not self.grid_spacings or min(self.grid_spacings) <= 0:
            raise ConfigError("grid spacings must be positive")
        if self.closing_radius < 0:
            raise ConfigError("closing radius must be non-negative")
        try:
            self.registration("MMI", self.grid_spacings[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def registration(self, metric: str, spacing: float) -> RegistrationConfig:
        return RegistrationConfig(metric=metric, histogram_bins=self.histogram_bins,
                                  learning_rate=self.learning_rate, max_iterations=self.max_iterations,
                                  grid_spacing=float(spacing), working_spacing=self.working_spacing)

    def settings(self) -> list[tuple[str, str, float]]:
        return [(p, m, float(s)) for p in self.pairs for m in self.metrics[p] for s in self.grid_spacings]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pairs"] = list(self.pairs)
        d["grid_spacings"] = list(self.grid_spacings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sweep config keys {sorted(unknown)}")
        if "pairs" in d:
            d["pairs"] = tuple(d["pairs"])
        if "grid_spacings" in d:
            d["grid_spacings"] = tuple(float(s) for s in d["grid_spacings"])
        if "metrics" in d:
            metrics = default_metrics()
            metrics.update({k: list(v) for k, v in d["metrics"].items()})
            d["metrics"] = metrics
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid sweep config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SweepConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sweep config {path}: {exc}") from exc


def _liver(labels: LabelMap, radius: float) -> LabelMap:
    return close_mask(LabelMap(labels.geometry, (labels.data == LIVER).astype(np.uint16)), radius)


def _run_model(args) -> list[dict]:
    directory, model, cfg = args
    rows = []
    try:
        fixed = ds.artifact(directory, "ct_exhale")
        fixed_mask = _liver(ds.artifact(directory, "labels_exhale"), cfg.closing_radius)
        moving_mask = _liver(ds.artifact(directory, "labels_inhale"), cfg.closing_radius)
    except Exception as exc:
        log.error("model %d: cannot load fixed data: %s", model, exc)
        return [_failed(model, p, m, s, exc) for p, m, s in cfg.settings()]
    movers = {}
    for pair, metric, spacing in cfg.settings():
        try:
            if pair not in movers:
                movers[pair] = ds.artifact(directory, f"{pair.lower()}_inhale")
            res = register(fixed, movers[pair], cfg.registration(metric, spacing))
            pre, post = evaluate_registration(res, moving_mask, fixed_mask)
            status = "diverged" if res.diverged else "ok"
            rows.append({"model": model, "pair": f"{pair}->CT", "metric": metric, "grid_spacing": spacing,
                         "pre_dsc": pre, "post_dsc": post, "iterations": res.iterations,
                         "final_metric": res.final_metric, "wall_time": res.wall_time, "status": status})
        except Exception as exc:  # one bad setting must not abort the sweep
            log.error("model %d %s %s %g failed: %s", model, pair, metric, spacing, exc)
            rows.append(_failed(model, pair, metric, spacing, exc))
    return rows


def _failed(model, pair, metric, spacing, exc) -> dict:
    return {"model": model, "pair": f"{pair}->CT", "metric": metric, "grid_spacing": spacing,
            "pre_dsc": float("nan"), "post_dsc": float("nan"), "iterations": 0,
            "final_metric": float("nan"), "wall_time": 0.0,
            "status": "failed: " + str(exc).replace("\n", " ")}


def sort_key(row: dict):
    return row["model"], row["pair"], row["metric"], row["grid_spacing"]


def run_sweep(root, cfg: SweepConfig, out=None, workers: int = 1) -> list[dict]:
    """Register every model directory under ``root``; writes sweep.csv and the summary."""
    dirs = ds.list_models(root)
    if not dirs:
        raise ConfigError(f"no generated models under {root}")
    jobs = [(d, int(d.name.split("_")[1]), cfg) for d in dirs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_model, jobs))
    else:
        chunks = [_run_model(j) for j in jobs]
    rows = sorted((r for c in chunks for r in c), key=sort_key)
    out = Path(out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "sweep.csv", rows)
    write_summary(out / "sweep_summary.csv", summarize(rows))
    with open(out / "sweep_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)
    return rows


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else "nan"
    return str(v)


def write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(SWEEP_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in COLUMNS])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != SWEEP_SCHEMA:
            raise ValueError(f"unexpected sweep schema line {first!r}")
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["model"] = int(r["model"])
        r["iterations"] = int(r["iterations"])
        for c in ("grid_spacing", "pre_dsc", "post_dsc", "final_metric", "wall_time"):
            r[c] = float(r[c])
    return rows


def summarize(rows) -> list[dict]:
    """Per-setting mean and 10th/90th percentiles of pre and post DSC over the ok rows."""
    groups = {}
    for r in rows:
        groups.setdefault((r["pair"], r["metric"], r["grid_spacing"]), []).append(r)
    out = []
    for (pair, metric, spacing), rs in sorted(groups.items()):
        ok = [r for r in rs if r["status"] == "ok"]
        pre = np.array([r["pre_dsc"] for r in ok])
        post = np.array([r["post_dsc"] for r in ok])
        stat = (lambda a, f: float(f(a)) if len(a) else float("nan"))
        out.append({
            "pair": pair, "metric": metric, "grid_spacing": spacing, "n": len(ok),
            "n_failed": len(rs) - len(ok),
            "pre_mean": stat(pre, np.mean), "post_mean": stat(post, np.mean),
            "post_p10": stat(post, lambda a: np.percentile(a, 10)),
            "post_p90": stat(post, lambda a: np.percentile(a, 90)),
            "gain_mean": stat(post - pre, np.mean),
        })
    return out


SUMMARY_COLUMNS = ("pair", "metric", "grid_spacing", "n", "n_failed", "pre_mean", "post_mean",
                   "post_p10", "post_p90", "gain_mean")


def write_summary(path, summary):
    with open(path, "w", newline="") as fh:
        fh.write(SUMMARY_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for s in summary:
            w.writerow([_fmt(s[c]) for c in SUMMARY_COLUMNS])
