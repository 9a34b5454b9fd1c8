"""Dataset configuration, generation and manifests.

One directory per phantom model holds the exhale/inhale label maps, the
ground-truth pull-back field from exhale to inhale, one volume per modality
and phase, and ``manifest.json`` with checksums of all of them.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import modality as mo
from . import phantom as ph
from . import rvol
from .errors import ConfigError
from .volume import Geometry

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MANIFEST_SCHEMA = "abdosim-manifest v1"
PHASES = ("exhale", "inhale")

RESOLUTIONS = {
    "desk": ((128, 128, 64), (2.0, 2.0, 2.0)),
    "paper": ((256, 256, 64), (1.0, 1.0, 2.0)),
}

DEFAULT_NOISE = {
    "CT": mo.NoiseSpec(39.0, mo.CT_NOISE_PROFILE),
    "CBCT": mo.NoiseSpec(52.0, mo.CBCT_NOISE_PROFILE),
    "MRI": mo.NoiseSpec(25.0, mo.MRI_NOISE_PROFILE),
}


@dataclass(frozen=True)
class DatasetConfig:
    n_models: int = 56
    base_seed: int = 0
    seeds: tuple | None = None
    modalities: tuple = mo.MODALITIES
    respiration: ph.RespirationParams = field(default_factory=ph.RespirationParams)
    respiration_per_model: tuple | None = None
    noise: dict = field(default_factory=lambda: dict(DEFAULT_NOISE))
    cbct_fov_radius: float = 90.0
    resolution: str = "desk"
    grid: tuple | None = None  # ((nx, ny, nz), (sx, sy, sz)) overrides ``resolution``
    tissue_table: str | None = None
    output: str = "dataset"

    def __post_init__(self):
        if self.n_models < 1:
            raise ConfigError("n_models must be at least 1")
        if self.seeds is not None and len(self.seeds) != self.n_models:
            raise ConfigError("seeds must list one seed per model")
        bad = [m for m in self.modalities if m not in mo.MODALITIES]
        if bad or not self.modalities:
            raise ConfigError(f"unknown modalities {bad}")
        if self.resolution not in RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {sorted(RESOLUTIONS)}")
        if self.respiration_per_model is not None and len(self.respiration_per_model) != self.n_models:
            raise ConfigError("respiration_per_model must have one entry per model")
        if self.cbct_fov_radius <= 0:
            raise ConfigError("cbct_fov_radius must be positive")

    @property
    def geometry(self) -> Geometry:
        dims, spacing = self.grid or RESOLUTIONS[self.resolution]
        return Geometry.centered(tuple(dims), tuple(spacing))

    def seed_of(self, i: int) -> int:
        return int(self.seeds[i]) if self.seeds is not None else self.base_seed + i

    def respiration_of(self, i: int) -> ph.RespirationParams:
        if self.respiration_per_model is not None:
            return self.respiration_per_model[i]
        return self.respiration

    def to_dict(self) -> dict:
        return {
            "n_models": self.n_models,
            "base_seed": self.base_seed,
            "seeds": None if self.seeds is None else list(self.seeds),
            "modalities": list(self.modalities),
            "respiration": asdict(self.respiration),
            "respiration_per_model": None if self.respiration_per_model is None
            else [asdict(r) for r in self.respiration_per_model],
            "noise": {k: {"magnitude": v.magnitude, "radial_profile": [list(p) for p in v.radial_profile]}
                      for k, v in sorted(self.noise.items())},
            "cbct_fov_radius": self.cbct_fov_radius,
            "resolution": self.resolution,
            "grid": None if self.grid is None else [list(self.grid[0]), list(self.grid[1])],
            "tissue_table": self.tissue_table,
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset config keys {sorted(unknown)}")
        try:
            if d.get("seeds") is not None:
                d["seeds"] = tuple(int(s) for s in d["seeds"])
            if "modalities" in d:
                d["modalities"] = tuple(d["modalities"])
            if "respiration" in d:
                d["respiration"] = ph.RespirationParams(**d["respiration"])
            if d.get("respiration_per_model") is not None:
                d["respiration_per_model"] = tuple(ph.RespirationParams(**r)
                                                   for r in d["respiration_per_model"])
            if "noise" in d:
                noise = dict(DEFAULT_NOISE)
                noise.update({k: mo.NoiseSpec(**v) for k, v in d["noise"].items()})
                d["noise"] = noise
            if d.get("grid") is not None:
                dims, spacing = d["grid"]
                d["grid"] = (tuple(int(n) for n in dims), tuple(float(s) for s in spacing))
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid dataset config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "DatasetConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read dataset config {path}: {exc}") from exc


# --------------------------------------------------------------------------
# per-model task


def derived_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed), *tags]).generate_state(1)[0])


def acquisitions(cfg: DatasetConfig, seed: int) -> dict[str, mo.AcquisitionSpec]:
    """Acquisition settings of one model; tube energies are drawn per model."""
    rng = np.random.default_rng(derived_seed(seed, 0xE))
    energies = rng.choice(mo.TUBE_ENERGIES, size=2)
    out = {}
    for m in cfg.modalities:
        noise = cfg.noise[m]
        if m == "CT":
            out[m] = mo.AcquisitionSpec.ct(int(energies[0]), noise=noise)
        elif m == "CBCT":
            out[m] = mo.AcquisitionSpec.cbct(int(energies[1]), fov=mo.CylinderFov(cfg.cbct_fov_radius),
                                             noise=noise)
        else:
            out[m] = mo.AcquisitionSpec.mri(noise=noise, jitter_seed=seed)
    return out


def model_task(cfg: DatasetConfig, i: int) -> dict:
    """Everything that determines the content of model ``i``, as plain JSON data."""
    seed = cfg.seed_of(i)
    g = cfg.geometry
    return {
        "model": i,
        "seed": seed,
        "geometry": {"dims": list(g.dims), "spacing": list(g.spacing), "origin": list(g.origin)},
        "respiration": asdict(cfg.respiration_of(i)),
        "acquisitions": {m: a.to_dict() for m, a in acquisitions(cfg, seed).items()},
        "tissue_table": cfg.tissue_table,
    }


def task_digest(task: dict) -> str:
    return hashlib.sha256(json.dumps(task, sort_keys=True).encode()).hexdigest()


def model_dir(root, i: int) -> Path:
    return Path(root) / f"model_{i:03d}"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(directory) -> dict | None:
    path = Path(directory) / MANIFEST
    if not path.exists():
        return None
    with open(path) as fh:
        return json.load(fh)


def manifest_is_current(directory, task: dict) -> bool:
    man = read_manifest(directory)
    if man is None or man.get("task_digest") != task_digest(task) or not man.get("complete"):
        return False
    for art in man["artifacts"]:
        p = Path(directory) / art["file"]
        if not p.exists() or sha256_file(p) != art["sha256"]:
            return False
    return True


def _load_table(cfg_path: str | None) -> mo.TissueTable:
    return mo.TissueTable.load(cfg_path) if cfg_path else mo.default_tissue_table()


def build_model(task: dict, directory) -> dict:
    """Generate all artifacts of one model into ``directory`` and write its manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seed = task["seed"]
    gd = task["geometry"]
    g = Geometry(tuple(gd["dims"]), tuple(gd["spacing"]), tuple(gd["origin"]))
    resp = ph.RespirationParams(**task["respiration"])
    table = _load_table(task["tissue_table"])
    acq = {m: mo.AcquisitionSpec.from_dict(a) for m, a in task["acquisitions"].items()}

    artifacts = []

    def emit(name, obj, **meta):
        fname = f"{name}.rvol"
        rvol.write(directory / fname, obj)
        artifacts.append({"name": name, "file": fname, "kind": rvol.read_header(directory / fname)["kind"],
                          "sha256": sha256_file(directory / fname), **meta})

    spec = ph.PhantomSpec(seed=seed)
    labels = {"exhale": ph.generate_phantom(spec, g), "inhale": ph.phantom_state(spec, resp, g)}
    for phase in PHASES:
        emit(f"labels_{phase}", labels[phase], phase=phase)
    emit("field_exhale_to_inhale", ph.respiration_field(spec, resp, g),
         note="pull-back: inhale(x) = exhale(x + d(x))")

    if "MRI" in acq:
        arm_spec = ph.PhantomSpec(seed=seed, include_arms=True)
        mri_labels = {"exhale": ph.generate_phantom(arm_spec, g),
                      "inhale": ph.phantom_state(arm_spec, resp, g)}
        for phase in PHASES:
            emit(f"labels_arms_{phase}", mri_labels[phase], phase=phase)

    for mi, (m, a) in enumerate(sorted(acq.items())):
        for pi, phase in enumerate(PHASES):
            lab = mri_labels[phase] if m == "MRI" else labels[phase]
            noise_seed = derived_seed(seed, 0x5EED, mo.MODALITIES.index(m), pi)
            native = mo.native_image(lab, table, a)
            lo, hi = mo.window_of(native, m)
            vol = mo.simulate(lab, table, a, noise_seed=noise_seed)
            emit(f"{m.lower()}_{phase}", vol, modality=m, phase=phase, window=[lo, hi],
                 noise_seed=noise_seed, labels=f"labels_arms_{phase}" if m == "MRI" else f"labels_{phase}")

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "model": task["model"],
        "seed": seed,
        "task": task,
        "task_digest": task_digest(task),
        "geometry": gd,
        "phantom": spec.to_dict(),
        "artifacts": artifacts,
        "complete": True,
    }
    tmp = directory / (MANIFEST + ".part")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, directory / MANIFEST)
    return manifest


def _build_or_skip(args) -> tuple[int, str]:
    task, directory = args
    if manifest_is_current(directory, task):
        return task["model"], "skipped"
    try:
        build_model(task, directory)
    except Exception as exc:  # reported per model; the run continues
        for p in Path(directory).glob("*.part"):
            p.unlink()
        man = Path(directory) / MANIFEST
        if man.exists():
            man.unlink()
        log.error("model %d failed: %s", task["model"], exc)
        return task["model"], f"failed: {exc}"
    return task["model"], "built"


def generate(cfg: DatasetConfig, out=None, workers: int = 1) -> dict[int, str]:
    """Build every model; up-to-date models (matching digest and checksums) are skipped."""
    root = Path(out or cfg.output)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "dataset.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)
    jobs = [(model_task(cfg, i), model_dir(root, i)) for i in range(cfg.n_models)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_build_or_skip, jobs))
    else:
        results = [_build_or_skip(j) for j in jobs]
    return dict(results)


def list_models(root) -> list[Path]:
    return sorted(p for p in Path(root).glob("model_*") if (p / MANIFEST).exists())


def artifact(directory, name: str):
    return rvol.read(Path(directory) / f"{name}.rvol")
