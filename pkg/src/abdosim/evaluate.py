"""Image quality reports for a generated dataset.

Each simulated volume is compared with a reference: by default the noiseless
rendering of the same labels and acquisition, or with ``reference_root`` the
same-named volume of another dataset. Intensity metrics (MAE, NM) are in
window units (HU for CT/CBCT, scaled signal for MRI); SSIM, FSIM and the edge
ratios use the normalized [-1, 1] images.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import modality as mo
from .errors import AbdosimError
from .metrics import (MetricReport, edge_ratios, fsim, hist_cc, histogram, mae, ncc, noise_magnitude,
                      radial_nps, ssim)
from .metrics.noise import Histogram, RadialNps
from .metrics.report import write_reports_csv
from .phantom import LIVER
from .volume import Volume

log = logging.getLogger(__name__)

TABLE_SCHEMA = "# schema: evaluate-table v1"
TABLE_METRICS = ("mae", "ssim", "fsim", "epr", "egr", "nm", "ncc", "histcc")
HIST_BINS = 256
NPS_PATCHES = (32, 16, 8)


def _nps(v: Volume, labels) -> RadialNps:
    for patch in NPS_PATCHES:
        try:
            return radial_nps(v, labels, organ=LIVER, patch=patch)
        except AbdosimError:
            continue
    raise AbdosimError("liver too small for any NPS patch size")


def target_nps(profile, like: RadialNps) -> RadialNps:
    f, p = np.asarray(profile, dtype=np.float64).T
    return RadialNps(like.bin_centers, np.interp(like.bin_centers, f, p), like.roi_voxels, like.patches)


def noiseless(labels, acq: mo.AcquisitionSpec, table: mo.TissueTable) -> Volume:
    quiet = dataclasses.replace(acq, noise=mo.NoiseSpec(0.0, acq.noise.radial_profile))
    return mo.simulate(labels, table, quiet)


def evaluate_volume(name: str, vol: Volume, ref: Volume, labels, window, profile=None,
                    ref_is_noisy: bool = False):
    """MetricReport plus the histogram and NPS of one volume."""
    lo, hi = window
    x = vol.with_data(mo.hu_of(vol.data, lo, hi))
    y = ref.with_data(mo.hu_of(ref.data, lo, hi))
    rep = MetricReport(name)
    rep["mae"] = mae(x, y, labels)
    rep["ssim"] = ssim(ref, vol)
    rep["fsim"] = fsim(ref, vol)
    epr, egr = edge_ratios(ref, vol)
    rep["epr"] = epr
    rep["egr"] = egr
    rep["nm"] = noise_magnitude(x, labels, organ=LIVER)
    hx = histogram(x, lo, hi, HIST_BINS, mask=labels)
    hy = histogram(y, lo, hi, HIST_BINS, mask=labels)
    rep["histcc"] = hist_cc(hx, hy)
    nps = None
    if rep["nm"] > 0:
        try:
            nps = _nps(x, labels)
            if ref_is_noisy:
                other = _nps(y, labels)
            elif profile is not None:
                other = target_nps(profile, nps)
            else:
                other = None
            if other is not None:
                rep["ncc"] = ncc(nps, other)
        except AbdosimError as exc:
            log.warning("%s: no NPS/NCC: %s", name, exc)
    return rep, hx, nps


def evaluate_dataset(root, out=None, reference_root=None) -> list[MetricReport]:
    """Write per-volume JSON reports, the aggregate table, histograms and NPS curves."""
    root = Path(root)
    out = Path(out or root / "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    reports, per_mod = [], {}
    for d in ds.list_models(root):
        man = ds.read_manifest(d)
        task = man["task"]
        table = ds._load_table(task["tissue_table"])
        labels_cache = {}
        for art in man["artifacts"]:
            if "modality" not in art:
                continue
            m, name = art["modality"], f"{d.name}/{art['name']}"
            try:
                vol = ds.artifact(d, art["name"])
                if art["labels"] not in labels_cache:
                    labels_cache[art["labels"]] = ds.artifact(d, art["labels"])
                labels = labels_cache[art["labels"]]
                acq = mo.AcquisitionSpec.from_dict(task["acquisitions"][m])
                if reference_root is not None:
                    ref = ds.artifact(Path(reference_root) / d.name, art["name"])
                else:
                    ref = noiseless(labels, acq, table)
                rep, hist, nps = evaluate_volume(name, vol, ref, labels, art["window"],
                                                 profile=acq.noise.radial_profile,
                                                 ref_is_noisy=reference_root is not None)
            except (OSError, AbdosimError, ValueError) as exc:
                log.warning("skipping %s: %s", name, exc)
                continue
            reports.append(rep)
            with open(out / f"{d.name}_{art['name']}.json", "w") as fh:
                fh.write(rep.to_json())
            per_mod.setdefault(m, []).append((rep, hist, nps))
    write_reports_csv(out / "reports.csv", reports)
    write_table(out / "table.csv", per_mod)
    for m, items in per_mod.items():
        hists = [h for _, h, _ in items]
        Histogram(hists[0].edges, np.sum([h.counts for h in hists], axis=0), True) \
            .to_csv(out / f"histogram_{m}.csv")
        curves = [n for _, _, n in items if n is not None]
        if curves and all(len(c.bin_centers) == len(curves[0].bin_centers) for c in curves):
            RadialNps(curves[0].bin_centers, np.mean([c.power for c in curves], axis=0),
                      sum(c.roi_voxels for c in curves), sum(c.patches for c in curves)) \
                .to_csv(out / f"nps_{m}.csv")
    return reports


def write_table(path, per_mod: dict):
    """Rows are metrics, columns mean and std per modality."""
    mods = [m for m in mo.MODALITIES if m in per_mod]
    with open(path, "w", newline="") as fh:
        fh.write(TABLE_SCHEMA + "\n")
        w = csv.writer(fh)
        w.writerow(["metric"] + [f"{m}_{s}" for m in mods for s in ("mean", "std", "n")])
        for metric in TABLE_METRICS:
            row = [metric]
            for m in mods:
                vals = np.array([r.values[metric] for r, _, _ in per_mod[m] if metric in r.values])
                if len(vals):
                    row += [f"{vals.mean():.6g}", f"{vals.std():.6g}", len(vals)]
                else:
                    row += ["nan", "nan", 0]
            w.writerow(row)


def read_table(path) -> dict:
    with open(path, newline="") as fh:
        if fh.readline().strip() != TABLE_SCHEMA:
            raise ValueError("unexpected evaluate table schema")
        return {r["metric"]: r for r in csv.DictReader(fh)}
