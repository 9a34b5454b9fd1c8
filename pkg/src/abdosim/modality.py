"""CT, CBCT and T1-VIBE MRI synthesis from organ label maps.

Intensities are assigned per organ from a tissue table (attenuation for the
CT-like modalities, the spoiled gradient echo signal for MRI), windowed to
[-1, 1] and then overlaid with noise shaped to a radial noise power spectrum.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import UnknownLabel
from .phantom import LIVER
from .volume import (CBCT_WINDOW, CT_WINDOW, MRI_WINDOW, LabelMap, Volume, resolve_window,
                     window_normalize)

TUBE_ENERGIES = tuple(range(90, 121, 5))  # keV
MODALITIES = ("CT", "CBCT", "MRI")
WINDOWS = {"CT": CT_WINDOW, "CBCT": CBCT_WINDOW, "MRI": MRI_WINDOW}

# Scales the dimensionless VIBE signal (fraction of rho) to scanner-like units
# so MRI noise magnitudes are quoted on a range of a few hundred.
MRI_GAIN = 10000.0
CBCT_OUTSIDE_HU = -1024.0

# Radial NPS shapes, (frequency 1/mm, relative power). CT and CBCT have the
# band-pass shape of filtered back projection; MRI noise is low-pass.
CT_NOISE_PROFILE = ((0.0, 0.0), (0.04, 0.55), (0.08, 0.95), (0.11, 1.0), (0.16, 0.75),
                    (0.22, 0.35), (0.3, 0.08), (0.5, 0.0))
CBCT_NOISE_PROFILE = ((0.0, 0.0), (0.03, 0.6), (0.06, 1.0), (0.1, 0.85), (0.16, 0.4),
                      (0.25, 0.1), (0.5, 0.0))
MRI_NOISE_PROFILE = ((0.0, 1.0), (0.05, 0.8), (0.1, 0.45), (0.2, 0.12), (0.3, 0.03), (0.5, 0.0))
FLAT_PROFILE = ((0.0, 1.0), (1.0, 1.0))


# --------------------------------------------------------------------------
# tissue properties


@dataclass(frozen=True)
class Tissue:
    name: str
    mu: dict  # tube energy (keV) -> linear attenuation (1/cm)
    t1: float  # ms
    t2: float  # ms
    rho: float

    def __post_init__(self):
        mu = {int(e): float(m) for e, m in self.mu.items()}
        object.__setattr__(self, "mu", mu)
        if any(m < 0 for m in mu.values()):
            raise ValueError(f"{self.name}: attenuation must be non-negative")
        if not self.t1 > self.t2 > 0:
            raise ValueError(f"{self.name}: need t1 > t2 > 0")
        if self.rho < 0:
            raise ValueError(f"{self.name}: rho must be non-negative")


@dataclass(frozen=True)
class TissueTable:
    tissues: dict  # organ ID -> Tissue
    water_mu: dict  # tube energy (keV) -> 1/cm

    def __post_init__(self):
        object.__setattr__(self, "tissues", {int(k): v for k, v in self.tissues.items()})
        water = {int(e): float(m) for e, m in self.water_mu.items()}
        object.__setattr__(self, "water_mu", water)
        missing = [e for e in TUBE_ENERGIES if water.get(e, 0.0) <= 0]
        if missing:
            raise ValueError(f"water attenuation missing at {missing} keV")

    def __getitem__(self, organ: int) -> Tissue:
        try:
            return self.tissues[int(organ)]
        except KeyError:
            raise UnknownLabel(organ) from None

    def to_dict(self) -> dict:
        return {
            "water_mu": {str(e): m for e, m in sorted(self.water_mu.items())},
            "tissues": {str(k): {"name": t.name, "mu": {str(e): m for e, m in sorted(t.mu.items())},
                                 "t1": t.t1, "t2": t.t2, "rho": t.rho}
                        for k, t in sorted(self.tissues.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TissueTable":
        return cls({int(k): Tissue(**v) for k, v in d["tissues"].items()}, d["water_mu"])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "TissueTable":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_tissue_table() -> TissueTable:
    text = resources.files("abdosim").joinpath("data/tissue_table.json").read_text()
    return TissueTable.from_dict(json.loads(text))


def mu_to_hu(mu, mu_water: float):
    if mu_water <= 0:
        raise ValueError("water attenuation must be positive")
    return 1000.0 * (np.asarray(mu, dtype=np.float64) - mu_water) / mu_water


# --------------------------------------------------------------------------
# MRI


@dataclass(frozen=True)
class VibeParams:
    te: float = 4.54  # ms
    tr: float = 7.25  # ms
    alpha: float = 10.0  # degrees

    def __post_init__(self):
        if not 0 < self.te < self.tr:
            raise ValueError("need 0 < TE < TR")
        if not 0 < self.alpha < 90:
            raise ValueError("flip angle must be in (0, 90) degrees")


def vibe_signal(t1, t2, rho, p: VibeParams):
    """Steady-state spoiled gradient echo signal."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    a = math.radians(p.alpha)
    e1 = np.exp(-p.tr / t1)
    return rho * math.sin(a) * (1.0 - e1) / (1.0 - math.cos(a) * e1) * np.exp(-p.te / t2)


def jitter_factors(seed, n: int, spread: float = 0.05) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x71]))
    return rng.uniform(1.0 - spread, 1.0 + spread, n)


def jitter_tissue(t: TissueTable, seed) -> TissueTable:
    """Scale t1, t2 and rho of every organ by independent factors in [0.95, 1.05]."""
    ids = sorted(t.tissues)
    f = jitter_factors(seed, 3 * len(ids)).reshape(len(ids), 3)
    out = {k: replace(t.tissues[k], t1=t.tissues[k].t1 * a, t2=t.tissues[k].t2 * b,
                      rho=t.tissues[k].rho * c)
           for k, (a, b, c) in zip(ids, f)}
    return TissueTable(out, t.water_mu)


# --------------------------------------------------------------------------
# acquisition


@dataclass(frozen=True)
class NoiseSpec:
    """Target noise std (window units: HU, or scaled MRI signal) and radial NPS shape."""

    magnitude: float = 0.0
    radial_profile: tuple = FLAT_PROFILE

    def __post_init__(self):
        prof = tuple((float(f), float(p)) for f, p in self.radial_profile)
        object.__setattr__(self, "radial_profile", prof)
        if self.magnitude < 0:
            raise ValueError("noise magnitude must be non-negative")
        if not prof or any(p < 0 for _, p in prof):
            raise ValueError("radial profile must be non-empty and non-negative")
        if any(b[0] <= a[0] for a, b in zip(prof, prof[1:])):
            raise ValueError("profile frequencies must be increasing")


@dataclass(frozen=True)
class CylinderFov:
    """Axial cylinder; ``center`` None means the liver centroid."""

    radius: float = 90.0  # mm
    center: tuple | None = None  # (x, y) mm

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("FOV radius must be positive")


@dataclass(frozen=True)
class AcquisitionSpec:
    modality: str
    tube_energy: int | None = None
    vibe: VibeParams | None = None
    fov_mask: CylinderFov | None = None
    jitter_seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        m = self.modality
        if m not in MODALITIES:
            raise ValueError(f"unknown modality {m!r}")
        if m in ("CT", "CBCT"):
            if self.tube_energy not in TUBE_ENERGIES:
                raise ValueError(f"tube energy must be one of {TUBE_ENERGIES} keV")
            if self.vibe is not None:
                raise ValueError("VIBE parameters only apply to MRI")
        else:
            if self.vibe is None or self.tube_energy is not None:
                raise ValueError("MRI needs VIBE parameters and no tube energy")
        if (m == "CBCT") != (self.fov_mask is not None):
            raise ValueError("a FOV mask is required for CBCT and only for CBCT")

    @classmethod
    def ct(cls, tube_energy=100, noise=None, **kw):
        return cls("CT", tube_energy=tube_energy, noise=noise or NoiseSpec(), **kw)

    @classmethod
    def cbct(cls, tube_energy=100, fov=None, noise=None, **kw):
        return cls("CBCT", tube_energy=tube_energy, fov_mask=fov or CylinderFov(),
                   noise=noise or NoiseSpec(), **kw)

    @classmethod
    def mri(cls, vibe=None, noise=None, **kw):
        return cls("MRI", vibe=vibe or VibeParams(), noise=noise or NoiseSpec(), **kw)

    def to_dict(self) -> dict:
        return {
            "modality": self.modality,
            "tube_energy": self.tube_energy,
            "vibe": None if self.vibe is None else vars(self.vibe).copy(),
            "fov_mask": None if self.fov_mask is None else
            {"radius": self.fov_mask.radius,
             "center": None if self.fov_mask.center is None else list(self.fov_mask.center)},
            "jitter_seed": self.jitter_seed,
            "noise": {"magnitude": self.noise.magnitude,
                      "radial_profile": [list(p) for p in self.noise.radial_profile]},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionSpec":
        d = dict(d)
        if d.get("vibe") is not None:
            d["vibe"] = VibeParams(**d["vibe"])
        if d.get("fov_mask") is not None:
            fov = dict(d["fov_mask"])
            if fov.get("center") is not None:
                fov["center"] = tuple(fov["center"])
            d["fov_mask"] = CylinderFov(**fov)
        if d.get("noise") is not None:
            d["noise"] = NoiseSpec(**d["noise"])
        else:
            d.pop("noise", None)
        return cls(**d)


def fov_mask(labels: LabelMap, fov: CylinderFov) -> np.ndarray:
    g = labels.geometry
    if fov.center is None:
        liver = labels.data == LIVER
        if not liver.any():
            raise UnknownLabel("CBCT FOV is centred on the liver but the label map has none")
        k, j, i = np.nonzero(liver)
        cx = g.origin[0] + g.spacing[0] * i.mean()
        cy = g.origin[1] + g.spacing[1] * j.mean()
    else:
        cx, cy = fov.center
    x = g.axis_coords(0)[None, :] - cx
    y = g.axis_coords(1)[:, None] - cy
    inside = x * x + y * y <= fov.radius ** 2
    return np.broadcast_to(inside, g.shape)


def _lookup(labels: LabelMap, values: dict) -> np.ndarray:
    present = np.unique(labels.data)
    missing = [int(k) for k in present if int(k) not in values]
    if missing:
        raise UnknownLabel(f"labels {missing} have no tissue entry")
    lut = np.zeros(int(present.max()) + 1, dtype=np.float64)
    for k in present:
        lut[k] = values[int(k)]
    return lut[labels.data]


def native_image(labels: LabelMap, t: TissueTable, a: AcquisitionSpec) -> Volume:
    """Noiseless image in physical units: HU for CT/CBCT, scaled signal for MRI."""
    if a.modality == "MRI":
        jt = jitter_tissue(t, a.jitter_seed)
        values = {k: MRI_GAIN * float(vibe_signal(x.t1, x.t2, x.rho, a.vibe))
                  for k, x in jt.tissues.items()}
        return Volume(labels.geometry, _lookup(labels, values))
    e = a.tube_energy
    water = t.water_mu[e]
    values = {k: float(mu_to_hu(x.mu[e], water)) for k, x in t.tissues.items()}
    img = _lookup(labels, values)
    if a.modality == "CBCT":
        img = np.where(fov_mask(labels, a.fov_mask), img, CBCT_OUTSIDE_HU)
    return Volume(labels.geometry, img)


# --------------------------------------------------------------------------
# noise


def _profile_filter(shape2d, spacing, profile) -> np.ndarray:
    ny, nx = shape2d
    fx = np.fft.rfftfreq(nx, d=spacing[0])
    fy = np.fft.fftfreq(ny, d=spacing[1])
    fr = np.sqrt(fx[None, :] ** 2 + fy[:, None] ** 2)
    f, p = np.asarray(profile).T
    return np.sqrt(np.interp(fr, f, p))


def add_textured_noise(v: Volume, roi, n: NoiseSpec, seed, support=None) -> Volume:
    """Add zero-mean noise with the radial NPS shape of ``n``.

    Each axial slice of white Gaussian noise is filtered in the frequency
    domain, then the field is scaled so its standard deviation over ``roi``
    equals ``n.magnitude`` exactly. ``support`` restricts where noise is added.
    """
    if n.magnitude == 0:
        return v
    g = v.geometry
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x401]))
    white = rng.standard_normal(g.shape)
    h = _profile_filter(g.shape[1:], g.spacing, n.radial_profile)
    noise = np.fft.irfft2(np.fft.rfft2(white) * h, s=g.shape[1:])

    sel = np.asarray(roi.data if isinstance(roi, LabelMap) else roi) != 0
    if support is not None:
        support = np.broadcast_to(np.asarray(support, bool), g.shape)
        noise = np.where(support, noise, 0.0)
        sel = sel & support
    if not sel.any():
        sel = np.ones(g.shape, bool)
    std = noise[sel].std()
    if std == 0:
        raise ValueError("noise profile has no power at the grid frequencies")
    noise *= n.magnitude / std
    return v.with_data(v.data.astype(np.float64) + noise)


# --------------------------------------------------------------------------
# full pipeline


def window_of(native: Volume, modality: str) -> tuple[float, float]:
    return resolve_window(native, WINDOWS[modality])


def simulate(labels: LabelMap, t: TissueTable, a: AcquisitionSpec, noise_seed: int = 0,
             roi_organ: int = LIVER) -> Volume:
    """Windowed [-1, 1] image of ``labels`` with noise added.

    Noise magnitude is given in window units and converted to the normalized
    scale; its std is matched over the ``roi_organ`` voxels (the whole volume if
    that organ is absent). CBCT noise is confined to the FOV cylinder.
    """
    native = native_image(labels, t, a)
    lo, hi = window_of(native, a.modality)
    out = window_normalize(native, WINDOWS[a.modality])
    if a.noise.magnitude > 0:
        scaled = NoiseSpec(a.noise.magnitude * 2.0 / (hi - lo), a.noise.radial_profile)
        support = fov_mask(labels, a.fov_mask) if a.modality == "CBCT" else None
        out = add_textured_noise(out, labels.data == roi_organ, scaled, noise_seed, support)
        out = out.with_data(np.clip(out.data, -1.0, 1.0))
    return out


def hu_of(normalized, lo: float, hi: float):
    """Map normalized intensities back onto the window range."""
    return (np.asarray(normalized, dtype=np.float64) + 1.0) * (hi - lo) / 2.0 + lo
