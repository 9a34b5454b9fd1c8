"""Noise texture, noise magnitude and intensity-distribution statistics."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..errors import BinMismatch, EdgeMismatch, EmptyMask, RoiTooSmall, ZeroVariance
from ..volume import LabelMap, Volume
from .overlap import as_array


@dataclass(frozen=True)
class RadialNps:
    bin_centers: np.ndarray  # spatial frequency, 1/mm (DC bin excluded)
    power: np.ndarray
    roi_voxels: int
    patches: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frequency_per_mm", "power"])
            for f, p in zip(self.bin_centers, self.power):
                w.writerow([f"{f:.8g}", f"{p:.8g}"])


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    excluded_background: bool = False

    def __post_init__(self):
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("histogram edges must be strictly increasing")
        if len(self.counts) != len(self.edges) - 1:
            raise ValueError("need one count per bin")
        if np.any(np.asarray(self.counts) < 0):
            raise ValueError("counts must be non-negative")

    @property
    def density(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=np.float64)
        total = c.sum()
        return c / total if total > 0 else c

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lo", "hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([f"{lo:.8g}", f"{hi:.8g}", int(c)])


def roi_mask(roi, organ: int | None = None) -> np.ndarray:
    """Boolean ROI from a label map (optionally one organ ID) or a boolean array."""
    data = as_array(roi)
    if organ is not None:
        return data == organ
    return data != 0


def noise_magnitude(v, roi, organ: int | None = None) -> float:
    """Population standard deviation of the ROI voxels."""
    sel = roi_mask(roi, organ)
    if not sel.any():
        raise EmptyMask("noise ROI is empty")
    return float(np.std(as_array(v)[sel].astype(np.float64)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if den == 0:
        raise ZeroVariance("Pearson correlation undefined for constant input")
    return float(np.clip(np.dot(a, b) / den, -1.0, 1.0))


def _patch_corners(mask2d: np.ndarray, size: int) -> list[tuple[int, int]]:
    """Greedy raster selection of non-overlapping size x size squares inside the mask."""
    h, w = mask2d.shape
    if h < size or w < size:
        return []
    integral = np.pad(mask2d.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    inside = (integral[size:, size:] - integral[:-size, size:]
              - integral[size:, :-size] + integral[:-size, :-size]) == size * size
    taken = np.zeros_like(mask2d, dtype=bool)
    corners = []
    for i, j in zip(*np.nonzero(inside)):
        if not taken[i:i + size, j:j + size].any():
            taken[i:i + size, j:j + size] = True
            corners.append((int(i), int(j)))
    return corners


def _detrend_plane(patch: np.ndarray, basis: np.ndarray) -> np.ndarray:
    flat = patch.ravel()
    return patch - (basis @ (basis.T @ flat)).reshape(patch.shape)


def _plane_basis(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis of first-order polynomials and the fraction of white-noise
    power the fit removes at each 2D frequency."""
    yy, xx = np.mgrid[0:size, 0:size]
    design = np.stack([np.ones(size * size), xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    basis, _ = np.linalg.qr(design)
    spectra = np.fft.fft2(basis.T.reshape(3, size, size))
    removed = np.sum(np.abs(spectra) ** 2, axis=0) / (size * size)
    return basis, removed


def radial_nps(v, roi, organ: int | None = None, patch: int = 32, spacing=None) -> RadialNps:
    """Radially binned 2D noise power spectrum from axial patches inside the ROI.

    Each ``patch x patch`` square lying fully inside the ROI has a fitted plane
    removed before its periodogram is taken; periodograms are averaged and
    normalized by ``dx*dy / (N*N)``. The plane fit removes part of the noise
    at the lowest frequencies; each frequency is divided by its retained
    white-noise fraction so a white input gives a flat estimate. Bins are
    spaced ``1/(patch*dx)`` from the first non-zero frequency up to Nyquist.
    """
    data = as_array(v).astype(np.float64)
    if data.ndim == 2:
        data = data[None]
    sel = roi_mask(roi, organ)
    if sel.ndim == 2:
        sel = sel[None]
    if spacing is None:
        if isinstance(v, Volume):
            spacing = v.geometry.spacing[:2]
        elif isinstance(roi, LabelMap):
            spacing = roi.geometry.spacing[:2]
        else:
            spacing = (1.0, 1.0)
    dx, dy = float(spacing[0]), float(spacing[1])

    basis, removed = _plane_basis(patch)
    acc = np.zeros((patch, patch))
    count = 0
    for k in range(data.shape[0]):
        for i, j in _patch_corners(sel[k], patch):
            p = _detrend_plane(data[k, i:i + patch, j:j + patch], basis)
            acc += np.abs(np.fft.fft2(p)) ** 2
            count += 1
    if count == 0:
        raise RoiTooSmall(f"no {patch}x{patch} axial patch fits inside the ROI")
    nps2d = acc / count * (dx * dy) / (patch * patch)
    retained = 1.0 - removed
    nps2d = np.divide(nps2d, retained, out=np.zeros_like(nps2d), where=retained > 1e-9)

    fx = np.fft.fftfreq(patch, d=dx)
    fy = np.fft.fftfreq(patch, d=dy)
    fr = np.sqrt(fx[None, :] ** 2 + fy[:, None] ** 2)
    df = 1.0 / (patch * dx)
    idx = np.rint(fr / df).astype(int)
    nbins = patch // 2
    centers = df * np.arange(1, nbins + 1)
    power = np.array([nps2d[idx == b].mean() for b in range(1, nbins + 1)])
    return RadialNps(centers, power, int(count * patch * patch), count)


def ncc(p: RadialNps, q: RadialNps) -> float:
    """Pearson correlation of two radial NPS curves on the same bins."""
    if len(p.bin_centers) != len(q.bin_centers) or not np.allclose(p.bin_centers, q.bin_centers):
        raise BinMismatch("radial NPS curves use different frequency bins")
    return _pearson(p.power, q.power)


def histogram(v, lo: float, hi: float, bins: int = 256, mask=None) -> Histogram:
    """Uniform histogram over ``[lo, hi]``; with ``mask`` only its non-zero voxels count."""
    data = as_array(v)
    excluded = mask is not None
    if excluded:
        data = data[roi_mask(mask)]
    counts, edges = np.histogram(np.clip(data, lo, hi), bins=bins, range=(lo, hi))
    return Histogram(edges, counts, excluded)


def hist_cc(h1: Histogram, h2: Histogram) -> float:
    """Pearson correlation of two histograms after density normalization."""
    if len(h1.edges) != len(h2.edges) or not np.allclose(h1.edges, h2.edges):
        raise EdgeMismatch("histograms have different bin edges")
    return _pearson(h1.density, h2.density)
