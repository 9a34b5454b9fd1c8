"""Volume containers, trilinear sampling, resampling, windowing and warping.

Arrays are stored in numpy C order with shape ``(nz, ny, nx)`` so that the
flattened data is x-fastest. Geometry tuples (dims, spacing, origin) are
always given in world order ``(x, y, z)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateWindow, GeometryMismatch


@dataclass(frozen=True)
class Geometry:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("geometry needs three dims, spacings and origin coordinates")
        if min(dims) < 1:
            raise ValueError(f"dims must be >= 1, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, dims, spacing) -> "Geometry":
        """Grid whose voxel centers are symmetric about the world origin."""
        origin = tuple(-0.5 * (n - 1) * s for n, s in zip(dims, spacing))
        return cls(tuple(dims), tuple(spacing), origin)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        return self.dims[::-1]

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> tuple[float, float, float]:
        """Physical extent covered by the voxels (n * spacing) per axis."""
        return tuple(n * s for n, s in zip(self.dims, self.spacing))

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World coordinates of the first and last voxel centers."""
        lo = np.asarray(self.origin)
        hi = lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return lo, hi

    def axis_coords(self, axis: int) -> np.ndarray:
        """Voxel-center world coordinates along world axis 0=x, 1=y, 2=z."""
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def world_grid(self) -> np.ndarray:
        """World coordinates of every voxel center, shape ``(nz, ny, nx, 3)``."""
        z, y, x = np.meshgrid(self.axis_coords(2), self.axis_coords(1),
                              self.axis_coords(0), indexing="ij")
        return np.stack([x, y, z], axis=-1)

    def to_index(self, points) -> np.ndarray:
        """Continuous voxel index (x, y, z order) of world points."""
        points = np.asarray(points, dtype=np.float64)
        return (points - np.asarray(self.origin)) / np.asarray(self.spacing)

    def close_to(self, other: "Geometry", tol: float = 1e-6) -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
                and np.allclose(self.origin, other.origin, rtol=0, atol=tol))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image on a regular grid. Data is float32, shape ``(nz, ny, nx)``."""

    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.geometry.shape:
            raise ValueError(f"data shape {data.shape} does not match geometry {self.geometry.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data must be finite")
        object.__setattr__(self, "data", _frozen(data))

    def with_data(self, data) -> "Volume":
        return Volume(self.geometry, data)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Organ-ID grid (uint16, 0 = background) sharing Volume geometry."""

    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype.kind == "f" and not np.all(raw == np.round(raw)):
            raise ValueError("label data must be integral")
        if raw.size and (raw.min() < 0 or raw.max() > np.iinfo(np.uint16).max):
            raise ValueError("label IDs must fit in uint16")
        data = raw.astype(np.uint16)
        if data.shape != self.geometry.shape:
            raise ValueError(f"data shape {data.shape} does not match geometry {self.geometry.shape}")
        object.__setattr__(self, "data", _frozen(data))

    def mask(self, *ids: int) -> np.ndarray:
        return np.isin(self.data, ids)

    def labels(self) -> list[int]:
        return [int(i) for i in np.unique(self.data) if i != 0]


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement in mm, shape ``(nz, ny, nx, 3)`` with (dx, dy, dz) components."""

    geometry: Geometry
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.geometry.shape + (3,):
            raise ValueError(f"field shape {data.shape} does not match geometry {self.geometry.shape} x 3")
        if not np.all(np.isfinite(data)):
            raise ValueError("displacement field must be finite")
        object.__setattr__(self, "data", _frozen(data))

    @classmethod
    def zeros(cls, geometry: Geometry) -> "DisplacementField":
        return cls(geometry, np.zeros(geometry.shape + (3,), np.float32))


@dataclass(frozen=True)
class WindowSpec:
    mode: str  # "fixed" or "percentile"
    lo: float
    hi: float

    def __post_init__(self):
        mode = self.mode.lower()
        if mode not in ("fixed", "percentile"):
            raise ValueError(f"unknown window mode {self.mode!r}")
        if not self.lo < self.hi:
            raise ValueError(f"window needs lo < hi, got [{self.lo}, {self.hi}]")
        if mode == "percentile" and not (0 <= self.lo <= 100 and 0 <= self.hi <= 100):
            raise ValueError("percentile ranks must lie in [0, 100]")
        object.__setattr__(self, "mode", mode)

    @classmethod
    def fixed(cls, lo: float, hi: float) -> "WindowSpec":
        return cls("fixed", lo, hi)

    @classmethod
    def percentile(cls, lo: float, hi: float) -> "WindowSpec":
        return cls("percentile", lo, hi)


CT_WINDOW = WindowSpec.fixed(-1024.0, 1500.0)
CBCT_WINDOW = WindowSpec.fixed(-1024.0, 2000.0)
MRI_WINDOW = WindowSpec.percentile(10.0, 90.0)


def _check_same_geometry(a: Geometry, b: Geometry):
    if not a.close_to(b):
        raise GeometryMismatch(f"geometries differ: {a} vs {b}")


def _as_points(p) -> tuple[np.ndarray, tuple]:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    return p.reshape(-1, 3), p.shape[:-1]


def _cell(geometry: Geometry, pts: np.ndarray):
    """Lower corner index, fractional offset and in-bounds flag per point."""
    idx = geometry.to_index(pts)
    dims = np.asarray(geometry.dims)
    inside = np.all((idx >= 0) & (idx <= dims - 1), axis=1)
    # single-voxel axes only contain their one center; upper corner is clamped
    base = np.clip(np.floor(idx), 0, np.maximum(dims - 2, 0)).astype(np.int64)
    frac = np.where(dims > 1, idx - base, 0.0)
    upper = np.minimum(base + 1, dims - 1)
    return base, upper, frac, inside


def sample_with_gradient(v: Volume, points, background: float | None = None):
    """Trilinear values and their exact spatial gradient (per mm, world xyz).

    Outside the grid the value is ``background`` and the gradient zero.
    """
    if background is None:
        background = float(v.data.min())
    return trilinear_with_gradient(v.data, v.geometry, points, background)


def trilinear_with_gradient(data: np.ndarray, geometry: Geometry, points, background: float):
    """Array-level kernel of :func:`sample_with_gradient`; float64 ``data`` avoids a cast per call."""
    pts, lead = _as_points(points)
    base, upper, f, inside = _cell(geometry, pts)
    d = data.ravel()
    nx, ny = geometry.dims[0], geometry.dims[1]
    x0, x1 = base[:, 0], upper[:, 0]
    r00 = (base[:, 2] * ny + base[:, 1]) * nx
    r10 = (base[:, 2] * ny + upper[:, 1]) * nx
    r01 = (upper[:, 2] * ny + base[:, 1]) * nx
    r11 = (upper[:, 2] * ny + upper[:, 1]) * nx
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    def at(flat):
        return np.asarray(d.take(flat), dtype=np.float64)

    c000, c100 = at(r00 + x0), at(r00 + x1)
    c010, c110 = at(r10 + x0), at(r10 + x1)
    c001, c101 = at(r01 + x0), at(r01 + x1)
    c011, c111 = at(r11 + x0), at(r11 + x1)

    c00 = c000 + fx * (c100 - c000)
    c10 = c010 + fx * (c110 - c010)
    c01 = c001 + fx * (c101 - c001)
    c11 = c011 + fx * (c111 - c011)
    c0 = c00 + fy * (c10 - c00)
    c1 = c01 + fy * (c11 - c01)
    val = c0 + fz * (c1 - c0)

    # derivatives with respect to the fractional index, then per mm
    dfx = ((1 - fy) * (1 - fz) * (c100 - c000) + fy * (1 - fz) * (c110 - c010)
           + (1 - fy) * fz * (c101 - c001) + fy * fz * (c111 - c011))
    dfy = (1 - fz) * (c10 - c00) + fz * (c11 - c01)
    dfz = c1 - c0
    grad = np.empty((len(pts), 3))
    for axis, part in enumerate((dfx, dfy, dfz)):
        if geometry.dims[axis] == 1:
            grad[:, axis] = 0.0
        else:
            np.divide(part, geometry.spacing[axis], out=grad[:, axis])

    val = np.where(inside, val, background)
    grad[~inside] = 0.0
    return val.reshape(lead), grad.reshape(lead + (3,))


def sample(v: Volume, points, background: float | None = None) -> np.ndarray:
    """Trilinear interpolation at world points (array ``(..., 3)``)."""
    return sample_with_gradient(v, points, background)[0]


def trilinear_sample(v: Volume, p: Sequence[float], background: float | None = None) -> float:
    """Trilinear value at a single world point; ``background`` (default volume min) outside."""
    return float(sample(v, np.asarray(p, dtype=np.float64)[None, :], background)[0])


def sample_nearest(labels: LabelMap, points, background: int = 0) -> np.ndarray:
    pts, lead = _as_points(points)
    idx = labels.geometry.to_index(pts)
    dims = np.asarray(labels.geometry.dims)
    # round half up so that exact midpoints resolve deterministically
    near = np.floor(idx + 0.5).astype(np.int64)
    inside = np.all((near >= 0) & (near <= dims - 1), axis=1)
    near = np.clip(near, 0, dims - 1)
    out = labels.data[near[:, 2], near[:, 1], near[:, 0]]
    out = np.where(inside, out, background).astype(np.uint16)
    return out.reshape(lead)


def resample(v: Volume, target_spacing, background: float | None = None) -> Volume:
    """Resample onto a grid with the given spacing covering the same world extent.

    The new grid has ``ceil(extent / spacing)`` voxels per axis and its voxel
    block is centered on the source block.
    """
    target = tuple(float(s) for s in target_spacing)
    if not all(s > 0 for s in target):
        raise ValueError("target spacing must be positive")
    g = v.geometry
    dims = []
    origin = []
    for n, s, o, t in zip(g.dims, g.spacing, g.origin, target):
        extent = n * s
        m = max(1, math.ceil(extent / t - 1e-9))
        start = o - 0.5 * s  # world edge of the source block
        origin.append(start + 0.5 * extent - 0.5 * (m - 1) * t)
        dims.append(m)
    ng = Geometry(tuple(dims), target, tuple(origin))
    if ng.close_to(g):
        return Volume(ng, v.data)
    return Volume(ng, sample(v, ng.world_grid(), background).astype(np.float32))


def resolve_window(v: Volume | np.ndarray, w: WindowSpec) -> tuple[float, float]:
    """Intensity bounds of a window; percentiles use nearest rank over all voxels."""
    if w.mode == "fixed":
        return float(w.lo), float(w.hi)
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    flat = np.sort(data, axis=None)
    n = flat.size

    def rank(p):
        k = max(1, math.ceil(p / 100.0 * n))
        return float(flat[k - 1])

    return rank(w.lo), rank(w.hi)


def window_normalize(v: Volume, w: WindowSpec) -> Volume:
    """Clamp to the resolved window then map linearly onto [-1, 1]."""
    lo, hi = resolve_window(v, w)
    if not hi > lo:
        raise DegenerateWindow(f"resolved window [{lo}, {hi}] is empty")
    x = np.clip(v.data.astype(np.float64), lo, hi)
    out = (x - lo) * (2.0 / (hi - lo)) - 1.0
    return v.with_data(np.clip(out, -1.0, 1.0).astype(np.float32))


def warp(v: Volume | LabelMap, d: DisplacementField, background=None):
    """Backward warp: ``out(x) = v(x + d(x))``.

    Volumes use trilinear sampling, label maps nearest neighbour.
    """
    _check_same_geometry(v.geometry, d.geometry)
    pts = v.geometry.world_grid() + d.data.astype(np.float64)
    if isinstance(v, LabelMap):
        return LabelMap(v.geometry, sample_nearest(v, pts, 0 if background is None else background))
    return Volume(v.geometry, sample(v, pts, background).astype(np.float32))
