"""Cubic B-spline free-form deformation on a regular control-point grid."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ..errors import OutOfSupport
from ..volume import DisplacementField, Geometry


def bspline3(t):
    """Centered cubic B-spline kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    inner = t < 1
    outer = (t >= 1) & (t < 2)
    out[inner] = 2.0 / 3.0 - t[inner] ** 2 + 0.5 * t[inner] ** 3
    out[outer] = (2.0 - t[outer]) ** 3 / 6.0
    return out


def bspline3_derivative(t):
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    s = np.sign(t)
    out = np.zeros_like(t)
    inner = a < 1
    outer = (a >= 1) & (a < 2)
    out[inner] = s[inner] * (-2.0 * a[inner] + 1.5 * a[inner] ** 2)
    out[outer] = -s[outer] * 0.5 * (2.0 - a[outer]) ** 2
    return out


def _basis(frac: np.ndarray) -> np.ndarray:
    """The four uniform cubic weights for control points floor(u)-1 .. floor(u)+2."""
    t = frac
    w0 = (1 - t) ** 3 / 6.0
    w1 = (3 * t ** 3 - 6 * t ** 2 + 4) / 6.0
    w2 = (-3 * t ** 3 + 3 * t ** 2 + 3 * t + 1) / 6.0
    w3 = t ** 3 / 6.0
    return np.stack([w0, w1, w2, w3], axis=-1)


@dataclass(eq=False)
class BSplineTransform:
    """Displacement ``d(x) = sum_k beta3(u - k) c_k`` with ``u = (x - origin) / spacing``.

    ``coefficients`` has shape ``(cz, cy, cx, 3)`` and holds mm displacements
    in world xyz order; ``grid_dims`` is ``(cx, cy, cz)``.
    """

    grid_spacing: float
    grid_origin: tuple
    grid_dims: tuple
    coefficients: np.ndarray

    def __post_init__(self):
        if self.grid_spacing <= 0:
            raise ValueError("grid spacing must be positive")
        self.grid_origin = tuple(float(o) for o in self.grid_origin)
        self.grid_dims = tuple(int(n) for n in self.grid_dims)
        if min(self.grid_dims) < 4:
            raise ValueError("need at least 4 control points per axis")
        c = np.asarray(self.coefficients, dtype=np.float64)
        if c.shape != self.grid_dims[::-1] + (3,):
            raise ValueError(f"coefficients must have shape {self.grid_dims[::-1] + (3,)}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        self.coefficients = c

    @classmethod
    def covering(cls, lo, hi, spacing: float) -> "BSplineTransform":
        """Identity transform supported on the box ``[lo, hi]`` (world xyz, mm)."""
        origin = tuple(float(a) - spacing for a in lo)
        dims = tuple(int(math.floor((b - a) / spacing + 1e-9)) + 4 for a, b in zip(lo, hi))
        return cls(spacing, origin, dims, np.zeros(dims[::-1] + (3,)))

    @classmethod
    def for_geometry(cls, g: Geometry, spacing: float) -> "BSplineTransform":
        """Identity transform whose support covers the voxel centers of ``g``."""
        lo, hi = g.bounds
        return cls.covering(lo, hi, spacing)

    @property
    def n_parameters(self) -> int:
        return self.coefficients.size

    def copy_with(self, coefficients) -> "BSplineTransform":
        return BSplineTransform(self.grid_spacing, self.grid_origin, self.grid_dims, coefficients)

    # ---------------------------------------------------------------- points

    def _locate(self, pts: np.ndarray):
        u = (pts - np.asarray(self.grid_origin)) / self.grid_spacing
        fl = np.floor(u)
        start = fl.astype(np.int64) - 1
        ok = np.all((start >= 0) & (start + 3 <= np.asarray(self.grid_dims) - 1), axis=1)
        return start, u - fl, ok

    def displace(self, points) -> np.ndarray:
        """Displacement at world points ``(..., 3)``; raises OutOfSupport outside."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        start, frac, ok = self._locate(flat)
        if not ok.all():
            raise OutOfSupport("point outside the B-spline support")
        wx, wy, wz = (_basis(frac[:, a]) for a in range(3))
        c = self.coefficients
        out = np.zeros_like(flat)
        for k in range(4):
            for j in range(4):
                wkj = wz[:, k] * wy[:, j]
                for i in range(4):
                    out += (wkj * wx[:, i])[:, None] * c[start[:, 2] + k, start[:, 1] + j, start[:, 0] + i]
        return out.reshape(pts.shape)

    def adjoint_points(self, points, g: np.ndarray) -> np.ndarray:
        """Coefficient gradient ``sum_n dd(x_n)/dc * g_n`` for per-point vectors ``g``."""
        start, frac, ok = self._locate(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if not ok.all():
            raise OutOfSupport("point outside the B-spline support")
        g = np.asarray(g, dtype=np.float64).reshape(-1, 3)
        wx, wy, wz = (_basis(frac[:, a]) for a in range(3))
        cx, cy, cz = self.grid_dims
        out = np.zeros((cz * cy * cx, 3))
        for k in range(4):
            for j in range(4):
                wkj = wz[:, k] * wy[:, j]
                for i in range(4):
                    flat = ((start[:, 2] + k) * cy + start[:, 1] + j) * cx + start[:, 0] + i
                    w = wkj * wx[:, i]
                    for c in range(3):
                        out[:, c] += np.bincount(flat, weights=w * g[:, c], minlength=out.shape[0])
        return out.reshape(self.coefficients.shape)

    # ---------------------------------------------------------------- grids

    def axis_weights(self, g: Geometry) -> list[np.ndarray]:
        """Dense per-axis weight matrices ``(n_voxels_axis, n_controls_axis)`` for grid ``g``."""
        mats = []
        for axis in range(3):
            x = g.axis_coords(axis)
            u = (x - self.grid_origin[axis]) / self.grid_spacing
            fl = np.floor(u)
            start = fl.astype(np.int64) - 1
            if start.min() < 0 or start.max() + 3 > self.grid_dims[axis] - 1:
                raise OutOfSupport("grid extends beyond the B-spline support")
            w = _basis(u - fl)
            m = np.zeros((len(x), self.grid_dims[axis]))
            rows = np.arange(len(x))
            for i in range(4):
                m[rows, start + i] = w[:, i]
            mats.append(m)
        return mats

    def displacement_on(self, g: Geometry, weights=None) -> np.ndarray:
        """Displacement on every voxel of ``g``, shape ``(nz, ny, nx, 3)``."""
        wx, wy, wz = weights or self.axis_weights(g)
        nz, ny = wz.shape[0], wy.shape[0]
        cx = self.grid_dims[0]
        # separable contraction z, y, x; tensordot/matmul route through BLAS
        t = np.tensordot(wz, self.coefficients, axes=(1, 0))
        t = np.matmul(wy, t.reshape(nz, wy.shape[1], -1)).reshape(nz, ny, cx, 3)
        t = np.tensordot(t, wx, axes=(2, 1))
        return np.ascontiguousarray(t.transpose(0, 1, 3, 2))

    def adjoint_grid(self, g: Geometry, grad: np.ndarray, weights=None) -> np.ndarray:
        wx, wy, wz = weights or self.axis_weights(g)
        nz, ny = wz.shape[0], wy.shape[0]
        cy, cx = self.grid_dims[1], self.grid_dims[0]
        t = np.tensordot(grad, wx, axes=(2, 0))
        t = np.matmul(wy.T, t.reshape(nz, ny, -1)).reshape(nz, cy, 3, cx)
        t = np.tensordot(wz, t, axes=(0, 0))
        return np.ascontiguousarray(t.transpose(0, 1, 3, 2))

    def field(self, g: Geometry) -> DisplacementField:
        return DisplacementField(g, self.displacement_on(g).astype(np.float32))

    # ---------------------------------------------------------------- io

    def to_dict(self) -> dict:
        return {"grid_spacing": self.grid_spacing, "grid_origin": list(self.grid_origin),
                "grid_dims": list(self.grid_dims), "coefficients": self.coefficients.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "BSplineTransform":
        return cls(d["grid_spacing"], d["grid_origin"], d["grid_dims"], np.asarray(d["coefficients"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "BSplineTransform":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def bspline_displace(t: BSplineTransform, p) -> np.ndarray:
    return t.displace(p)
