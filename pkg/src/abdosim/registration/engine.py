"""Similarity metrics with analytic gradients and a steepest-descent FFD optimizer."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import DegenerateHistogram, MetricDiverged
from ..metrics import dice
from ..volume import Geometry, LabelMap, Volume, resample, sample_nearest, trilinear_with_gradient
from .bspline import BSplineTransform

METRICS = ("MMI", "NC", "MS")


@dataclass(frozen=True)
class RegistrationConfig:
    metric: str = "MMI"
    histogram_bins: int = 50
    learning_rate: float = 1.0  # mm, largest control-point step
    max_iterations: int = 300
    grid_spacing: float = 50.0  # mm
    sampling: float | None = None  # fraction of fixed voxels, None = all
    sampling_seed: int = 0
    tolerance: float = 1e-7
    convergence_window: int = 10
    working_spacing: float | None = None  # mm; resample both images before registering
    gradient_floor: float = 1e-12  # peak control-point gradient treated as stationary

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.histogram_bins < 2:
            raise ValueError("need at least 2 histogram bins")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.grid_spacing <= 0:
            raise ValueError("grid spacing must be positive")
        if self.sampling is not None and not 0 < self.sampling <= 1:
            raise ValueError("sampling fraction must be in (0, 1]")
        if self.working_spacing is not None and self.working_spacing <= 0:
            raise ValueError("working spacing must be positive")
        if self.gradient_floor < 0:
            raise ValueError("gradient floor must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RegistrationConfig":
        return cls(**json.loads(text))


@dataclass
class RegistrationResult:
    transform: BSplineTransform
    trace: list = field(default_factory=list)  # metric of every iterate, initial first
    converged: bool = False
    diverged: bool = False
    wall_time: float = 0.0
    best_iteration: int = 0  # trace index of the returned transform

    @property
    def iterations(self) -> int:
        return max(len(self.trace) - 1, 0)

    @property
    def final_metric(self) -> float:
        """Metric of the returned transform."""
        return self.trace[self.best_iteration] if self.trace else float("nan")

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "metric"])
            for i, m in enumerate(self.trace):
                w.writerow([i, repr(float(m))])


# --------------------------------------------------------------------------
# metrics on sample vectors: each returns (value, d value / d moving sample)


def mean_squares(f: np.ndarray, m: np.ndarray):
    r = m - f
    return float(np.mean(r * r)), 2.0 * r / r.size


def normalized_correlation(f: np.ndarray, m: np.ndarray):
    a = f - f.mean()
    b = m - m.mean()
    saa, sbb, sab = float(a @ a), float(b @ b), float(a @ b)
    if saa == 0 or sbb == 0:
        return 0.0, np.zeros_like(m)
    root = np.sqrt(saa * sbb)
    value = -sab / root
    grad = -(a / root - sab * b / (np.sqrt(saa) * sbb ** 1.5))
    return value, grad


def _parzen_weights(t: np.ndarray):
    """Cubic B-spline weights of the four bins around a sample and their
    derivatives with respect to the sample's bin coordinate."""
    s = 1.0 - t
    t2 = t * t
    w = np.stack([s ** 3 / 6.0, 2.0 / 3.0 - t2 + 0.5 * t2 * t,
                  2.0 / 3.0 - s * s + 0.5 * s ** 3, t2 * t / 6.0], axis=1)
    dw = np.stack([-0.5 * s * s, 1.5 * t2 - 2.0 * t, -1.5 * t2 + t + 0.5, 0.5 * t2], axis=1)
    return w, dw


class MattesHistogram:
    """Parzen joint histogram: zero-order kernel on fixed, cubic B-spline on moving.

    Intensity ranges are fixed at construction; two bins of padding on each
    side keep the cubic kernel support inside the table.
    """

    pad = 2

    def __init__(self, fixed_range, moving_range, bins: int = 50):
        if bins < 2 * self.pad + 2:
            raise ValueError(f"MMI needs at least {2 * self.pad + 2} bins")
        self.bins = bins
        (self.f_lo, f_hi), (self.m_lo, m_hi) = fixed_range, moving_range
        if not (f_hi > self.f_lo and m_hi > self.m_lo):
            raise DegenerateHistogram("constant image cannot fill a joint histogram")
        usable = bins - 2 * self.pad - 1
        self.df = (f_hi - self.f_lo) / usable
        self.dm = (m_hi - self.m_lo) / usable

    def fixed_bins(self, f):
        idx = np.floor((f - self.f_lo) / self.df).astype(np.int64) + self.pad
        return np.clip(idx, self.pad, self.bins - self.pad - 1)

    def __call__(self, fbin: np.ndarray, m: np.ndarray):
        n = m.size
        raw = (m - self.m_lo) / self.dm + self.pad
        eta = np.clip(raw, self.pad, self.bins - self.pad - 1)
        fl = np.floor(eta)
        kappa = fl.astype(np.int64)[:, None] - 1 + np.arange(4)[None, :]
        w, dw = _parzen_weights(eta - fl)
        joint = np.zeros(self.bins * self.bins)
        flat = fbin[:, None] * self.bins + kappa
        joint += np.bincount(flat.ravel(), weights=w.ravel(), minlength=joint.size)
        p = joint.reshape(self.bins, self.bins) / n
        pf = p.sum(axis=1)
        pm = p.sum(axis=0)
        if np.count_nonzero(pf) < 2 or np.count_nonzero(pm) < 2:
            raise DegenerateHistogram("fewer than 2 occupied histogram bins")
        nz = p > 0
        outer = pf[:, None] * pm[None, :]
        mi = float(np.sum(p[nz] * np.log(p[nz] / outer[nz])))

        ratio = np.zeros_like(p)
        pm_b = np.broadcast_to(pm[None, :], p.shape)
        ratio[nz] = np.log(p[nz] / pm_b[nz])
        dmi = (dw * ratio[fbin[:, None], kappa]).sum(axis=1) / (n * self.dm)
        # clipped samples sit at a bin limit and have no gradient
        dmi[raw != eta] = 0.0
        return -mi, -dmi


# --------------------------------------------------------------------------
# registration problem


class _Problem:
    def __init__(self, fixed: Volume, moving: Volume, cfg: RegistrationConfig,
                 transform: BSplineTransform):
        self.cfg = cfg
        self.template = transform
        self.moving = moving
        self.moving_data = moving.data.astype(np.float64)
        self.background = float(moving.data.min())
        self.lo, self.hi = moving.geometry.bounds
        g = fixed.geometry
        self.geometry = g
        if cfg.sampling is None:
            self.points = g.world_grid().reshape(-1, 3)
            self.f = fixed.data.astype(np.float64).ravel()
            self.weights = transform.axis_weights(g)
            self.subset = None
        else:
            rng = np.random.default_rng(cfg.sampling_seed)
            n = max(1, int(round(cfg.sampling * g.size)))
            self.subset = np.sort(rng.choice(g.size, size=n, replace=False))
            self.points = g.world_grid().reshape(-1, 3)[self.subset]
            self.f = fixed.data.astype(np.float64).ravel()[self.subset]
            self.weights = None
        if cfg.metric == "MMI":
            self.hist = MattesHistogram((float(fixed.data.min()), float(fixed.data.max())),
                                        (self.background, float(moving.data.max())),
                                        cfg.histogram_bins)
            self.fbin = self.hist.fixed_bins(self.f)

    def displacement(self, t: BSplineTransform) -> np.ndarray:
        if self.subset is None:
            return t.displacement_on(self.geometry, self.weights).reshape(-1, 3)
        return t.displace(self.points)

    def __call__(self, coefficients: np.ndarray, need_gradient: bool = True):
        t = self.template.copy_with(coefficients)
        d = self.displacement(t)
        # samples beyond the moving grid take the border value (edge replication) so the
        # metric stays continuous when a sample leaves the image
        q = self.points + d
        qc = np.clip(q, self.lo, self.hi)
        m, grad_m = trilinear_with_gradient(self.moving_data, self.moving.geometry, qc, self.background)
        grad_m[qc != q] = 0.0
        if self.cfg.metric == "MS":
            value, dv = mean_squares(self.f, m)
        elif self.cfg.metric == "NC":
            value, dv = normalized_correlation(self.f, m)
        else:
            value, dv = self.hist(self.fbin, m)
        if not need_gradient:
            return value, None
        per_point = dv[:, None] * grad_m
        if self.subset is None:
            grid = per_point.reshape(self.geometry.shape + (3,))
            return value, t.adjoint_grid(self.geometry, grid, self.weights)
        return value, t.adjoint_points(self.points, per_point)


def metric_value_and_gradient(fixed: Volume, moving: Volume, t: BSplineTransform,
                              cfg: RegistrationConfig):
    """Metric (to be minimized) and its gradient with respect to the coefficients."""
    return _Problem(fixed, moving, cfg, t)(t.coefficients)


def register(fixed: Volume, moving: Volume, cfg: RegistrationConfig,
             initial: BSplineTransform | None = None) -> RegistrationResult:
    """Steepest descent on the B-spline coefficients.

    Each step moves the control point with the largest gradient by
    ``learning_rate`` mm and the rest proportionally. Stops after
    ``max_iterations`` or when the metric changes by less than ``tolerance``
    for ``convergence_window`` consecutive iterations, or once the largest
    control-point gradient is at most ``gradient_floor``. The returned transform
    is the iterate with the lowest metric, so the result never scores worse than
    the starting transform. A non-finite metric ends
    the run with the last finite iterate and ``diverged`` set. With
    ``working_spacing`` both images are first resampled to that isotropic
    spacing; the transform still covers the original fixed grid.
    """
    t0 = time.perf_counter()
    if cfg.working_spacing is not None:
        lo, hi = fixed.geometry.bounds
        iso = (cfg.working_spacing,) * 3
        fixed, moving = resample(fixed, iso), resample(moving, iso)
        wlo, whi = fixed.geometry.bounds
        lo, hi = np.minimum(lo, wlo), np.maximum(hi, whi)
    else:
        lo, hi = fixed.geometry.bounds
    t = initial or BSplineTransform.covering(lo, hi, cfg.grid_spacing)
    problem = _Problem(fixed, moving, cfg, t)
    c = t.coefficients.copy()
    result = RegistrationResult(t.copy_with(c))
    quiet = 0
    value, grad = problem(c)
    if not np.isfinite(value):
        raise MetricDiverged("metric is not finite at the initial transform")
    result.trace.append(float(value))
    best_c = c
    for _ in range(cfg.max_iterations):
        norms = np.linalg.norm(grad, axis=-1)
        peak = norms.max()
        if not peak > cfg.gradient_floor:
            result.converged = True
            break
        trial = c - (cfg.learning_rate / peak) * grad
        new_value, new_grad = problem(trial)
        if not (np.isfinite(new_value) and np.all(np.isfinite(new_grad))):
            result.diverged = True
            break
        quiet = quiet + 1 if abs(new_value - value) < cfg.tolerance else 0
        c, value, grad = trial, new_value, new_grad
        result.trace.append(float(value))
        if value < result.trace[result.best_iteration]:
            best_c, result.best_iteration = c, len(result.trace) - 1
        if quiet >= cfg.convergence_window:
            result.converged = True
            break
    if result.diverged:
        best_c, result.best_iteration = c, len(result.trace) - 1
    result.transform = t.copy_with(best_c)
    result.wall_time = time.perf_counter() - t0
    return result


# --------------------------------------------------------------------------
# evaluation


def ball(radius_mm: float, spacing) -> np.ndarray:
    r = [int(np.floor(radius_mm / s + 1e-9)) for s in spacing]
    zz, yy, xx = np.ogrid[-r[2]:r[2] + 1, -r[1]:r[1] + 1, -r[0]:r[0] + 1]
    d2 = (xx * spacing[0]) ** 2 + (yy * spacing[1]) ** 2 + (zz * spacing[2]) ** 2
    return d2 <= radius_mm ** 2 + 1e-9


def close_mask(m, radius_mm: float = 5.0, spacing=None):
    """Binary closing (dilate then erode) with a ball of physical radius.

    The array is padded first so structures touching the border are not eroded.
    """
    if radius_mm < 0:
        raise ValueError("radius must be non-negative")
    geometry = m.geometry if isinstance(m, LabelMap) else None
    data = np.asarray(m.data if geometry else m) != 0
    if spacing is None:
        spacing = geometry.spacing if geometry else (1.0, 1.0, 1.0)
    st = ball(radius_mm, spacing)
    if st.sum() <= 1:
        out = data.copy()
    else:
        pad = [(n // 2, n // 2) for n in st.shape]
        big = np.pad(data, pad)
        big = ndimage.binary_erosion(ndimage.binary_dilation(big, st), st)
        out = big[tuple(slice(p, p + n) for (p, _), n in zip(pad, data.shape))]
    return LabelMap(geometry, out.astype(np.uint16)) if geometry else out


def warp_mask(mask: LabelMap, t: BSplineTransform, target: Geometry) -> LabelMap:
    """Nearest-neighbour pull-back of ``mask`` onto ``target`` through ``t``."""
    pts = target.world_grid()
    d = t.displacement_on(target)
    return LabelMap(target, sample_nearest(mask, pts + d))


def evaluate_registration(result: RegistrationResult | BSplineTransform, moving_mask: LabelMap,
                          fixed_mask: LabelMap) -> tuple[float, float]:
    """(pre, post) Dice of the moving mask against the fixed mask."""
    t = result.transform if isinstance(result, RegistrationResult) else result
    pre = dice(moving_mask.data != 0, fixed_mask.data != 0) \
        if moving_mask.geometry.close_to(fixed_mask.geometry) else \
        dice(warp_mask(moving_mask, t.copy_with(np.zeros_like(t.coefficients)), fixed_mask.geometry),
             fixed_mask)
    post = dice(warp_mask(moving_mask, t, fixed_mask.geometry), fixed_mask)
    return pre, post
