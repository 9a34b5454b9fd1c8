"""Procedural abdominal phantom with an analytic respiration model.

World axes: x towards patient left, y towards posterior, z towards superior
(LPS). Organs are superellipsoids, cylinders and shells painted in a fixed
priority order; every organ is a closed-form implicit function so that any
breathing state can be evaluated exactly at ``x + d(x)``.

The respiration field is a pull-back map: the inhale label at ``x`` equals
the exhale label at ``x + d(x)``. A positive SI component therefore moves
anatomy inferiorly.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import SpecOutOfBounds
from .volume import DisplacementField, Geometry, LabelMap

# organ IDs; the tissue table is keyed by these numbers
BACKGROUND = 0
BODY = 1
LIVER = 2
LUNG_LEFT = 3
LUNG_RIGHT = 4
KIDNEY_LEFT = 5
KIDNEY_RIGHT = 6
SPLEEN = 7
SPINE = 8
RIBS = 9
AORTA = 10
STOMACH = 11
ARM_RIGHT = 12
ARM_LEFT = 13
HEPATIC_VESSELS = 14
ARMS = (ARM_RIGHT, ARM_LEFT)

ORGAN_NAMES = {
    BODY: "body", LIVER: "liver", LUNG_LEFT: "lung_left", LUNG_RIGHT: "lung_right",
    KIDNEY_LEFT: "kidney_left", KIDNEY_RIGHT: "kidney_right", SPLEEN: "spleen",
    SPINE: "spine", RIBS: "ribs", AORTA: "aorta", STOMACH: "stomach",
    ARM_RIGHT: "arm_right", ARM_LEFT: "arm_left",
    HEPATIC_VESSELS: "hepatic_vessels",
}

# superellipsoid organs that must lie entirely inside the field of view
COMPACT_ORGANS = ("liver", "spleen", "kidney_left", "kidney_right", "stomach")


@dataclass(frozen=True)
class OrganParams:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    exponent: float = 2.0
    rotation: float = 0.0  # degrees about the z axis

    def __post_init__(self):
        if min(self.radii) <= 0:
            raise ValueError(f"organ radii must be positive, got {self.radii}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))

    def half_extent(self) -> np.ndarray:
        th = math.radians(self.rotation)
        c, s = abs(math.cos(th)), abs(math.sin(th))
        rx, ry, rz = self.radii
        return np.array([rx * c + ry * s, rx * s + ry * c, rz])


def default_organs() -> dict[str, OrganParams]:
    """Nominal exhale anatomy in mm, sized for a 256 x 256 x 128 mm field of view."""
    return {
        # body and lungs: radii are in-plane semi-axes; z radius unused for the body cylinder
        "body": OrganParams((0.0, 0.0, 0.0), (82.0, 64.0, 1.0), exponent=2.2),
        "lung_left": OrganParams((42.0, 12.0, 72.0), (36.0, 42.0, 52.0)),
        "lung_right": OrganParams((-42.0, 12.0, 70.0), (38.0, 44.0, 52.0)),
        "liver": OrganParams((-30.0, -4.0, -2.0), (46.0, 40.0, 34.0), exponent=2.3, rotation=-8.0),
        "stomach": OrganParams((34.0, -28.0, 4.0), (22.0, 18.0, 24.0), rotation=20.0),
        "spleen": OrganParams((56.0, 26.0, 10.0), (15.0, 24.0, 28.0), rotation=-25.0),
        "kidney_left": OrganParams((40.0, 42.0, -26.0), (14.0, 18.0, 28.0), rotation=-20.0),
        "kidney_right": OrganParams((-42.0, 44.0, -28.0), (14.0, 18.0, 27.0), rotation=20.0),
    }


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    body_scale: float = 1.0
    organ_params: dict = field(default_factory=default_organs)
    include_arms: bool = False
    fov: tuple = ((-128.0, -128.0, -64.0), (128.0, 128.0, 64.0))
    jitter: float = 0.10

    def __post_init__(self):
        if self.body_scale <= 0:
            raise ValueError("body_scale must be positive")
        params = {k: v if isinstance(v, OrganParams) else OrganParams(**v)
                  for k, v in self.organ_params.items()}
        missing = set(default_organs()) - set(params)
        if missing:
            raise ValueError(f"organ_params missing {sorted(missing)}")
        object.__setattr__(self, "organ_params", params)
        lo, hi = (tuple(float(c) for c in corner) for corner in self.fov)
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValueError("fov must have lo < hi on every axis")
        object.__setattr__(self, "fov", (lo, hi))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["organ_params"] = {k: asdict(v) for k, v in self.organ_params.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "organ_params" in d:
            d["organ_params"] = {k: OrganParams(**{kk: tuple(vv) if isinstance(vv, list) else vv
                                                   for kk, vv in v.items()})
                                 for k, v in d["organ_params"].items()}
        if "fov" in d:
            d["fov"] = tuple(tuple(c) for c in d["fov"])
        return cls(**d)

    def realized(self) -> dict[str, OrganParams]:
        """Organ parameters after body scaling and the per-seed jitter."""
        rng = np.random.default_rng(np.random.SeedSequence([int(self.seed), 0x5EED]))
        out = {}
        for name in sorted(self.organ_params):
            p = self.organ_params[name]
            radii = np.asarray(p.radii) * rng.uniform(1 - self.jitter, 1 + self.jitter, 3)
            shift = np.asarray(p.radii) * rng.uniform(-self.jitter, self.jitter, 3)
            center = np.asarray(p.center) + shift
            if name == "body":
                center = np.asarray(p.center)
            out[name] = replace(p, center=tuple(center * self.body_scale),
                                radii=tuple(radii * self.body_scale))
        return out


@dataclass(frozen=True)
class RespirationParams:
    diaphragm_amplitude: float = 15.0  # mm, superior-inferior
    chest_expansion: float = 5.0  # mm, anterior-posterior
    phase: float = 1.0  # 0 exhale, 1 inhale

    def __post_init__(self):
        if self.diaphragm_amplitude < 0 or self.chest_expansion < 0:
            raise ValueError("respiration amplitudes must be non-negative")
        if not 0.0 <= self.phase <= 1.0:
            raise ValueError("phase must lie in [0, 1]")


def save_config(path, spec: PhantomSpec, resp: RespirationParams | None = None):
    doc = {"phantom": spec.to_dict()}
    if resp is not None:
        doc["respiration"] = asdict(resp)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_config(path) -> tuple[PhantomSpec, RespirationParams | None]:
    with open(path) as fh:
        doc = json.load(fh)
    resp = doc.get("respiration")
    return PhantomSpec.from_dict(doc["phantom"]), (RespirationParams(**resp) if resp else None)


# --------------------------------------------------------------------------
# implicit shapes


def _local(p: np.ndarray, o: OrganParams) -> np.ndarray:
    q = p - np.asarray(o.center)
    th = math.radians(o.rotation)
    c, s = math.cos(th), math.sin(th)
    x = c * q[:, 0] + s * q[:, 1]
    y = -s * q[:, 0] + c * q[:, 1]
    return np.stack([x, y, q[:, 2]], axis=1) / np.asarray(o.radii)


def _superellipsoid(p, o: OrganParams) -> np.ndarray:
    u = np.abs(_local(p, o))
    return np.sum(u ** o.exponent, axis=1) <= 1.0


def _cylinder_z(p, o: OrganParams) -> np.ndarray:
    u = np.abs(_local(p, o))
    return u[:, 0] ** o.exponent + u[:, 1] ** o.exponent <= 1.0


def _segment_tube(p, a, b, radius) -> np.ndarray:
    a = np.asarray(a, float)
    ab = np.asarray(b, float) - a
    t = np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.sum((p - closest) ** 2, axis=1) <= radius * radius


def _paint(points: np.ndarray, spec: PhantomSpec, organs: dict[str, OrganParams]) -> np.ndarray:
    p = points
    out = np.zeros(len(p), dtype=np.uint16)
    body = organs["body"]
    bx, by = body.radii[0], body.radii[1]
    s = spec.body_scale

    in_body = _cylinder_z(p, body)
    out[in_body] = BODY
    out[_superellipsoid(p, organs["lung_left"]) & in_body] = LUNG_LEFT
    out[_superellipsoid(p, organs["lung_right"]) & in_body] = LUNG_RIGHT

    liver = organs["liver"]
    in_liver = _superellipsoid(p, liver) & in_body
    out[in_liver] = LIVER
    # two portal branches radiating from the hilum, kept strictly inside the liver
    lc = np.asarray(liver.center)
    lr = np.asarray(liver.radii)
    hilum = lc + np.array([0.25, 0.2, -0.1]) * lr
    for tip in (np.array([-0.45, -0.25, 0.35]), np.array([-0.35, 0.15, -0.4])):
        vessel = _segment_tube(p, hilum, lc + tip * lr, 3.0 * s) & in_liver
        out[vessel] = HEPATIC_VESSELS

    out[_superellipsoid(p, organs["stomach"]) & in_body] = STOMACH
    out[_superellipsoid(p, organs["spleen"]) & in_body] = SPLEEN
    out[_superellipsoid(p, organs["kidney_left"]) & in_body] = KIDNEY_LEFT
    out[_superellipsoid(p, organs["kidney_right"]) & in_body] = KIDNEY_RIGHT

    bc = np.asarray(body.center)
    aorta = OrganParams((bc[0] + 0.13 * bx, bc[1] + 0.36 * by, 0.0), (9.0 * s, 9.0 * s, 1.0))
    out[_cylinder_z(p, aorta)] = AORTA
    spine = OrganParams((bc[0], bc[1] + 0.66 * by, 0.0), (14.0 * s, 13.0 * s, 1.0))
    out[_cylinder_z(p, spine)] = SPINE

    # rib cage: shell bands every 24 mm joined by two paravertebral struts
    rho = np.sqrt(((p[:, 0] - bc[0]) / bx) ** 2 + ((p[:, 1] - bc[1]) / by) ** 2)
    shell = (rho >= 0.84) & (rho <= 0.92) & (p[:, 2] > -30.0 * s)
    band = np.abs(np.mod(p[:, 2] - 6.0, 24.0 * s) - 12.0 * s) < 4.0 * s
    lateral = p[:, 1] - bc[1] > -0.55 * by
    strut = (np.abs(p[:, 0] - bc[0]) > 0.15 * bx) & (np.abs(p[:, 0] - bc[0]) < 0.4 * bx) & (p[:, 1] - bc[1] > 0)
    out[shell & ((band & lateral) | strut)] = RIBS

    if spec.include_arms:
        r = 16.0 * s
        gap = bx + 4.0 * s + r
        for side, label in ((-1.0, ARM_RIGHT), (1.0, ARM_LEFT)):
            arm = OrganParams((bc[0] + side * gap, bc[1], 0.0), (r, r * 1.1, 1.0))
            out[_cylinder_z(p, arm)] = label
    return out


def check_bounds(spec: PhantomSpec, organs: dict[str, OrganParams] | None = None):
    organs = organs or spec.realized()
    lo, hi = (np.asarray(c) for c in spec.fov)
    for name in COMPACT_ORGANS:
        o = organs[name]
        ext = o.half_extent()
        c = np.asarray(o.center)
        if np.any(c - ext < lo) or np.any(c + ext > hi):
            raise SpecOutOfBounds(f"{name} extends beyond the field of view")
    body = organs["body"]
    reach = body.radii[0] + (2 * 16.0 + 4.0) * spec.body_scale if spec.include_arms else body.radii[0]
    bc = np.asarray(body.center)
    if (bc[0] - reach < lo[0] or bc[0] + reach > hi[0]
            or bc[1] - body.radii[1] < lo[1] or bc[1] + body.radii[1] > hi[1]):
        raise SpecOutOfBounds("body cross-section extends beyond the field of view")


def label_points(spec: PhantomSpec, points, organs: dict[str, OrganParams] | None = None) -> np.ndarray:
    """Organ label at arbitrary world points ``(..., 3)``."""
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    organs = organs or spec.realized()
    return _paint(flat, spec, organs).reshape(pts.shape[:-1])


def _slicewise(grid: Geometry, fn) -> np.ndarray:
    """Evaluate ``fn(points (ny*nx, 3), z_index)`` slice by slice to bound memory."""
    nx, ny, nz = grid.dims
    yy, xx = np.meshgrid(grid.axis_coords(1), grid.axis_coords(0), indexing="ij")
    plane = np.stack([xx.ravel(), yy.ravel(), np.zeros(nx * ny)], axis=1)
    rows = []
    for k, z in enumerate(grid.axis_coords(2)):
        plane[:, 2] = z
        rows.append(fn(plane, k))
    return np.stack(rows)


def generate_phantom(spec: PhantomSpec, grid: Geometry) -> LabelMap:
    organs = spec.realized()
    check_bounds(spec, organs)
    nx, ny, _ = grid.dims
    data = _slicewise(grid, lambda pts, k: _paint(pts, spec, organs).reshape(ny, nx))
    return LabelMap(grid, data)


# --------------------------------------------------------------------------
# respiration


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class _BreathingGeometry:
    dome: float  # diaphragm level (mm)
    control: tuple[float, float, float]  # point of peak SI motion
    plateau: float  # depth below the dome with full SI motion
    fall_below: float
    fall_above: float
    env_center: tuple[float, float]
    env_radii: tuple[float, float]
    chest_front: float  # y of the anterior wall
    chest_back: float  # y where AP motion vanishes
    chest_fall: float


def breathing_geometry(spec: PhantomSpec, organs: dict[str, OrganParams] | None = None) -> _BreathingGeometry:
    organs = organs or spec.realized()
    liver = organs["liver"]
    body = organs["body"]
    s = spec.body_scale
    dome = liver.center[2] + liver.radii[2]
    bottom = liver.center[2] - liver.radii[2]
    bc = body.center
    return _BreathingGeometry(
        dome=dome,
        control=(liver.center[0], liver.center[1], dome),
        plateau=dome - bottom + 6.0 * s,
        fall_below=24.0 * s,
        fall_above=30.0 * s,
        env_center=(bc[0], bc[1] - 0.15 * body.radii[1]),
        env_radii=(0.95 * body.radii[0], 0.85 * body.radii[1]),
        chest_front=bc[1] - body.radii[1],
        chest_back=bc[1] + 0.3 * body.radii[1],
        chest_fall=36.0 * s,
    )


def _unit_fields(bg: _BreathingGeometry, p: np.ndarray):
    """SI and AP shape functions with peak value 1, each C1 in space."""
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    below = bg.dome - z
    axial = np.where(
        z >= bg.dome,
        1.0 - _smoothstep((z - bg.dome) / bg.fall_above),
        1.0 - _smoothstep((below - bg.plateau) / bg.fall_below),
    )
    rho = np.sqrt(((x - bg.env_center[0]) / bg.env_radii[0]) ** 2
                  + ((y - bg.env_center[1]) / bg.env_radii[1]) ** 2)
    inplane = 1.0 - _smoothstep((rho - 0.6) / 0.5)
    si = axial * inplane

    ramp = _smoothstep((bg.chest_back - y) / (bg.chest_back - bg.chest_front))
    thorax = 1.0 - _smoothstep((bg.dome - z) / bg.chest_fall)
    ap = ramp * thorax
    return si, ap


def respiration_displacement(spec: PhantomSpec, p: RespirationParams, points,
                             organs: dict[str, OrganParams] | None = None) -> np.ndarray:
    """Exact pull-back displacement (mm, xyz) at world points ``(..., 3)``."""
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    bg = breathing_geometry(spec, organs)
    si, ap = _unit_fields(bg, flat)
    out = np.zeros_like(flat)
    # phase is applied last so that field(t) == t * field(1) holds exactly
    out[:, 2] = p.phase * (p.diaphragm_amplitude * si)
    out[:, 1] = p.phase * (-p.chest_expansion * ap)
    return out.reshape(pts.shape)


def respiration_field(spec: PhantomSpec, p: RespirationParams, grid: Geometry) -> DisplacementField:
    organs = spec.realized()
    nx, ny, _ = grid.dims
    data = _slicewise(grid, lambda pts, k: respiration_displacement(spec, p, pts, organs).reshape(ny, nx, 3))
    return DisplacementField(grid, data)


def phantom_state(spec: PhantomSpec, p: RespirationParams, grid: Geometry) -> LabelMap:
    """Labels of the breathing state ``p``, evaluated analytically at ``x + d(x)``."""
    if p.phase == 0.0:
        return generate_phantom(spec, grid)
    organs = spec.realized()
    check_bounds(spec, organs)
    nx, ny, _ = grid.dims

    def slab(pts, k):
        # the field is rounded to float32 like the exported DisplacementField
        d = respiration_displacement(spec, p, pts, organs).astype(np.float32)
        return _paint(pts + d, spec, organs).reshape(ny, nx)

    return LabelMap(grid, _slicewise(grid, slab))


def organ_ids() -> Iterable[int]:
    return sorted(ORGAN_NAMES)
