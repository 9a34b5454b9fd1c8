import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abdosim import rvol
from abdosim.errors import DegenerateWindow, GeometryMismatch, RvolFormatError
from abdosim.volume import (
    CT_WINDOW,
    DisplacementField,
    Geometry,
    LabelMap,
    Volume,
    WindowSpec,
    resample,
    resolve_window,
    sample,
    trilinear_sample,
    warp,
    window_normalize,
)


def ramp_volume(dims=(8, 6, 5), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), coef=(1.5, -2.0, 0.75), c0=3.0):
    g = Geometry(dims, spacing, origin)
    p = g.world_grid()
    return Volume(g, p @ np.asarray(coef) + c0), np.asarray(coef), c0


def test_geometry_validation():
    with pytest.raises(ValueError):
        Geometry((0, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        Geometry((1, 1, 1), (1, 0, 1))
    g = Geometry((4, 3, 2), (1, 2, 3))
    assert g.shape == (2, 3, 4)
    assert g.size == 24


def test_volume_rejects_nonfinite():
    g = Geometry((2, 2, 2), (1, 1, 1))
    data = np.zeros(g.shape)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Volume(g, data)


def test_sample_at_voxel_center_is_exact():
    rng = np.random.default_rng(0)
    g = Geometry((5, 4, 3), (0.7, 1.3, 2.0), (-3.0, 1.0, 10.0))
    v = Volume(g, rng.normal(size=g.shape))
    pts = g.world_grid()
    np.testing.assert_array_equal(sample(v, pts).astype(np.float32), v.data)


def test_sample_midpoint_is_average():
    g = Geometry((2, 1, 1), (1, 1, 1))
    v = Volume(g, np.array([[[0.0, 10.0]]]))
    assert trilinear_sample(v, (0.5, 0.0, 0.0)) == pytest.approx(5.0)


def test_sample_outside_returns_min_by_default():
    g = Geometry((3, 3, 3), (1, 1, 1))
    data = np.full(g.shape, 40.0)
    data[1, 1, 1] = -1024
    v = Volume(g, data)
    assert trilinear_sample(v, (1e3, 0, 0)) == -1024
    assert trilinear_sample(v, (-50, 1, 1), background=7.0) == 7.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 3), st.integers(0, 2))
def test_sample_linear_along_axis(t, i, axis):
    rng = np.random.default_rng(1)
    g = Geometry((5, 4, 3), (1.0, 2.0, 0.5))
    v = Volume(g, rng.normal(size=g.shape))
    i = min(i, g.dims[axis] - 2)
    a = np.array([1.0, 1.0, 1.0]) * np.asarray(g.spacing)
    p0 = np.asarray(g.origin) + a
    p0[axis] = g.origin[axis] + i * g.spacing[axis]
    p1 = p0.copy()
    p1[axis] += g.spacing[axis]
    pt = p0 + t * (p1 - p0)
    expect = (1 - t) * trilinear_sample(v, p0) + t * trilinear_sample(v, p1)
    assert trilinear_sample(v, pt) == pytest.approx(expect, abs=1e-5)


def test_resample_identity():
    v, _, _ = ramp_volume()
    out = resample(v, v.geometry.spacing)
    assert out.geometry.close_to(v.geometry)
    np.testing.assert_array_equal(out.data, v.data)


@pytest.mark.parametrize("spacing", [(2, 2, 2), (0.7, 1.9, 3.1), (0.5, 0.5, 0.5)])
def test_resample_constant(spacing):
    g = Geometry((9, 7, 5), (1, 1, 1))
    v = Volume(g, np.full(g.shape, -12.5))
    out = resample(v, spacing)
    np.testing.assert_allclose(out.data, -12.5)
    again = resample(out, spacing)
    np.testing.assert_allclose(again.data, -12.5)


def test_resample_ramp_matches_closed_form():
    v, coef, c0 = ramp_volume(dims=(16, 12, 10))
    out = resample(v, (2, 2, 2))
    assert out.geometry.dims == (8, 6, 5)
    expect = out.geometry.world_grid() @ coef + c0
    np.testing.assert_allclose(out.data, expect, atol=1e-5)
    # same world extent
    np.testing.assert_allclose(out.geometry.extent, v.geometry.extent)


def test_resample_dims_use_ceil():
    g = Geometry((9, 9, 9), (1, 1, 1))
    out = resample(Volume(g, np.zeros(g.shape)), (2, 2, 4))
    assert out.geometry.dims == (5, 5, 3)


def test_window_ct_endpoints():
    g = Geometry((3, 1, 1), (1, 1, 1))
    v = Volume(g, np.array([[[-1024.0, 1500.0, 238.0]]]))
    out = window_normalize(v, CT_WINDOW)
    assert out.data[0, 0, 0] == -1.0
    assert out.data[0, 0, 1] == 1.0
    assert out.data[0, 0, 2] == pytest.approx(0.0, abs=1e-7)


def test_window_clamps():
    g = Geometry((4, 1, 1), (1, 1, 1))
    v = Volume(g, np.array([[[-3000.0, 5000.0, 0.0, 1.0]]]))
    out = window_normalize(v, CT_WINDOW)
    assert out.data.min() == -1.0 and out.data.max() == 1.0


def test_window_percentile_nearest_rank():
    g = Geometry((10, 1, 1), (1, 1, 1))
    v = Volume(g, np.arange(1.0, 11.0)[None, None, :])
    assert resolve_window(v, WindowSpec.percentile(10, 90)) == (1.0, 9.0)
    out = window_normalize(v, WindowSpec.percentile(10, 90))
    assert out.data[0, 0, 0] == -1.0 and out.data[0, 0, 8] == 1.0 and out.data[0, 0, 9] == 1.0


def test_window_degenerate():
    g = Geometry((4, 1, 1), (1, 1, 1))
    v = Volume(g, np.full(g.shape, 5.0))
    with pytest.raises(DegenerateWindow):
        window_normalize(v, WindowSpec.percentile(10, 90))


def test_window_spec_validation():
    with pytest.raises(ValueError):
        WindowSpec.fixed(1, 1)
    with pytest.raises(ValueError):
        WindowSpec.percentile(-1, 50)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=40))
def test_window_output_in_range_and_monotone(values):
    g = Geometry((len(values), 1, 1), (1, 1, 1))
    v = Volume(g, np.asarray(values)[None, None, :])
    out = window_normalize(v, CT_WINDOW).data.ravel()
    assert out.min() >= -1 and out.max() <= 1
    src = np.clip(np.asarray(values, dtype=np.float32), -1024, 1500)
    order = np.argsort(src)
    assert np.all(np.diff(out[order]) >= 0)


def test_warp_zero_field_identity():
    rng = np.random.default_rng(3)
    g = Geometry((6, 5, 4), (1.0, 1.5, 2.0), (1, 2, 3))
    v = Volume(g, rng.normal(size=g.shape))
    lab = LabelMap(g, rng.integers(0, 5, size=g.shape))
    zero = DisplacementField.zeros(g)
    np.testing.assert_array_equal(warp(v, zero).data, v.data)
    np.testing.assert_array_equal(warp(lab, zero).data, lab.data)


def test_warp_integer_shift():
    rng = np.random.default_rng(4)
    g = Geometry((8, 6, 5), (2.0, 1.0, 1.0))
    v = Volume(g, rng.normal(size=g.shape))
    lab = LabelMap(g, rng.integers(0, 9, size=g.shape))
    field = np.zeros(g.shape + (3,))
    field[..., 0] = 2.0
    d = DisplacementField(g, field)
    np.testing.assert_allclose(warp(v, d).data[:, :, :-1], v.data[:, :, 1:], atol=1e-6)
    np.testing.assert_array_equal(warp(lab, d).data[:, :, :-1], lab.data[:, :, 1:])


def test_warp_sinusoid_on_ramp_matches_composition():
    v, coef, c0 = ramp_volume(dims=(40, 40, 30), spacing=(1.0, 1.0, 1.0))
    g = v.geometry
    p = g.world_grid()
    field = np.zeros(g.shape + (3,))
    field[..., 0] = 2.5 * np.sin(2 * np.pi * p[..., 1] / 17.0)
    field[..., 2] = 1.5 * np.cos(2 * np.pi * p[..., 0] / 13.0)
    d = DisplacementField(g, field)
    out = warp(v, d)
    expect = (p + d.data) @ coef + c0
    interior = (slice(3, -3), slice(3, -3), slice(4, -4))
    np.testing.assert_allclose(out.data[interior], expect[interior], atol=1e-4)


def test_warp_geometry_mismatch():
    g = Geometry((4, 4, 4), (1, 1, 1))
    h = Geometry((4, 4, 4), (2, 1, 1))
    with pytest.raises(GeometryMismatch):
        warp(Volume(g, np.zeros(g.shape)), DisplacementField.zeros(h))


@pytest.mark.parametrize("kind", ["scalar", "label", "field3"])
def test_rvol_roundtrip(tmp_path, kind):
    rng = np.random.default_rng(5)
    g = Geometry((5, 4, 3), (0.486, 0.486, 2.0), (-10.5, 3.25, 0.0))
    obj = {
        "scalar": Volume(g, rng.normal(size=g.shape)),
        "label": LabelMap(g, rng.integers(0, 60000, size=g.shape)),
        "field3": DisplacementField(g, rng.normal(size=g.shape + (3,))),
    }[kind]
    path = tmp_path / "x.rvol"
    rvol.write(path, obj)
    back = rvol.read(path)
    assert type(back) is type(obj)
    assert back.geometry == g
    np.testing.assert_array_equal(back.data, obj.data)


def test_rvol_bit_layout():
    g = Geometry((2, 1, 1), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    buf = rvol.to_bytes(Volume(g, np.array([[[1.0, -2.0]]])))
    header, payload = buf.split(b"\n", 1)
    assert header == (b'{"magic":"RVOL1","kind":"scalar","dims":[2,1,1],'
                      b'"spacing":[1.0,1.0,1.0],"origin":[0.0,0.0,0.0]}')
    assert payload == np.array([1.0, -2.0], dtype="<f4").tobytes()
    fbuf = rvol.to_bytes(DisplacementField(g, np.arange(6.0).reshape(1, 1, 2, 3)))
    assert fbuf.split(b"\n", 1)[1] == np.arange(6.0, dtype="<f4").tobytes()


def test_rvol_rejects_unknown_magic():
    g = Geometry((1, 1, 1), (1, 1, 1))
    buf = rvol.to_bytes(Volume(g, np.zeros(g.shape))).replace(b"RVOL1", b"RVOL9")
    with pytest.raises(RvolFormatError):
        rvol.from_bytes(buf)
    with pytest.raises(RvolFormatError):
        rvol.from_bytes(b"no header")
