import itertools

import numpy as np
import pytest
from scipy import ndimage

from abdosim import phantom as ph
from abdosim.errors import SpecOutOfBounds
from abdosim.metrics import dice
from abdosim.volume import Geometry, warp

DESK = Geometry.centered((128, 128, 64), (2.0, 2.0, 2.0))
COARSE = Geometry.centered((64, 64, 32), (4.0, 4.0, 4.0))


@pytest.fixture(scope="module")
def exhale():
    return ph.generate_phantom(ph.PhantomSpec(seed=3), DESK)


def test_generate_is_deterministic():
    spec = ph.PhantomSpec(seed=11)
    a = ph.generate_phantom(spec, COARSE)
    b = ph.generate_phantom(spec, COARSE)
    np.testing.assert_array_equal(a.data, b.data)


def test_contains_required_organs(exhale):
    present = set(exhale.labels())
    required = {ph.BODY, ph.LIVER, ph.LUNG_LEFT, ph.LUNG_RIGHT, ph.KIDNEY_LEFT, ph.KIDNEY_RIGHT,
                ph.SPLEEN, ph.SPINE, ph.RIBS, ph.AORTA, ph.STOMACH}
    assert required <= present
    assert not present & set(ph.ARMS)


def test_organs_are_connected(exhale):
    full = np.ones((3, 3, 3))
    for organ in exhale.labels():
        _, n = ndimage.label(exhale.data == organ, structure=full)
        assert n == 1, ph.ORGAN_NAMES[organ]


def test_arms_flag_is_isolated():
    a = ph.generate_phantom(ph.PhantomSpec(seed=5, include_arms=False), COARSE)
    b = ph.generate_phantom(ph.PhantomSpec(seed=5, include_arms=True), COARSE)
    differ = a.data != b.data
    assert differ.any()
    assert np.all(np.isin(b.data[differ], ph.ARMS))
    assert np.all(a.data[differ] == ph.BACKGROUND)


def test_seeds_give_distinct_livers():
    livers = [ph.generate_phantom(ph.PhantomSpec(seed=s), COARSE).data == ph.LIVER for s in range(56)]
    worst = max(dice(a, b) for a, b in itertools.combinations(livers, 2))
    assert worst < 0.999


def test_out_of_fov_organ_raises():
    organs = ph.default_organs()
    organs["liver"] = ph.OrganParams((-30.0, -4.0, 50.0), (46.0, 40.0, 34.0))
    with pytest.raises(SpecOutOfBounds):
        ph.generate_phantom(ph.PhantomSpec(organ_params=organs), COARSE)
    with pytest.raises(SpecOutOfBounds):
        ph.generate_phantom(ph.PhantomSpec(body_scale=1.6), COARSE)


def test_spec_validation():
    with pytest.raises(ValueError):
        ph.OrganParams((0, 0, 0), (1, 0, 1))
    with pytest.raises(ValueError):
        ph.RespirationParams(phase=1.5)
    with pytest.raises(ValueError):
        ph.RespirationParams(diaphragm_amplitude=-1)


def test_config_roundtrip(tmp_path):
    spec = ph.PhantomSpec(seed=9, include_arms=True, body_scale=0.95)
    resp = ph.RespirationParams(12.0, 4.0, 0.5)
    path = tmp_path / "phantom.json"
    ph.save_config(path, spec, resp)
    spec2, resp2 = ph.load_config(path)
    assert spec2 == spec
    assert resp2 == resp


def test_phase_zero_field_is_zero():
    f = ph.respiration_field(ph.PhantomSpec(), ph.RespirationParams(20, 5, 0.0), COARSE)
    assert np.all(f.data == 0)


def test_peak_si_displacement_at_diaphragm():
    spec = ph.PhantomSpec(seed=2)
    resp = ph.RespirationParams(20.0, 5.0, 1.0)
    control = ph.breathing_geometry(spec).control
    d = ph.respiration_displacement(spec, resp, np.asarray(control))
    assert abs(d[2]) == pytest.approx(20.0, abs=1e-3)
    f = ph.respiration_field(spec, resp, DESK)
    assert np.abs(f.data[..., 2]).max() <= 20.0 + 1e-3


def test_field_is_linear_in_phase_and_amplitude():
    spec = ph.PhantomSpec(seed=4)
    pts = COARSE.world_grid()
    one = ph.respiration_displacement(spec, ph.RespirationParams(15, 5, 1.0), pts)
    for t in (0.25, 0.5, 0.8):
        ft = ph.respiration_displacement(spec, ph.RespirationParams(15, 5, t), pts)
        np.testing.assert_array_equal(ft, t * one)
    one = ph.respiration_field(spec, ph.RespirationParams(15, 5, 1.0), COARSE).data
    dbl = ph.respiration_field(spec, ph.RespirationParams(30, 5, 1.0), COARSE).data
    np.testing.assert_array_equal(dbl[..., 2], 2 * one[..., 2])


def test_field_is_c1():
    # finite-difference derivative is continuous: second differences stay bounded
    spec = ph.PhantomSpec(seed=1)
    resp = ph.RespirationParams(15, 5, 1.0)
    z = np.linspace(-64, 64, 4001)
    pts = np.stack([np.full_like(z, -30.0), np.full_like(z, -4.0), z], axis=1)
    d = ph.respiration_displacement(spec, resp, pts)
    h = z[1] - z[0]
    for comp in (1, 2):
        slope = np.diff(d[:, comp]) / h
        assert np.max(np.abs(np.diff(slope))) < 0.01


def test_phase_zero_state_equals_exhale():
    spec = ph.PhantomSpec(seed=6)
    a = ph.phantom_state(spec, ph.RespirationParams(15, 5, 0.0), COARSE)
    np.testing.assert_array_equal(a.data, ph.generate_phantom(spec, COARSE).data)


def _centroid_z(mask, grid):
    return grid.axis_coords(2)[np.nonzero(mask)[0]].mean()


def test_inhale_liver_moves_inferior_and_keeps_volume(exhale):
    spec = ph.PhantomSpec(seed=3)
    inhale = ph.phantom_state(spec, ph.RespirationParams(15, 5, 1.0), DESK)
    le, li = exhale.data == ph.LIVER, inhale.data == ph.LIVER
    assert _centroid_z(li, DESK) < _centroid_z(le, DESK)
    assert abs(li.sum() / le.sum() - 1) < 0.05
    _, n = ndimage.label(li, structure=np.ones((3, 3, 3)))
    assert n == 1


def test_exported_field_reproduces_inhale_state(exhale):
    spec = ph.PhantomSpec(seed=3)
    resp = ph.RespirationParams(15, 5, 1.0)
    inhale = ph.phantom_state(spec, resp, DESK)
    field = ph.respiration_field(spec, resp, DESK)
    warped = warp(exhale, field)
    assert dice(warped.data == ph.LIVER, inhale.data == ph.LIVER) >= 0.95
