import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullscatter.cutlocus import (build_fan, first_conjugate, no_cut_certificate, null_cut_parameter,
                                  second_geodesic_search, unit_null)
from nullscatter.geodesics import trace_batch
from nullscatter.metric import bump, conformal, in_diamond, minkowski

from oracles import fan_focus

FOCUS_SEED = np.array([-0.7, -0.25, 0.0, 0.0])
FOCUS_PARAMETER = 1.4225898522040767  # Jacobi value, frozen after matching the ray-fan oracle

coord = st.floats(-0.3, 0.3, allow_nan=False)
unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda d: np.linalg.norm(d) > 0.1).map(
    lambda d: np.array(d) / np.linalg.norm(d))


@settings(max_examples=10, deadline=None)
@given(coord, coord, coord, coord, unit3)
def test_flat_and_conformally_flat_have_no_conjugate_points(t, x, y, z, omega):
    q = np.array([t, x, y, z])
    for spec in (minkowski(), conformal("0.3*sin(2*T + X1)")):
        assert first_conjugate(spec, q, unit_null(spec, q, omega[None])[0]) is None


def test_strong_bump_matches_fan_oracle():
    spec = bump(8.0, 0.15)
    v = unit_null(spec, FOCUS_SEED, [[1.0, 0, 0]])[0]
    s_jacobi = first_conjugate(spec, FOCUS_SEED, v)
    assert s_jacobi == pytest.approx(FOCUS_PARAMETER, abs=1e-8)
    s_fan = fan_focus(spec, FOCUS_SEED, v, trace_batch, half_width=2e-3, grid=100)
    assert abs(s_fan - s_jacobi) < 1e-2


def test_weak_bump_has_no_focus_inside():
    spec = bump(0.3, 0.2)
    v = unit_null(spec, FOCUS_SEED, [[1.0, 0, 0]])[0]
    assert first_conjugate(spec, FOCUS_SEED, v) is None
    assert fan_focus(spec, FOCUS_SEED, v, trace_batch, half_width=2e-3, grid=20) is None


def test_second_geodesic_search_flat_cases():
    spec = minkowski()
    q = np.zeros(4)
    omega = np.array([0.6, 0.8, 0.0])
    fan = build_fan(spec, q, 256)
    assert second_geodesic_search(spec, q, np.r_[0.3, 0.3 * omega], omega, fan=fan) is None
    # timelike-separated target: off the cone, nothing connects
    assert second_geodesic_search(spec, q, [0.3, 0.05, 0, 0], omega, fan=fan) is None
    # past targets are not reached by future geodesics
    assert second_geodesic_search(spec, q, [-0.3, 0.3, 0, 0], [1, 0, 0], fan=fan) is None


def test_cut_parameter_reports():
    flat = null_cut_parameter(minkowski(), np.zeros(4), [1.0, 1, 0, 0], cone_samples=128, n_targets=8)
    assert flat.rho is None and flat.cause == "undetected"
    spec = bump(8.0, 0.15)
    v = unit_null(spec, FOCUS_SEED, [[1.0, 0, 0]])[0]
    rep = null_cut_parameter(spec, FOCUS_SEED, v, cone_samples=256, n_targets=8)
    assert rep.cause == "conjugate"
    assert rep.rho == pytest.approx(FOCUS_PARAMETER, abs=1e-8)
    assert rep.rho < rep.s_exit


def test_certificates():
    full = no_cut_certificate(minkowski(), [[0.0, 0, 0, 0], [0.2, 0.1, 0, 0]], 8)
    assert full.certified and full.margin >= 0
    spec = bump(8.0, 0.15)

    def shell(pts):
        return in_diamond(pts) & (np.linalg.norm(np.asarray(pts)[..., 1:], axis=-1) > 0.8)

    near_r = no_cut_certificate(spec, [[-0.05, 0.9, 0, 0]], 8, region=shell, cone_samples=256, n_targets=8)
    assert near_r.certified
    focus = no_cut_certificate(spec, [FOCUS_SEED], 8, cone_samples=256, n_targets=8)
    assert not focus.certified
    assert all(f["cause"] in ("conjugate", "second_geodesic") for f in focus.failures)
    assert focus.to_dict()["samples"] == 1
