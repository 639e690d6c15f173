import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullscatter.boundary import BoundaryLightVector
from nullscatter.config import Sampling
from nullscatter.errors import (DegenerateCurveFamily, InsufficientData, LibraryRequired, OutsideRange,
                                RadicalDegenerateScreen, UnderdeterminedFit)
from nullscatter.harness import diamond_points, forward_observation_set, synthesize_dump, synthesize_point
from nullscatter.metric import minkowski
from nullscatter.oracle import RelationOracle
from nullscatter.reconstruction import (DirectionSet, candidate_cone, chart_build, conformal_recover,
                                        coordinate_jacobian, earliest_observation_time, earliest_part,
                                        normalized_form_distance, point_recovery, reconstruct_all,
                                        regular_part, screen_to_ray, smooth_part, tangency_order)
from nullscatter.sampling import fibonacci_cap, fibonacci_sphere

from oracles import minkowski_hit_plus

ETA = np.diag([-1.0, 1, 1, 1])


def flat_set(q, directions, label=None) -> DirectionSet:
    """Closed-form Minkowski observation set of q along the given spatial directions."""
    q = np.asarray(q, dtype=float)
    out = []
    for omega in np.atleast_2d(directions):
        omega = omega / np.linalg.norm(omega)
        vec = np.r_[1.0, omega]
        _, hit = minkowski_hit_plus(q, vec)
        out.append(BoundaryLightVector(hit, vec, "S+"))
    return DirectionSet(out, label=label)


def arrival(q, omega):
    """Closed-form arrival time on the generator omega of the cone of (0, x)."""
    dot = q[1:] @ omega
    return (1 - 2 * dot + q[1:] @ q[1:]) / (2 * (1 - dot))


def cap(axis, angle, count):
    return np.vstack([np.asarray(axis, dtype=float)[None], fibonacci_cap(axis, angle, count)])


def curve_along(direction):
    direction = np.asarray(direction, dtype=float)

    def mu(s):
        s = np.atleast_1d(s)
        return np.column_stack([0.5 + s, np.outer(0.5 - s, direction)])
    return mu


# ---------------------------------------------------------------- set operations

def test_earliest_part_keeps_first_arrival_on_a_generator():
    early = BoundaryLightVector([0.4, 0.6, 0, 0], [1, 1, 0, 0], "S+")
    late = BoundaryLightVector([0.6, 0.4, 0, 0], [1, 1, 0, 0], "S+")
    kept = earliest_part(DirectionSet([early, late]))
    assert len(kept) == 1 and kept.members[0].p[0] == pytest.approx(0.4)


def test_earliest_part_leaves_a_light_cone_alone():
    cone = flat_set([0.1, 0.2, 0, 0], fibonacci_sphere(300))
    assert len(earliest_part(cone)) == len(cone)


def test_earliest_part_resolves_two_overlapping_cones():
    dirs = fibonacci_sphere(400)
    a, b = np.array([0.0, 0.15, 0, 0]), np.array([0.0, -0.15, 0, 0])
    both = DirectionSet(list(flat_set(a, dirs)) + list(flat_set(b, dirs)))
    kept = earliest_part(both, generator_tol=0.2)
    # each kept point is on the earlier sheet of its generator (up to the slope allowance)
    for v in kept:
        omega = v.p[1:] / np.linalg.norm(v.p[1:])
        t_a, t_b = arrival(a, omega), arrival(b, omega)
        assert v.p[0] <= max(t_a, t_b) + 1e-9
        assert v.p[0] <= min(t_a, t_b) + 0.2 + 1e-6
    assert len(kept) < len(both)


def test_smooth_part_on_a_cone_and_on_sparse_input():
    cone = flat_set([0.1, 0.2, -0.1, 0], fibonacci_sphere(2000))
    smooth, diag = smooth_part(cone)
    assert len(smooth) == len(cone) and not diag
    tiny, diag = smooth_part(cone.subset(np.arange(5)))
    assert len(tiny) == 0 and all("neighbours" in d for d in diag.values())


def test_smooth_part_rejects_a_crease():
    dirs = fibonacci_sphere(1500)
    a, b = np.array([0.0, 0.2, 0, 0]), np.array([0.0, -0.2, 0, 0])
    sheet_a = [v for v in flat_set(a, dirs) if v.p[1] > 0]
    sheet_b = [v for v in flat_set(b, dirs) if v.p[1] <= 0]
    creased = DirectionSet(sheet_a + sheet_b)
    smooth, diag = smooth_part(creased)
    assert diag
    rejected = np.array([creased.members[i].p for i in diag])
    # the fold sits on the plane X1 = 0
    assert np.median(np.abs(rejected[:, 1])) < 0.15
    far = [v for v in smooth if abs(v.p[1]) > 0.3]
    assert len(far) == sum(1 for v in creased if abs(v.p[1]) > 0.3)


def test_candidate_cone_sampling_diagnostic():
    sparse = flat_set(np.zeros(4), fibonacci_sphere(5))
    out, note = candidate_cone([sparse])
    assert len(out) == 0 and note == "insufficient sampling"
    dense = flat_set([0.1, 0.2, 0, 0], cap([0.0, 0, 1], 0.35, 199))
    out, note = candidate_cone([dense.subset(np.arange(100)), dense.subset(np.arange(100, 200))])
    assert note == "" and len(out) == 200
    # a single generator curve is not a 2-sheet
    line = DirectionSet([BoundaryLightVector([t, 1 - t, 0, 0], [1, 1, 0, 0], "S+")
                         for t in np.linspace(0.3, 0.7, 30)])
    out, note = candidate_cone([line])
    assert note == "insufficient sampling"


# ---------------------------------------------------------------- tangency

def test_null_separated_cones_touch_with_order():
    axis = np.array([1.0, 0, 0])
    q_eps = -0.05 * np.array([1.0, 1, 0, 0])
    later = flat_set(np.zeros(4), cap(axis, 0.4, 300))
    earlier = flat_set(q_eps, cap(axis, 0.4, 300))
    p = np.array([0.5, 0.5, 0, 0])
    rec = tangency_order(earlier, later, p)
    assert rec.tangential and rec.method == "ray"
    assert rec.ordering == "<"
    assert tangency_order(later, earlier, p).ordering == ">"
    same = tangency_order(later, later, p)
    assert same.tangential and same.ordering == "incomparable"


def test_spacelike_separated_cones_cross():
    a, b = np.array([0.0, 0.1, 0, 0]), np.array([0.0, -0.1, 0, 0])
    # common point on S+: X = r e2 with r = 0.495, T = 0.505
    p = np.array([0.505, 0.0, 0.495, 0])
    axis = np.array([0.0, 1, 0])
    set_a = DirectionSet(list(flat_set(a, cap(axis, 0.3, 300))) + list(flat_set(a, [p[1:] - a[1:]])))
    set_b = DirectionSet(list(flat_set(b, cap(axis, 0.3, 300))) + list(flat_set(b, [p[1:] - b[1:]])))
    rec = tangency_order(set_a, set_b, p)
    assert not rec.tangential and rec.ordering == "incomparable" and rec.angle > 0.1
    with pytest.raises(InsufficientData):
        tangency_order(set_a, set_b, [0.5, -0.5, 0, 0])


def test_regular_part_needs_a_touching_library_set():
    axis = np.array([1.0, 0, 0])
    cone = flat_set(np.zeros(4), cap(axis, 0.4, 300))
    with pytest.raises(LibraryRequired):
        regular_part(cone, [])
    touching = flat_set(-0.05 * np.array([1.0, 1, 0, 0]), cap(axis, 0.4, 300))
    reg, diag = regular_part(cone, [touching])
    assert len(reg) == 1 and np.allclose(reg.members[0].p, [0.5, 0.5, 0, 0])
    assert len(diag) == len(cone) - 1
    elsewhere = flat_set([0.0, 0, 0.3, 0], cap(-axis, 0.4, 100))
    reg, diag = regular_part(cone, [elsewhere])
    assert len(reg) == 0 and set(diag.values()) == {"no earlier tangential library set"}


# ---------------------------------------------------------------- ground-truth audits

@settings(max_examples=10, deadline=None)
@given(st.tuples(*[st.floats(-0.3, 0.3)] * 4))
def test_point_recovery_of_flat_cones(q):
    q = np.array(q)
    est = point_recovery(minkowski(), flat_set(q, fibonacci_sphere(40)))
    assert np.linalg.norm(est.point - q) < 1e-6 and not est.ill_posed


def test_point_recovery_single_ray_is_ill_posed():
    est = point_recovery(minkowski(), flat_set(np.zeros(4), [[1.0, 0, 0]]))
    assert est.ill_posed
    with pytest.raises(InsufficientData):
        point_recovery(minkowski(), DirectionSet())


@pytest.mark.parametrize("delta", [0.0, 1e-2, 1e-3])
def test_earliest_observation_time_on_a_generator(delta):
    axis = np.array([1.0, 0, 0])
    dset = flat_set([delta, 0, 0, 0], cap(axis, 0.3, 400))
    s = earliest_observation_time(dset, curve_along(axis), (-0.2, 0.2))
    assert s == pytest.approx(delta / 2, abs=1e-9)


def test_earliest_observation_time_outside_range():
    axis = np.array([1.0, 0, 0])
    dset = flat_set(np.zeros(4), cap(axis, 0.3, 400))
    with pytest.raises(OutsideRange):
        earliest_observation_time(dset, curve_along(-axis), (-0.2, 0.2))
    with pytest.raises(InsufficientData):
        earliest_observation_time(dset.subset(np.arange(3)), curve_along(axis), (-0.2, 0.2))


def test_chart_from_four_generators():
    omegas = [np.eye(3)[0], np.eye(3)[1], np.eye(3)[2], -np.eye(3)[0]]
    dirs = np.vstack([cap(w, 0.3, 250) for w in omegas])

    def set_at(q):
        return flat_set(q, dirs)

    curves = [curve_along(w) for w in omegas]
    jac = coordinate_jacobian(set_at, np.zeros(4), curves, [(-0.2, 0.2)] * 4)
    # closed form at the origin: dT = (dt - omega . dx) / 2
    expected = np.array([np.r_[0.5, -w / 2] for w in omegas])
    # central differences with step 1e-3 carry an O(1e-6) truncation error
    assert np.allclose(jac, expected, atol=1e-5)
    chart = chart_build(jac, curves, np.zeros(4))
    assert np.linalg.matrix_rank(chart.jacobian) == 4 and chart.sigma_ratio > 1e-4
    with pytest.raises(DegenerateCurveFamily):
        chart_build(np.tile(expected[0], (4, 1)), curves, np.zeros(4))
    with pytest.raises(DegenerateCurveFamily):
        chart_build(expected[:3], curves[:3], np.zeros(4))


# ---------------------------------------------------------------- conformal class

def test_conformal_fit_recovers_minkowski():
    rays = np.column_stack([np.ones(12), fibonacci_sphere(12)])
    fit = conformal_recover(rays)
    assert fit.residual < 1e-3 and fit.rank == 9
    assert normalized_form_distance(fit.form, ETA) < 1e-10
    with pytest.raises(UnderdeterminedFit):
        conformal_recover(rays[:8])


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10.0))
def test_conformal_fit_ignores_positive_factor(scale):
    rays = np.column_stack([np.ones(12), fibonacci_sphere(12)])
    assert normalized_form_distance(conformal_recover(rays).form, scale * ETA) < 1e-10


def test_screen_to_ray_examples():
    p = [0.4, 0.6, 0, 0]
    ray = screen_to_ray(ETA, p, [[0, 0, 1, 0], [0, 0, 0, 1]])
    assert np.allclose(ray, [1, 1, 0, 0], atol=1e-12)
    with pytest.raises(RadicalDegenerateScreen):
        screen_to_ray(ETA, p, [[1, -1, 0, 0], [0, 0, 1, 0]])
    with pytest.raises(RadicalDegenerateScreen):
        screen_to_ray(ETA, p, [[1, 0, 0, 0], [0, 0, 1, 0]])
    # tilted screen: null r = (1, a, 0, 1 + a) solves to a = 0 off the generator
    ray = screen_to_ray(ETA, p, [[0, 0, 1, 0], [1, -1, 0, 1]])
    assert np.allclose(ray, [1, 0, 0, 1], atol=1e-12)


# ---------------------------------------------------------------- end to end

def test_reconstruct_nothing():
    out = reconstruct_all([])
    assert out.sets == [] and out.merged == 0


@pytest.fixture(scope="module")
def small_dump():
    pts = diamond_points(2, np.random.default_rng(11), 0.25)
    sampling = Sampling(observations=60)
    return pts, sampling, synthesize_dump(minkowski(), pts, sampling, seed=5)


def test_round_trip_stage_inclusions(small_dump):
    pts, sampling, dump = small_dump
    res = reconstruct_all(dump.tuples, sampling)
    assert res.sets
    spec = minkowski()
    for rs in res.sets:
        assert rs.regular.keys() <= rs.smooth.keys() <= rs.earliest.keys() <= rs.candidate.keys()
        est = point_recovery(spec, rs.regular)
        nearest = np.min(np.linalg.norm(pts - est.point, axis=1))
        assert nearest < 1e-6
    # every planted point is recovered exactly once
    recovered = [point_recovery(spec, rs.regular).point for rs in res.sets]
    for q in pts:
        assert sum(np.linalg.norm(r - q) < 1e-6 for r in recovered) == 1


def test_duplicate_groups_are_merged():
    spec = minkowski()
    q = np.array([0.05, 0.1, -0.1, 0.0])
    sampling = Sampling(observations=60)
    rng = np.random.default_rng(2)
    obs_axis = np.array([0.0, 0.6, 0.8])
    # two disjoint source clusters observed through the same rays meet at one point
    plans = [synthesize_point(spec, q, sampling, rng, obs_axis=obs_axis, src_axis=axis)
             for axis in ([-1.0, 0, 0], [0.0, 0, -1])]
    tuples = RelationOracle(spec).evaluate([t for p in plans for t in p.tuples])
    res = reconstruct_all(tuples, sampling)
    assert res.merged >= 1
    recovered = [point_recovery(spec, rs.regular).point for rs in res.sets]
    assert sum(np.linalg.norm(r - q) < 1e-6 for r in recovered) == 1


def test_forward_observation_set_matches_closed_form():
    axis = np.array([0.0, 0, 1])
    traced = forward_observation_set(minkowski(), [0.1, 0, 0.1, 0], axis, 0.3, 50)
    exact = flat_set([0.1, 0, 0.1, 0], fibonacci_cap(axis, 0.3, 50))
    assert traced.hausdorff(exact) < 1e-9
