import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullscatter.boundary import PatchSpec, boundary_generators
from nullscatter.errors import InputError, ScheduleError
from nullscatter.layers import (FlatArrival, Frontier, LayerConfig, corner_from_meshes, covering_radius,
                                interior_sample, normal_null_congruence, plan_step, plan_step1, sweep)
from nullscatter.metric import conformal, in_diamond, minkowski
from nullscatter.sampling import fibonacci_sphere

unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda d: np.linalg.norm(d) > 0.1).map(
    lambda d: np.array(d) / np.linalg.norm(d))
levels = st.floats(0.0, 0.45)


def test_boundary_generator_examples():
    plus = boundary_generators("S+", [1.0, 0, 0])
    assert np.allclose(plus(0.4), [[0.4, 0.6, 0, 0]])
    minus = boundary_generators("S-", [0.0, 2.0, 0])
    assert np.allclose(minus([-0.25, -0.5]), [[-0.25, 0, 0.75, 0], [-0.5, 0, 0.5, 0]])
    assert plus.t_range == (0.0, 1.0) and minus.t_range == (-1.0, 0.0)
    with pytest.raises(InputError):
        boundary_generators("R", [1.0, 0, 0])
    with pytest.raises(InputError):
        PatchSpec("S+", (1.0, 0, 0), 0.3, (-0.1, 0.5))


@settings(max_examples=50, deadline=None)
@given(levels, levels, unit3)
def test_corner_has_requested_levels(lam_p, lam_m, direction):
    arrival = FlatArrival()
    point = arrival.corner(lam_p, lam_m, direction)
    assert arrival.lam_plus(point)[0] == pytest.approx(lam_p, abs=1e-12)
    assert arrival.lam_minus(point)[0] == pytest.approx(lam_m, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(0.05, 0.6), unit3, unit3)
def test_cap_arrival_times(t, radius, direction, other):
    arrival = FlatArrival()
    point = np.r_[t, radius * direction][None]
    # over its own generator a point arrives at its level
    assert arrival.tau_plus(point, direction[None])[0, 0] == pytest.approx(arrival.lam_plus(point)[0], abs=1e-12)
    assert arrival.tau_minus(point, direction[None])[0, 0] == pytest.approx(-arrival.lam_minus(point)[0],
                                                                              abs=1e-12)
    # widening the cap can only bring the S+ arrival earlier
    narrow = arrival.tau_plus(point, other[None], 0.1)[0, 0]
    wide = arrival.tau_plus(point, other[None], 0.5)[0, 0]
    assert wide <= narrow + 1e-12
    assert wide >= arrival.lam_plus(point)[0] - 1e-12


def test_inward_mesh_lies_on_its_level_set():
    for spec in (minkowski(), conformal("0.3*sin(2*T + X1)")):
        level = 0.2
        mesh = normal_null_congruence(spec, "S-", level, rays=64, layers=12)
        arrival = FlatArrival()
        pts = np.concatenate([mesh.vertices[i, :mesh.valid_layers[i]] for i in range(len(mesh.directions))])
        # the congruence sweeps the cone t + |X| = 1 - 2 level until it focuses on the axis
        assert np.max(np.abs(arrival.lam_minus(pts) - level)) < 1e-8
        assert np.all(in_diamond(pts, -1e-9))
        assert mesh.valid_layers.max() < len(mesh.s_grid)
        assert not mesh.truncated
        assert np.max(mesh.normal_residual) < 1e-12


def test_outward_mesh_is_truncated():
    mesh = normal_null_congruence(minkowski(), "S-", 0.2, orientation="outward", rays=32, layers=8)
    assert mesh.truncated


def test_step_two_corner_from_meshes():
    spec = minkowski()
    gens = fibonacci_sphere(16)
    frontier = Frontier(FlatArrival(), gens, covering_radius(gens), 0.2, 0.5, 0.5)
    axis = np.array([1.0, 0, 0])
    point, count, resid = corner_from_meshes(spec, frontier, 0.2, 0.2, axis, rays=256, layers=24)
    # past-inward from (0.2, 0.8 e1) meets the S-(0.2) congruence at (0, 0.6 e1)
    assert np.linalg.norm(point - [0, 0.6, 0, 0]) < 1e-6
    assert count == 1 and resid < 1e-8


def test_schedule_errors():
    spec = minkowski()
    with pytest.raises(ScheduleError, match="empty frontier"):
        plan_step(spec, 2, None)
    cfg = LayerConfig(generators=128, target=0.5, step=0.25)
    tasks, frontier = plan_step1(spec, 0.5, cfg)
    assert {t.scheme for t in tasks} == {1} and len(tasks) == 128
    with pytest.raises(ScheduleError, match="positive"):
        plan_step(spec, 2, frontier, increment=0.0)
    with pytest.raises(InputError):
        plan_step(spec, 5, frontier)
    with pytest.raises(ScheduleError, match="delta too small"):
        plan_step1(spec, 1e-4, cfg)
    with pytest.raises(ScheduleError):
        plan_step1(spec, 0.0, cfg)


def test_generations_advance_and_chain():
    spec = minkowski()
    cfg = LayerConfig(generators=128, target=0.5, step=0.25)
    tasks, frontier = plan_step1(spec, 0.5, cfg)
    step2 = plan_step(spec, 2, frontier)
    step3 = plan_step(spec, 3, frontier)
    step4 = plan_step(spec, 4, frontier)
    # T1 shrinks below the requested step until every probed diamond fits its ball
    width = frontier.width
    assert 0 < width <= 0.25
    assert frontier.plus_levels == pytest.approx([width, 2 * width])
    assert frontier.minus_levels == pytest.approx([width, 2 * width])
    assert {t.scheme for t in step2} == {2} and {t.scheme for t in step3} == {3}
    assert {t.scheme for t in step4} == {4} and len(step4) == 128
    first_ids = {t.task_id for t in tasks}
    assert all(set(t.predecessors) == first_ids for t in step2)
    # scheme 2 corner over each generator sits at the previous S+ level
    for t in step2:
        assert FlatArrival().lam_plus(t.p0)[0] == pytest.approx(width)
    assert plan_step(spec, 4, frontier) == []
    while plan_step(spec, 2, frontier):
        pass
    assert frontier.plus_levels[-1] == pytest.approx(0.5)
    assert np.all(np.diff(frontier.plus_levels) > 0)


def test_small_sweep_covers_its_sample():
    spec = minkowski()
    cfg = LayerConfig(generators=128, target=0.25, coverage_samples=2000, mesh_checks=1)
    rng = np.random.default_rng(0)
    sample = interior_sample(FlatArrival(), cfg.target, cfg.coverage_samples, rng)
    res = sweep(spec, cfg, 0.125, 0.5, sample, certify=False)
    assert res.coverage == 1.0
    assert res.failed == 0
    assert res.overlap == 0.0
    assert res.mesh_checks and res.mesh_checks[0]["corner_error"] < 1e-6
    assert res.to_dict()["tasks_by_scheme"][1] == 128
