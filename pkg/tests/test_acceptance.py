"""Desk-scale acceptance checks; each test records one PASS/FAIL line."""
import time

import numpy as np
import pytest

from nullscatter.boundary import BoundaryLightVector
from nullscatter.config import Sampling
from nullscatter.cutlocus import first_conjugate, unit_null
from nullscatter.geodesics import relative_drift, trace_batch
from nullscatter.harness import demo_tuples, diamond_points, forward_observation_set, synthesize_dump
from nullscatter.layers import FlatArrival, LayerConfig, run_pipeline
from nullscatter.metric import bump, conformal, minkowski, null_vector
from nullscatter.oracle import RelationOracle, RelationTuple, lens_batch
from nullscatter.reconstruction import (DirectionSet, chart_build, conformal_recover, coordinate_jacobian,
                                        earliest_observation_time, normalized_form_distance, point_recovery,
                                        reconstruct_all, tangents_at)
from nullscatter.sampling import fibonacci_sphere

from oracles import fan_focus, minkowski_lens, polyline_hausdorff
from regular_part_study import classify_regular_part

GAMMA = "0.3*sin(2*T + X1) + 0.2*X2*X3"
W0 = np.array([1 / 3 + 1 / np.sqrt(3), 1 / 3 - 1 / np.sqrt(3), 1 / 3])


def random_seeds(rng, count, half=0.3):
    pts = rng.uniform(-half, half, size=(count, 4))
    dirs = rng.normal(size=(count, 3))
    return pts, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def rescaled(t: RelationTuple, factors) -> RelationTuple:
    vecs = [BoundaryLightVector(v.p, f * v.w, v.side) for v, f in zip((t.v0, *t.sources), factors)]
    return RelationTuple(*vecs)


def test_criterion_01_geodesic_fidelity(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    drift, line_err = 0.0, 0.0
    for spec in (minkowski(), bump(0.3, 0.2)):
        pts, dirs = random_seeds(rng, 100)
        vecs = null_vector(spec, pts, dirs)
        for q, v, tr in zip(pts, vecs, trace_batch(spec, pts, vecs)):
            drift = max(drift, float(relative_drift(spec, tr.solution.y).max()))
            if spec.name == "minkowski":
                s = np.linspace(0, tr.s_end, 50)
                line_err = max(line_err, float(np.max(np.abs(tr.position(s) - (q + np.outer(s, v))))))
    elapsed = time.perf_counter() - start
    ok = drift <= 1e-9 and line_err <= 1e-10 and elapsed < 10
    criterion(1, ok, f"drift {drift:.1e}, line error {line_err:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_02_lens_closed_form(criterion):
    spec = minkowski()
    start = time.perf_counter()
    example = lens_batch(spec, [BoundaryLightVector([-0.5, 0.5, 0, 0], [1, -1, 0, 0], "S-")])[0]
    example_err = max(np.abs(example.p - [0.5, -0.5, 0, 0]).max(), np.abs(example.ray - [1, -1, 0, 0]).max())
    rng = np.random.default_rng(2)
    vecs = []
    while len(vecs) < 1000:
        t0 = rng.uniform(-0.9, -0.1)
        a, omega = rng.normal(size=3), rng.normal(size=3)
        a, omega = a / np.linalg.norm(a), omega / np.linalg.norm(omega)
        if omega @ a > -0.05:
            continue
        vecs.append(BoundaryLightVector(np.r_[t0, (1 + t0) * a], np.r_[1.0, omega], "S-"))
    images = lens_batch(spec, vecs)
    err = 0.0
    for v, img in zip(vecs, images):
        point, ray = minkowski_lens(v.p, v.w)
        err = max(err, float(np.abs(img.p - point).max()), float(np.abs(img.ray - ray).max()))
    elapsed = time.perf_counter() - start
    ok = example_err <= 1e-8 and err <= 1e-8 and elapsed < 5
    criterion(2, ok, f"example {example_err:.1e}, 1000 random {err:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_03_relation_oracle(criterion):
    spec = minkowski()
    oracle = RelationOracle(spec)
    member, no_span, displaced = oracle.evaluate(demo_tuples())
    worked = (member.verdict and np.allclose(member.coefficients, [0.91068, -0.24402, 0.33333], atol=1e-5)
              and not no_span.verdict and not displaced.verdict)
    rng = np.random.default_rng(3)
    dump = synthesize_dump(spec, diamond_points(2, rng, 0.3), Sampling(observations=40, decoys=10), seed=3,
                           library=False)
    yes = [t for t in dump.tuples if t.verdict][:85]
    no = [t for t in dump.tuples if not t.verdict][:15]
    picks = yes + no
    again = oracle.evaluate([rescaled(t, rng.uniform(1e-2, 1e2, size=4)) for t in picks])
    flips = sum(a.verdict != b.verdict for a, b in zip(picks, again))
    ok = worked and len(picks) == 100 and len(no) > 0 and flips == 0
    criterion(3, ok, f"worked tuples {'ok' if worked else 'wrong'}, {flips} flips over {len(picks)} "
                     f"rescaled tuples ({len(no)} non-members)")
    assert ok


def test_criterion_04_conformal_invariance(criterion):
    base, scaled = minkowski(), conformal(GAMMA)
    rng = np.random.default_rng(4)
    dump = synthesize_dump(base, diamond_points(2, rng, 0.3), Sampling(observations=40, decoys=10), seed=4,
                           library=False)
    picks = [t for t in dump.tuples if t.verdict][:85] + [t for t in dump.tuples if not t.verdict][:15]
    again = RelationOracle(scaled).evaluate(picks)
    flips = sum(a.verdict != b.verdict for a, b in zip(picks, again))

    pts, dirs = random_seeds(rng, 20)
    image_gap = 0.0
    for ta, tb in zip(trace_batch(base, pts, null_vector(base, pts, dirs)),
                      trace_batch(scaled, pts, null_vector(scaled, pts, dirs))):
        image_gap = max(image_gap, polyline_hausdorff(ta.samples(400)[1], tb.samples(400)[1]))

    fit_gap = 0.0
    for q in diamond_points(20, rng, 0.3):
        forms = []
        for spec in (base, scaled):
            dset = forward_observation_set(spec, q, [1.0, 0, 0], np.pi, 30)
            forms.append(conformal_recover(tangents_at(spec, dset, q)).form)
        fit_gap = max(fit_gap, normalized_form_distance(*forms))
    ok = flips == 0 and len(picks) == 100 and image_gap <= 1e-5 and fit_gap <= 1e-3
    criterion(4, ok, f"{flips} verdict flips / {len(picks)}, image Hausdorff {image_gap:.1e}, "
                     f"fit distance {fit_gap:.1e} at 20 points")
    assert ok


def test_criterion_05_conjugate_points(criterion):
    start = time.perf_counter()
    spec = bump(8.0, 0.15)
    q = np.array([-0.7, -0.25, 0.0, 0.0])
    v = unit_null(spec, q, [[1.0, 0, 0]])[0]
    s_jacobi = first_conjugate(spec, q, v)
    s_fan = fan_focus(spec, q, v, trace_batch, half_width=2e-3, grid=100)
    flat = first_conjugate(minkowski(), np.zeros(4), [1.0, 0.6, 0.8, 0])
    elapsed = time.perf_counter() - start
    ok = (s_jacobi is not None and s_fan is not None and abs(s_jacobi - s_fan) <= 1e-2 and flat is None
          and elapsed < 60)
    criterion(5, ok, f"Jacobi {s_jacobi:.6f}, 10^4-ray fan {s_fan:.6f}, Minkowski {flat}, {elapsed:.0f} s")
    assert ok


def test_criterion_06_blind_round_trip(criterion):
    start = time.perf_counter()
    spec = minkowski()
    sampling = Sampling()
    pts = diamond_points(50, np.random.default_rng(6), 0.4)
    dump = synthesize_dump(spec, pts, sampling, seed=6)
    members = [t for t in dump.tuples if t.verdict]
    res = reconstruct_all(members, sampling)
    worst, hits, hard = 0.0, set(), 0
    for rs in res.sets:
        est = point_recovery(spec, rs.regular).point
        dist = np.linalg.norm(pts - est, axis=1)
        k = int(np.argmin(dist))
        hits.add(k)
        worst = max(worst, float(dist[k]))
        hard += len(rs.regular.keys() - rs.earliest.keys())
        # every earliest member lies on the light cone of its true point, up to the member tolerance
        eps = 3 * rs.candidate.grid_scale()
        for v in rs.earliest:
            ray = v.ray / np.linalg.norm(v.ray)
            offset = pts[k] - v.p
            hard += np.linalg.norm(offset - (offset @ ray) * ray) > eps
    elapsed = time.perf_counter() - start
    ok = len(res.sets) == 50 and len(hits) == 50 and worst <= 1e-4 and hard == 0 and elapsed < 600
    criterion(6, ok, f"{len(res.sets)} sets for {len(hits)}/50 points, max error {worst:.1e}, "
                     f"{hard} hard violations, {elapsed:.0f} s")
    assert ok


def test_criterion_07_regular_part(criterion):
    study = classify_regular_part()
    rate = study["misclassified"] / study["total"]
    ok = rate <= 0.02
    criterion(7, ok, f"misclassified {study['misclassified']}/{study['total']} = {100 * rate:.2f}% "
                     f"({study['post_kept']} post-cut kept, {study['pre_dropped']} pre-cut dropped)")
    assert ok


def _exit_direction(q, omega):
    """Spatial direction of the flat null ray from q that exits on the generator omega."""
    t_exit = FlatArrival().tau_plus(q[None], omega[None])[0, 0]
    chord = (1 - t_exit) * omega - q[1:]
    return chord / np.linalg.norm(chord)


def _generator_curve(omega):
    def mu(s):
        s = np.atleast_1d(s)
        return np.column_stack([0.5 + s, np.outer(0.5 - s, omega)])
    return mu


def test_criterion_08_charts(criterion):
    spec = minkowski()
    omegas = [np.eye(3)[0], np.eye(3)[1], np.eye(3)[2], -np.eye(3)[0], -np.eye(3)[1]]
    curves = [_generator_curve(w) for w in omegas]
    ranges = [(-0.45, 0.45)] * len(omegas)
    ratios = []
    for q in diamond_points(10, np.random.default_rng(8), 0.3):
        axes = [_exit_direction(q, w) for w in omegas]

        def set_at(x):
            members = []
            for axis in axes:
                members += forward_observation_set(spec, x, axis, 0.25, 120).members
            return DirectionSet(members)

        jac = coordinate_jacobian(set_at, q, curves, ranges)
        chart = chart_build(jac, curves, q)
        ratios.append(chart.sigma_ratio if np.linalg.matrix_rank(chart.jacobian) == 4 else 0.0)
    example_err = 0.0
    for delta in (1e-2, 1e-3):
        dset = forward_observation_set(spec, [delta, 0, 0, 0], [1.0, 0, 0], 0.3, 400)
        s = earliest_observation_time(dset, curves[0], (-0.2, 0.2))
        example_err = max(example_err, abs(s - delta / 2))
    ok = min(ratios) > 1e-4 and example_err <= 1e-4
    criterion(8, ok, f"min sigma ratio {min(ratios):.3f} over 10 charts, x^mu example error {example_err:.1e}")
    assert ok


def test_criterion_09_conformal_recovery(criterion):
    worst = {}
    for name, spec in (("minkowski", minkowski()), ("bump", bump(0.3, 0.2))):
        gap = 0.0
        for q in diamond_points(10, np.random.default_rng(9), 0.3):
            dset = forward_observation_set(spec, q, [1.0, 0, 0], np.pi, 30)
            fit = conformal_recover(tangents_at(spec, dset, q))
            g, _ = spec.metric_matrices(q[None])
            gap = max(gap, normalized_form_distance(fit.form, g[0]))
        worst[name] = gap
    ok = worst["minkowski"] <= 1e-3 and worst["bump"] <= 1e-2
    criterion(9, ok, f"normalized Frobenius distance: Minkowski {worst['minkowski']:.1e}, "
                     f"bump {worst['bump']:.1e}")
    assert ok


def test_criterion_10_layer_coverage(criterion):
    start = time.perf_counter()
    report = run_pipeline(minkowski(), LayerConfig(target=0.5))
    elapsed = time.perf_counter() - start
    ok = report.stabilized and report.coverage > 0.999 and elapsed < 1800
    criterion(10, ok, f"coverage {report.coverage:.4f}, stabilized {report.stabilized} at step "
                      f"{report.accepted_step}, {len(report.history)} sweeps, {elapsed:.0f} s")
    assert ok
