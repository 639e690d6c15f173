import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nullscatter.errors import DegenerateVectorError, InputError, MetricSignatureError
from nullscatter.metric import (MetricSpec, boundary_defining, bump, causal_classify, christoffel_symbols,
                                conformal, evaluate_metric, flat, inner, locate, minkowski, null_vector,
                                parse_metric, sharp)

coord = st.floats(-0.3, 0.3, allow_nan=False)
interior_point = st.tuples(coord, coord, coord, coord).map(np.array)
vector = st.tuples(*[st.floats(-2, 2, allow_nan=False)] * 4).map(np.array)

METRICS = {
    "minkowski": minkowski(),
    "bump": bump(0.1, 1.0),
    "strong_bump": bump(8.0, 0.15),
    "conformal": conformal("0.2*sin(T + X1) + 0.1*X2**2"),
}


def test_minkowski_at_sample_point():
    ev = evaluate_metric(minkowski(), [0.0, 0.2, 0.0, 0.0])
    assert np.array_equal(ev.g, np.diag([-1.0, 1, 1, 1]))
    assert np.array_equal(ev.christoffel, np.zeros((4, 4, 4)))


def test_zero_conformal_factor_is_minkowski():
    ev = evaluate_metric(conformal("0*T"), [0.1, 0.2, -0.1, 0.0])
    assert np.allclose(ev.g, np.diag([-1.0, 1, 1, 1]), atol=0)
    assert np.allclose(ev.christoffel, 0.0, atol=0)


@pytest.mark.parametrize("name", sorted(METRICS))
def test_christoffel_matches_finite_differences(name):
    spec = METRICS[name]
    pts = np.array([[0.0, 0.0, 0.0, 0.0], [0.1, 0.05, -0.02, 0.03], [-0.2, 0.2, 0.1, -0.1]])
    analytic = christoffel_symbols(spec, pts)
    from nullscatter.metric import metric_derivative_tensor

    db, dk = spec.fd_derivatives(pts, 1e-4, 4)
    dg = np.zeros((len(pts), 4, 4, 4))
    dg[:, :, 0, 0] = -db
    dg[:, :, 1:, 1:] = dk
    numeric = christoffel_symbols(spec, pts, dg)
    assert np.max(np.abs(analytic - numeric)) < 1e-6
    assert metric_derivative_tensor(spec, pts).shape == (3, 4, 4, 4)


def test_bump_christoffel_off_centre():
    spec = bump(0.1, 1.0)
    gam = evaluate_metric(spec, [0.0, 0.3, 0.0, 0.0]).christoffel
    # kappa = f I with f = 1 + 0.1 exp(-x^2): Gamma^1_11 = f'/(2f)
    f = 1 + 0.1 * np.exp(-0.09)
    fp = -2 * 0.3 * 0.1 * np.exp(-0.09)
    assert gam[1, 1, 1] == pytest.approx(fp / (2 * f), abs=1e-14)
    assert gam[1, 2, 2] == pytest.approx(-fp / (2 * f), abs=1e-14)
    assert gam[0].max() == 0.0


@settings(max_examples=50, deadline=None)
@given(interior_point, vector)
def test_flat_sharp_roundtrip(point, v):
    for spec in METRICS.values():
        back = sharp(spec, point, flat(spec, point, v))
        assert np.allclose(back, v, rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(interior_point, st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda d: np.linalg.norm(d) > 1e-3))
def test_conformal_rescale_keeps_null_cone(point, direction):
    base, scaled = minkowski(), METRICS["conformal"]
    v = null_vector(base, point, np.array(direction))
    assert abs(inner(scaled, point, v, v)[0]) < 1e-12 * (v @ v)
    assert causal_classify(scaled, point, v)[0] == "null"


def test_causal_examples():
    spec = minkowski()
    assert causal_classify(spec, np.zeros(4), [1, 1, 0, 0]) == ("null", "future")
    assert causal_classify(spec, np.zeros(4), [1, 0, 0, 0]) == ("timelike", "future")
    assert causal_classify(spec, np.zeros(4), [0, 1, 0, 0]) == ("spacelike", "neither")
    assert causal_classify(spec, np.zeros(4), [-1, 1, 0, 0]) == ("null", "past")
    with pytest.raises(DegenerateVectorError):
        causal_classify(spec, np.zeros(4), [0, 0, 0, 0])


def test_boundary_defining_examples():
    fp, fm = boundary_defining([0.4, 0.6, 0, 0])
    # f_minus = -T + |X| - 1 = -0.8 here
    assert (fp, fm) == pytest.approx((0.0, -0.8), abs=1e-15)
    assert locate([0.4, 0.6, 0, 0]) == "S+"
    assert boundary_defining(np.zeros(4)) == (-1.0, -1.0)
    assert locate(np.zeros(4)) == "interior"
    assert locate([-0.4, 0.6, 0, 0]) == "S-"
    assert locate([0.0, 1.0, 0, 0]) == "R"
    assert locate([1.0, 0, 0, 0]) == "i+"
    assert locate([0.0, 2.0, 0, 0]) == "exterior"


def test_signature_violation_reported():
    bad = MetricSpec(beta=lambda t, x: -np.ones_like(t),
                     kappa=lambda t, x: np.broadcast_to(np.eye(3), (len(t), 3, 3)))
    with pytest.raises(MetricSignatureError):
        evaluate_metric(bad, np.zeros(4))


def test_outside_chart_rejected():
    with pytest.raises(InputError):
        evaluate_metric(minkowski(), [1.5, 0, 0, 0])


def test_parse_metric():
    assert parse_metric("minkowski").name == "minkowski"
    assert parse_metric("bump:8,0.15").params == {"amplitude": 8.0, "width": 0.15}
    assert parse_metric("conformal:0.1*T").conformally_flat
    for text in ("bump:1", "conformal:", "conformal:0.1*W", "nonsense"):
        with pytest.raises(InputError):
            parse_metric(text)
