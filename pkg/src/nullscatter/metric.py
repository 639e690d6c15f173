"""Lorentzian metric g = -beta dT^2 + kappa on the diamond chart.

Points are arrays with last axis (T, X1, X2, X3).  All coefficient
callables are vectorized over a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import json
import numpy as np

from .errors import DegenerateVectorError, InputError, MetricSignatureError

DEFAULT_NULL_TOL = 1e-10
BOUNDARY_TOL = 1e-10


def _as_batch(points) -> tuple[np.ndarray, bool]:
    arr = np.asarray(points, dtype=float)
    single = arr.ndim == 1
    return np.atleast_2d(arr), single


@dataclass(frozen=True)
class MetricSpec:
    """User metric in the form -beta dT^2 + kappa.

    ``beta(T, X)`` maps shapes (N,), (N,3) to (N,); ``kappa`` to (N,3,3).
    Optional ``dbeta``/``dkappa`` return derivatives with respect to
    (T, X1, X2, X3) of shapes (N,4) and (N,4,3,3).  Without them central
    differences of order ``fd_order`` and step ``fd_step`` are used.
    """

    beta: Callable
    kappa: Callable
    dbeta: Optional[Callable] = None
    dkappa: Optional[Callable] = None
    name: str = "custom"
    fd_step: float = 1e-5
    fd_order: int = 4
    conformally_flat: bool = False
    params: dict = field(default_factory=dict)

    @property
    def analytic(self) -> bool:
        return self.dbeta is not None and self.dkappa is not None

    def coefficients(self, points):
        pts, _ = _as_batch(points)
        beta = np.asarray(self.beta(pts[:, 0], pts[:, 1:]), dtype=float)
        beta = np.broadcast_to(beta, pts.shape[:1]).copy()
        kappa = np.asarray(self.kappa(pts[:, 0], pts[:, 1:]), dtype=float)
        kappa = np.broadcast_to(kappa, (pts.shape[0], 3, 3)).copy()
        return beta, kappa

    def derivatives(self, points):
        """Return (dbeta (N,4), dkappa (N,4,3,3))."""
        pts, _ = _as_batch(points)
        if self.analytic:
            db = np.asarray(self.dbeta(pts[:, 0], pts[:, 1:]), dtype=float)
            dk = np.asarray(self.dkappa(pts[:, 0], pts[:, 1:]), dtype=float)
            return (np.broadcast_to(db, (len(pts), 4)).copy(),
                    np.broadcast_to(dk, (len(pts), 4, 3, 3)).copy())
        return self.fd_derivatives(pts, self.fd_step, self.fd_order)

    def fd_derivatives(self, points, step: float, order: int = 4):
        pts, _ = _as_batch(points)
        n = len(pts)
        if order == 2:
            offsets, weights = (1.0, -1.0), (0.5, -0.5)
        elif order == 4:
            offsets, weights = (2.0, 1.0, -1.0, -2.0), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)
        else:
            raise ValueError("fd_order must be 2 or 4")
        db = np.zeros((n, 4))
        dk = np.zeros((n, 4, 3, 3))
        for axis in range(4):
            for off, wt in zip(offsets, weights):
                shifted = pts.copy()
                shifted[:, axis] += off * step
                b, k = self.coefficients(shifted)
                db[:, axis] += wt * b / step
                dk[:, axis] += wt * k / step
        return db, dk

    def metric_matrices(self, points):
        """Return g (N,4,4) and g_inv (N,4,4), checking the signature."""
        pts, _ = _as_batch(points)
        beta, kappa = self.coefficients(pts)
        check_signature(beta, kappa, pts)
        n = len(pts)
        g = np.zeros((n, 4, 4))
        g[:, 0, 0] = -beta
        g[:, 1:, 1:] = kappa
        ginv = np.zeros((n, 4, 4))
        ginv[:, 0, 0] = -1.0 / beta
        ginv[:, 1:, 1:] = np.linalg.inv(kappa)
        return g, ginv

    def reference_matrices(self, points):
        """Riemannian reference metric g+ = beta dT^2 + kappa."""
        pts, _ = _as_batch(points)
        beta, kappa = self.coefficients(pts)
        gp = np.zeros((len(pts), 4, 4))
        gp[:, 0, 0] = beta
        gp[:, 1:, 1:] = kappa
        return gp


def check_signature(beta, kappa, points=None):
    bad = np.flatnonzero(~(beta > 0))
    if bad.size:
        loc = None if points is None else points[bad[0]]
        raise MetricSignatureError("metric signature violation: beta <= 0", loc)
    eig = np.linalg.eigvalsh(kappa)
    bad = np.flatnonzero(~(eig[:, 0] > 0))
    if bad.size:
        loc = None if points is None else points[bad[0]]
        raise MetricSignatureError("metric signature violation: kappa not positive definite", loc)


@dataclass(frozen=True)
class MetricEval:
    g: np.ndarray
    g_inv: np.ndarray
    christoffel: np.ndarray  # christoffel[a, b, c] = Gamma^a_{bc}


def metric_derivative_tensor(spec: MetricSpec, points):
    """dg[n, k] = partial_k g (N,4,4,4)."""
    db, dk = spec.derivatives(points)
    n = db.shape[0]
    dg = np.zeros((n, 4, 4, 4))
    dg[:, :, 0, 0] = -db
    dg[:, :, 1:, 1:] = dk
    return dg


def christoffel_symbols(spec: MetricSpec, points, dg=None):
    pts, _ = _as_batch(points)
    _, ginv = spec.metric_matrices(pts)
    if dg is None:
        dg = metric_derivative_tensor(spec, pts)
    # lowered[n, d, b, c] = d_b g_dc + d_c g_db - d_d g_bc
    lowered = (np.einsum("nbdc->ndbc", dg) + np.einsum("ncdb->ndbc", dg)
               - np.einsum("ndbc->ndbc", dg))
    return 0.5 * np.einsum("nad,ndbc->nabc", ginv, lowered)


def evaluate_metric(spec: MetricSpec, point) -> MetricEval:
    p = np.asarray(point, dtype=float).reshape(1, 4)
    if not (-1.0 < p[0, 0] < 1.0):
        raise InputError(f"point {p[0].tolist()} outside the coordinate chart")
    g, ginv = spec.metric_matrices(p)
    gam = christoffel_symbols(spec, p)
    return MetricEval(g[0], ginv[0], gam[0])


def inner(spec: MetricSpec, points, u, v):
    """g(u, v) batched over the leading axis."""
    pts, _ = _as_batch(points)
    beta, kappa = spec.coefficients(pts)
    u = np.atleast_2d(u)
    v = np.atleast_2d(v)
    return -beta * u[:, 0] * v[:, 0] + np.einsum("ni,nij,nj->n", u[:, 1:], kappa, v[:, 1:])


def reference_norm(spec: MetricSpec, points, v):
    pts, _ = _as_batch(points)
    beta, kappa = spec.coefficients(pts)
    v = np.atleast_2d(v)
    return np.sqrt(beta * v[:, 0] ** 2 + np.einsum("ni,nij,nj->n", v[:, 1:], kappa, v[:, 1:]))


def reference_conorm(spec: MetricSpec, points, zeta):
    pts, _ = _as_batch(points)
    beta, kappa = spec.coefficients(pts)
    zeta = np.atleast_2d(zeta)
    kz = np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
    return np.sqrt(zeta[:, 0] ** 2 / beta + np.einsum("ni,ni->n", zeta[:, 1:], kz))


def flat(spec: MetricSpec, points, v):
    """Lower an index: v -> g(v, .)."""
    pts, single = _as_batch(points)
    beta, kappa = spec.coefficients(pts)
    v = np.atleast_2d(v)
    out = np.empty_like(v, dtype=float)
    out[:, 0] = -beta * v[:, 0]
    out[:, 1:] = np.einsum("nij,nj->ni", kappa, v[:, 1:])
    return out[0] if single and out.shape[0] == 1 else out


def sharp(spec: MetricSpec, points, zeta):
    pts, single = _as_batch(points)
    beta, kappa = spec.coefficients(pts)
    zeta = np.atleast_2d(zeta)
    out = np.empty_like(zeta, dtype=float)
    out[:, 0] = -zeta[:, 0] / beta
    out[:, 1:] = np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
    return out[0] if single and out.shape[0] == 1 else out


def causal_classify(spec: MetricSpec, point, v, null_tol: float = DEFAULT_NULL_TOL):
    """Return (kind, orientation) for a tangent vector."""
    v = np.asarray(v, dtype=float)
    if not np.any(v):
        raise DegenerateVectorError("degenerate vector: zero tangent")
    p = np.asarray(point, dtype=float)
    norm2 = float(inner(spec, p, v, v)[0])
    scale = float(reference_norm(spec, p, v)[0]) ** 2
    if abs(norm2) <= null_tol * scale:
        kind = "null"
    elif norm2 < 0:
        kind = "timelike"
    else:
        kind = "spacelike"
    if kind == "spacelike":
        orientation = "neither"
    else:
        orientation = "future" if v[0] > 0 else "past"
    return kind, orientation


def boundary_defining(point):
    """Return (f_plus, f_minus) = (T+|X|-1, -T+|X|-1); batched if 2-D."""
    pts = np.asarray(point, dtype=float)
    radius = np.linalg.norm(pts[..., 1:], axis=-1)
    return pts[..., 0] + radius - 1.0, -pts[..., 0] + radius - 1.0


def locate(point, tol: float = BOUNDARY_TOL) -> str:
    """Classify a point: interior, S+, S-, R (spacelike infinity), i+, i-, exterior."""
    fp, fm = boundary_defining(point)
    radius = float(np.linalg.norm(np.asarray(point, dtype=float)[1:]))
    on_plus, on_minus = abs(fp) <= tol, abs(fm) <= tol
    if on_plus and on_minus:
        return "R"
    if on_plus:
        if radius <= tol:
            return "i+"
        return "S+" if fm < 0 else "exterior"
    if on_minus:
        if radius <= tol:
            return "i-"
        return "S-" if fp < 0 else "exterior"
    if fp < 0 and fm < 0:
        return "interior"
    return "exterior"


def in_diamond(points, margin: float = 0.0):
    fp, fm = boundary_defining(points)
    return (fp < -margin) & (fm < -margin)


def null_vector(spec: MetricSpec, point, direction):
    """Future null vector (1, c*direction) at ``point``; batched over rows."""
    pts, single = _as_batch(point)
    d = np.atleast_2d(np.asarray(direction, dtype=float))
    beta, kappa = spec.coefficients(pts)
    quad = np.einsum("ni,nij,nj->n", d, kappa, d)
    if np.any(quad <= 0):
        raise DegenerateVectorError("degenerate vector: zero spatial direction")
    scale = np.sqrt(beta / quad)
    out = np.concatenate([np.ones((len(scale), 1)), scale[:, None] * d], axis=1)
    return out[0] if single and out.shape[0] == 1 else out


# ---------------------------------------------------------------- built-ins

def minkowski() -> MetricSpec:
    return MetricSpec(
        beta=lambda t, x: np.ones_like(t),
        kappa=lambda t, x: np.broadcast_to(np.eye(3), (len(t), 3, 3)),
        dbeta=lambda t, x: np.zeros((len(t), 4)),
        dkappa=lambda t, x: np.zeros((len(t), 4, 3, 3)),
        name="minkowski",
        conformally_flat=True,
    )


def bump(amplitude: float, width: float) -> MetricSpec:
    """kappa = (1 + A exp(-|X|^2 / w^2)) I, beta = 1: a static focusing lens."""
    amp, w2 = float(amplitude), float(width) ** 2

    def factor(x):
        return 1.0 + amp * np.exp(-np.sum(x * x, axis=-1) / w2)

    def kappa(t, x):
        return factor(x)[:, None, None] * np.eye(3)

    def dbeta(t, x):
        return np.zeros((len(t), 4))

    def dkappa(t, x):
        bump_part = amp * np.exp(-np.sum(x * x, axis=-1) / w2)
        grad = np.zeros((len(t), 4))
        grad[:, 1:] = (-2.0 / w2) * bump_part[:, None] * x
        return grad[:, :, None, None] * np.eye(3)

    return MetricSpec(beta=lambda t, x: np.ones_like(t), kappa=kappa, dbeta=dbeta, dkappa=dkappa,
                      name=f"bump:{amplitude},{width}", params={"amplitude": amp, "width": float(width)})


def conformal(gamma_expr: str, base: Optional[MetricSpec] = None) -> MetricSpec:
    """exp(2 gamma) times ``base`` (Minkowski by default).

    ``gamma_expr`` is parsed by sympy in the symbols T, X1, X2, X3 (aliases
    t, x, y, z); derivatives are analytic.
    """
    import sympy

    tt, x1, x2, x3 = sympy.symbols("T X1 X2 X3")
    local = {"T": tt, "X1": x1, "X2": x2, "X3": x3, "t": tt, "x": x1, "y": x2, "z": x3}
    try:
        expr = sympy.sympify(gamma_expr, locals=local)
    except (sympy.SympifyError, SyntaxError, TypeError) as exc:
        raise InputError(f"cannot parse conformal factor {gamma_expr!r}: {exc}") from exc
    free = expr.free_symbols - {tt, x1, x2, x3}
    if free:
        raise InputError(f"conformal factor has unknown symbols {sorted(map(str, free))}")
    symbols = (tt, x1, x2, x3)
    gamma_fn = sympy.lambdify(symbols, expr, "numpy")
    grad_fns = [sympy.lambdify(symbols, sympy.diff(expr, s), "numpy") for s in symbols]
    base = base or minkowski()

    def gamma(t, x):
        return np.broadcast_to(gamma_fn(t, x[:, 0], x[:, 1], x[:, 2]), t.shape).astype(float)

    def grad(t, x):
        return np.stack([np.broadcast_to(fn(t, x[:, 0], x[:, 1], x[:, 2]), t.shape).astype(float)
                         for fn in grad_fns], axis=1)

    def beta(t, x):
        return np.exp(2 * gamma(t, x)) * np.broadcast_to(base.beta(t, x), t.shape)

    def kappa(t, x):
        return np.exp(2 * gamma(t, x))[:, None, None] * base.kappa(t, x)

    def dbeta(t, x):
        pts = np.column_stack([t, x])
        bb, _ = base.coefficients(pts)
        dbb, _ = base.derivatives(pts)
        e2 = np.exp(2 * gamma(t, x))
        return e2[:, None] * (2 * grad(t, x) * bb[:, None] + dbb)

    def dkappa(t, x):
        pts = np.column_stack([t, x])
        _, kk = base.coefficients(pts)
        _, dkk = base.derivatives(pts)
        e2 = np.exp(2 * gamma(t, x))
        return e2[:, None, None, None] * (2 * grad(t, x)[:, :, None, None] * kk[:, None] + dkk)

    return MetricSpec(beta=beta, kappa=kappa, dbeta=dbeta, dkappa=dkappa,
                      name=f"conformal:{gamma_expr}",
                      conformally_flat=base.conformally_flat,
                      params={"gamma": str(expr)})


def tabulated(path) -> MetricSpec:
    """Coefficients sampled on a regular (T, X1, X2, X3) grid.

    ``path`` names a JSON header with keys ``axes`` (four 1-D coordinate
    lists) and ``data`` (binary file name).  The binary holds float64 in
    row-major order with shape (nT, nX1, nX2, nX3, 7): beta followed by the
    kappa entries k11, k12, k13, k22, k23, k33.  Interpolation is
    multilinear; derivatives use central differences.
    """
    from scipy.interpolate import RegularGridInterpolator

    header_path = Path(path)
    try:
        header = json.loads(header_path.read_text())
        axes = [np.asarray(a, dtype=float) for a in header["axes"]]
        shape = tuple(len(a) for a in axes) + (7,)
        raw = np.fromfile(header_path.parent / header["data"], dtype="<f8")
        grid = raw.reshape(shape)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot load tabulated metric {path}: {exc}") from exc
    interp = RegularGridInterpolator(axes, grid, method=header.get("method", "linear"),
                                     bounds_error=False, fill_value=None)
    upper = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]

    def evaluate(t, x):
        return interp(np.column_stack([t, x]))

    def beta(t, x):
        return evaluate(t, x)[:, 0]

    def kappa(t, x):
        vals = evaluate(t, x)
        out = np.empty((len(t), 3, 3))
        for slot, (i, j) in enumerate(upper):
            out[:, i, j] = out[:, j, i] = vals[:, slot + 1]
        return out

    spacing = min(float(np.min(np.diff(a))) for a in axes)
    return MetricSpec(beta=beta, kappa=kappa, name=f"tabulated:{path}",
                      fd_step=min(1e-5, spacing / 10), params={"path": str(path)})


def parse_metric(text: str) -> MetricSpec:
    """Build a metric from its config string."""
    text = text.strip()
    kind, _, arg = text.partition(":")
    kind = kind.strip().lower()
    if kind == "minkowski":
        return minkowski()
    if kind == "conformal":
        if not arg:
            raise InputError("conformal metric needs an expression, e.g. conformal:0.1*T")
        return conformal(arg)
    if kind == "bump":
        try:
            amp, width = (float(v) for v in arg.split(","))
        except ValueError as exc:
            raise InputError(f"bump metric expects 'bump:amplitude,width', got {text!r}") from exc
        return bump(amp, width)
    if kind == "tabulated":
        return tabulated(arg)
    raise InputError(f"unknown metric {text!r}")
