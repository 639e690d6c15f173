"""Null geodesics in Hamiltonian form with a batched adaptive integrator.

The flow of b(x, zeta) = g^{ij} zeta_i zeta_j is integrated for many rays
at once by a Dormand-Prince 5(4) pair with per-ray step control and
quartic dense output.  With zeta = g(v)/2 the position derivative at the
seed is exactly v.  Backward traces integrate the reversed flow, so the
parameter s >= 0 always increases and x(s) = gamma(-s); zeta remains the
momentum of the future-directed geodesic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .errors import GrazingHit, IntegratorStall, PossiblyTrapped, SeedNotNull
from .metric import (DEFAULT_NULL_TOL, MetricSpec, boundary_defining, inner, reference_norm)

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array(_A[6] + [0.0])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# quartic continuous extension, y(s0 + theta h) = y0 + h K^T P [theta, theta^2, theta^3, theta^4]
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
GRAZING_TOL = 1e-6
HIT_TOL = 1e-10


@dataclass
class DenseSolution:
    """Piecewise-quartic solution of one ray."""

    s: np.ndarray        # (n+1,) node parameters
    y: np.ndarray        # (n+1, d) node states
    coeffs: np.ndarray   # (n, d, 4)
    status: str = "s_max"

    @property
    def s_end(self) -> float:
        return float(self.s[-1])

    def __call__(self, svals):
        svals = np.asarray(svals, dtype=float)
        scalar = svals.ndim == 0
        sv = np.atleast_1d(svals)
        if len(self.coeffs) == 0:
            out = np.repeat(self.y[:1], len(sv), axis=0)
            return out[0] if scalar else out
        idx = np.clip(np.searchsorted(self.s, sv, side="right") - 1, 0, len(self.coeffs) - 1)
        h = self.s[idx + 1] - self.s[idx]
        theta = (sv - self.s[idx]) / h
        powers = np.stack([theta, theta ** 2, theta ** 3, theta ** 4], axis=1)
        out = self.y[idx] + h[:, None] * np.einsum("ndj,nj->nd", self.coeffs[idx], powers)
        return out[0] if scalar else out

    def derivative(self, svals):
        """d y / d s of the interpolant (accurate to the step tolerance)."""
        svals = np.asarray(svals, dtype=float)
        scalar = svals.ndim == 0
        sv = np.atleast_1d(svals)
        if len(self.coeffs) == 0:
            out = np.zeros((len(sv), self.y.shape[1]))
            return out[0] if scalar else out
        idx = np.clip(np.searchsorted(self.s, sv, side="right") - 1, 0, len(self.coeffs) - 1)
        theta = (sv - self.s[idx]) / (self.s[idx + 1] - self.s[idx])
        powers = np.stack([np.ones_like(theta), 2 * theta, 3 * theta ** 2, 4 * theta ** 3], axis=1)
        out = np.einsum("ndj,nj->nd", self.coeffs[idx], powers)
        return out[0] if scalar else out


def dopri_batch(rhs: Callable, y0, s_end, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                event: Optional[Callable] = None, post: Optional[Callable] = None,
                h0=None, max_steps=100000) -> list[DenseSolution]:
    """Integrate y' = rhs(y) for a batch of rays with independent step control.

    ``event(Y)`` returns one value per row; a ray stops after the first
    accepted step over which the value passes from negative to >= 0.
    ``post(Y)`` maps accepted states (e.g. a constraint projection).
    Stalled rays get status "stall".
    """
    y = np.array(np.atleast_2d(y0), dtype=float)
    n, d = y.shape
    s_end = np.broadcast_to(np.asarray(s_end, dtype=float), (n,)).copy()
    s = np.zeros(n)
    h = np.full(n, 1e-2 if h0 is None else h0, dtype=float)
    h = np.minimum(h, s_end)
    f = rhs(y)
    status = np.array(["running"] * n, dtype=object)
    ev_prev = event(y) if event is not None else None
    rec_ids, rec_s0, rec_h, rec_y0, rec_q, rec_y1 = [], [], [], [], [], []
    active = np.flatnonzero(s_end > 0)
    status[s_end <= 0] = "s_max"
    steps = 0
    while active.size:
        steps += 1
        if steps > max_steps:
            status[active] = "stall"
            break
        ya, sa = y[active], s[active]
        ha = np.minimum(h[active], s_end[active] - sa)
        m = len(active)
        stages = np.empty((7, m, d))
        stages[0] = f[active]
        for i in range(1, 7):
            incr = np.tensordot(np.asarray(_A[i]), stages[:i], axes=(0, 0))
            stages[i] = rhs(ya + ha[:, None] * incr)
        y_new = ya + ha[:, None] * np.tensordot(_B[:6], stages[:6], axes=(0, 0))
        # stage 6 was evaluated at y_new already (FSAL property)
        err = ha[:, None] * np.tensordot(_E, stages, axes=(0, 0))
        scale = atol + rtol * np.maximum(np.abs(ya), np.abs(y_new))
        err_norm = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        finite = np.all(np.isfinite(y_new), axis=1) & np.isfinite(err_norm)
        err_norm = np.where(finite, err_norm, np.inf)
        accept = err_norm <= 1.0
        with np.errstate(divide="ignore"):
            factor = np.where(err_norm == 0, 10.0, 0.9 * err_norm ** -0.2)
        factor = np.where(accept, np.clip(factor, 0.2, 10.0), np.clip(factor, 0.1, 0.9))
        factor = np.where(finite, factor, 0.25)
        h[active] = ha * factor
        stalled = (~accept) & (ha * factor < 1e-14 * (1.0 + np.abs(sa)))
        if np.any(stalled):
            status[active[stalled]] = "stall"
        if np.any(accept):
            ids = active[accept]
            q = np.einsum("kmd,kj->mdj", stages[:, accept], _P)
            new_states = y_new[accept]
            if post is not None:
                new_states = post(new_states)
            rec_ids.append(ids)
            rec_s0.append(sa[accept])
            rec_h.append(ha[accept])
            rec_y0.append(ya[accept])
            rec_q.append(q)
            rec_y1.append(new_states)
            s[ids] = sa[accept] + ha[accept]
            y[ids] = new_states
            f[ids] = stages[6][accept] if post is None else rhs(new_states)
            finished = s[ids] >= s_end[ids] * (1 - 1e-15)
            if event is not None:
                ev_new = event(new_states)
                crossed = (ev_prev[ids] < 0) & (ev_new >= 0)
                ev_prev[ids] = ev_new
                status[ids[crossed]] = "event"
                finished &= ~crossed
            status[ids[finished]] = "s_max"
        active = np.flatnonzero(status == "running")

    out = []
    if rec_ids:
        ids = np.concatenate(rec_ids)
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        s0 = np.concatenate(rec_s0)[order]
        hh = np.concatenate(rec_h)[order]
        y0s = np.concatenate(rec_y0)[order]
        qs = np.concatenate(rec_q)[order]
        y1s = np.concatenate(rec_y1)[order]
        bounds = np.searchsorted(ids, np.arange(n + 1))
    y_init = np.atleast_2d(y0)
    for ray in range(n):
        if rec_ids and bounds[ray + 1] > bounds[ray]:
            sl = slice(bounds[ray], bounds[ray + 1])
            nodes_s = np.concatenate([[0.0], s0[sl] + hh[sl]])
            # each step starts from the (projected) node state of the previous one
            nodes_y = np.concatenate([y0s[sl], y1s[sl][-1:]])
            sol = DenseSolution(nodes_s, nodes_y, qs[sl], str(status[ray]))
        else:
            sol = DenseSolution(np.array([0.0]), y_init[ray:ray + 1].copy(),
                                np.zeros((0, d, 4)), str(status[ray]))
        out.append(sol)
    return out


# ---------------------------------------------------------------- Hamiltonian flow

def hamiltonian_rhs(spec: MetricSpec, sign: float = 1.0):
    """Right-hand side of Hamilton's equations for b on (N, 8) states."""

    def rhs(state):
        x, zeta = state[:, :4], state[:, 4:]
        beta, kappa = spec.coefficients(x)
        dbeta, dkappa = spec.derivatives(x)
        u = np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
        out = np.empty_like(state)
        out[:, 0] = -2.0 * zeta[:, 0] / beta
        out[:, 1:4] = 2.0 * u
        out[:, 4:] = (-(zeta[:, 0] ** 2 / beta ** 2)[:, None] * dbeta
                      + np.einsum("ni,nkij,nj->nk", u, dkappa, u))
        return sign * out

    return rhs


def hamiltonian(spec: MetricSpec, states):
    states = np.atleast_2d(states)
    beta, kappa = spec.coefficients(states[:, :4])
    zeta = states[:, 4:]
    u = np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
    return -zeta[:, 0] ** 2 / beta + np.einsum("ni,ni->n", zeta[:, 1:], u)


def momentum_scale(spec: MetricSpec, states):
    """|zeta|^2 in the reference co-metric, used to make drift relative."""
    states = np.atleast_2d(states)
    beta, kappa = spec.coefficients(states[:, :4])
    zeta = states[:, 4:]
    u = np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
    return zeta[:, 0] ** 2 / beta + np.einsum("ni,ni->n", zeta[:, 1:], u)


def relative_drift(spec: MetricSpec, states):
    return np.abs(hamiltonian(spec, states)) / momentum_scale(spec, states)


def null_projector(spec: MetricSpec):
    """Rescale the spatial momentum so that b = 0 exactly."""

    def project(states):
        beta, kappa = spec.coefficients(states[:, :4])
        zeta = states[:, 4:]
        u = np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
        spatial = np.einsum("ni,ni->n", zeta[:, 1:], u)
        target = zeta[:, 0] ** 2 / beta
        factor = np.sqrt(target / np.where(spatial > 0, spatial, 1.0))
        out = states.copy()
        out[:, 5:] *= np.where(spatial > 0, factor, 1.0)[:, None]
        return out

    return project


def seed_momentum(spec: MetricSpec, points, vectors):
    """zeta = g(v)/2 so the position derivative at the seed equals v."""
    points = np.atleast_2d(points)
    vectors = np.atleast_2d(vectors)
    beta, kappa = spec.coefficients(points)
    zeta = np.empty_like(vectors, dtype=float)
    zeta[:, 0] = -0.5 * beta * vectors[:, 0]
    zeta[:, 1:] = 0.5 * np.einsum("nij,nj->ni", kappa, vectors[:, 1:])
    return zeta


def velocity(spec: MetricSpec, states):
    """Future tangent 2 g^{-1} zeta of the geodesic at the given states."""
    states = np.atleast_2d(states)
    beta, kappa = spec.coefficients(states[:, :4])
    zeta = states[:, 4:]
    out = np.empty((len(states), 4))
    out[:, 0] = -2.0 * zeta[:, 0] / beta
    out[:, 1:] = 2.0 * np.linalg.solve(kappa, zeta[:, 1:, None])[..., 0]
    return out


def check_null_seed(spec: MetricSpec, points, vectors, null_tol=DEFAULT_NULL_TOL):
    """Raise SeedNotNull naming the first offending row."""
    points = np.atleast_2d(points)
    vectors = np.atleast_2d(vectors)
    norm2 = inner(spec, points, vectors, vectors)
    scale = reference_norm(spec, points, vectors) ** 2
    bad = np.flatnonzero(~(np.abs(norm2) <= null_tol * scale))
    if bad.size:
        row = int(bad[0])
        raise SeedNotNull(f"seed not null (row {row}): g(v,v)={norm2[row]:.3e}")
    past = np.flatnonzero(~(vectors[:, 0] > 0))
    if past.size:
        raise SeedNotNull(f"seed not future-pointing (row {int(past[0])})")


# ---------------------------------------------------------------- trajectories

@dataclass
class BoundaryHit:
    which: str
    point: np.ndarray
    tangent: np.ndarray
    parameter: float
    transversality: float
    grazing: bool
    momentum: Optional[np.ndarray] = None


@dataclass
class Trajectory:
    """A traced null geodesic; ``direction`` is +1 forward, -1 backward."""

    solution: DenseSolution
    direction: int
    spec: MetricSpec = field(repr=False)
    s_stop: Optional[float] = None
    hit: Optional[BoundaryHit] = None

    @property
    def s_end(self) -> float:
        return self.s_stop if self.s_stop is not None else self.solution.s_end

    @property
    def status(self) -> str:
        return self.solution.status

    @property
    def nodes(self):
        sv = self.solution.s
        keep = sv < self.s_end
        return np.concatenate([sv[keep], [self.s_end]])

    def state(self, s):
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.s_end)
        return self.solution(s)

    def position(self, s):
        st = self.state(s)
        return st[..., :4]

    def tangent(self, s):
        """Future-directed tangent 2 g^{-1} zeta."""
        st = np.atleast_2d(self.state(s))
        out = velocity(self.spec, st)
        return out[0] if np.ndim(s) == 0 else out

    def position_rate(self, s):
        """d x / d s along the traced parameter (sign follows the trace direction)."""
        return self.direction * self.tangent(s)

    def rate(self, s):
        """Interpolated d x / d s (cheap; for iterative solvers)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.s_end)
        return self.solution.derivative(s)[..., :4]

    def samples(self, count: int = 96):
        """Positions at the nodes merged with a uniform grid (for coarse scans)."""
        grid = np.linspace(0.0, self.s_end, count)
        sv = np.union1d(grid, self.nodes)
        return sv, self.position(sv)


def _boundary_event(direction: int):
    if direction > 0:
        return lambda states: boundary_defining(states[:, :4])[0]
    return lambda states: boundary_defining(states[:, :4])[1]


def _default_s_max(spec, points, vectors):
    norms = reference_norm(spec, points, vectors)
    return 20.0 / norms


def trace_batch(spec: MetricSpec, points, vectors, direction: int = 1, s_max=None,
                stop_at_boundary: bool = True, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                null_tol=DEFAULT_NULL_TOL, check_seed=True) -> list[Trajectory]:
    """Trace many null geodesics at once.

    Rays that reach their boundary get ``traj.hit`` filled (grazing hits are
    flagged on the hit, not raised).  Stalled rays raise IntegratorStall.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
    if len(points) == 0:
        return []
    if check_seed:
        check_null_seed(spec, points, vectors, null_tol)
    if s_max is None:
        s_max = _default_s_max(spec, points, vectors)
    y0 = np.concatenate([points, seed_momentum(spec, points, vectors)], axis=1)
    sign = 1.0 if direction > 0 else -1.0
    event = _boundary_event(direction) if stop_at_boundary else None
    sols = dopri_batch(hamiltonian_rhs(spec, sign), y0, s_max, rtol=rtol, atol=atol,
                       event=event, post=null_projector(spec),
                       h0=0.02 / np.maximum(reference_norm(spec, points, vectors), 1e-12))
    trajs = []
    for row, sol in enumerate(sols):
        if sol.status == "stall":
            raise IntegratorStall(f"integrator stall (row {row}) at s={sol.s_end:.6g}",
                                  last_state=sol.y[-1].copy())
        trajs.append(Trajectory(sol, 1 if direction > 0 else -1, spec))
    if stop_at_boundary:
        _refine_hits([t for t in trajs if t.solution.status == "event"])
    return trajs


def _refine_hits(trajs: list):
    """Locate boundary crossings in the last step of each ray (vectorized bisection)."""
    if not trajs:
        return
    spec = trajs[0].spec
    direction = trajs[0].direction
    which = "S+" if direction > 0 else "S-"
    idx = 0 if direction > 0 else 1
    y_lo = np.array([t.solution.y[-2] for t in trajs])
    coeffs = np.array([t.solution.coeffs[-1] for t in trajs])
    s_lo = np.array([t.solution.s[-2] for t in trajs])
    h = np.array([t.solution.s[-1] - t.solution.s[-2] for t in trajs])

    def state_at(theta):
        powers = np.stack([theta, theta ** 2, theta ** 3, theta ** 4], axis=1)
        return y_lo + h[:, None] * np.einsum("ndj,nj->nd", coeffs, powers)

    def level(theta):
        return boundary_defining(state_at(theta)[:, :4])[idx]

    lo = np.zeros(len(trajs))
    hi = np.ones(len(trajs))
    flo, fhi = level(lo), level(hi)
    theta = np.where(flo >= 0, 0.0, 1.0)
    bracket = (flo < 0) & (fhi >= 0)
    if bracket.any():
        a, b = lo[bracket], hi[bracket]
        sub_y, sub_c, sub_h = y_lo[bracket], coeffs[bracket], h[bracket]
        for _ in range(64):
            mid = 0.5 * (a + b)
            powers = np.stack([mid, mid ** 2, mid ** 3, mid ** 4], axis=1)
            st = sub_y + sub_h[:, None] * np.einsum("ndj,nj->nd", sub_c, powers)
            neg = boundary_defining(st[:, :4])[idx] < 0
            a = np.where(neg, mid, a)
            b = np.where(neg, b, mid)
            if np.all(b - a <= 1e-16):
                break
        theta[bracket] = b
    states = null_projector(spec)(state_at(theta))
    tangents = velocity(spec, states)
    for k, traj in enumerate(trajs):
        s_hit = float(s_lo[k] + theta[k] * h[k])
        point = states[k, :4].copy()
        tr = transversality(spec, point, tangents[k], which)
        traj.s_stop = s_hit
        traj.hit = BoundaryHit(which, point, tangents[k].copy(), s_hit, tr, abs(tr) < GRAZING_TOL,
                               momentum=states[k, 4:].copy())


def transversality(spec: MetricSpec, point, tangent, which: str) -> float:
    """Normalized g(w, nu) for the future normal nu of S+ or S-; negative means transversal.

    For S+ this equals -df_+(w), for S- it equals df_-(w); both are scaled by
    the reference norms of w and of the differential.
    """
    point = np.asarray(point, dtype=float)
    radial = point[1:] / max(np.linalg.norm(point[1:]), 1e-300)
    if which == "S+":
        dfun = np.concatenate([[1.0], radial])
        value = -float(dfun @ tangent)
    else:
        dfun = np.concatenate([[-1.0], radial])
        value = float(dfun @ tangent)
    beta, kappa = spec.coefficients(point[None])
    co = np.sqrt(dfun[0] ** 2 / beta[0] + dfun[1:] @ np.linalg.solve(kappa[0], dfun[1:]))
    return value / (co * float(reference_norm(spec, point, tangent)[0]))


def integrate_null(spec: MetricSpec, q, v, s_max: float, direction: int = 1,
                   stop_at_boundary: bool = True, rtol=DEFAULT_RTOL,
                   null_tol=DEFAULT_NULL_TOL) -> Trajectory:
    """Trace one null geodesic up to s_max or its boundary exit."""
    return trace_batch(spec, q, v, direction, s_max, stop_at_boundary, rtol=rtol,
                       null_tol=null_tol)[0]


def trace_to_boundary(spec: MetricSpec, q, v, direction: int = 1, s_max=None,
                      allow_grazing=False, rtol=DEFAULT_RTOL) -> BoundaryHit:
    traj = trace_batch(spec, q, v, direction, s_max, rtol=rtol)[0]
    return hit_of(traj, allow_grazing)


def hit_of(traj: Trajectory, allow_grazing=False) -> BoundaryHit:
    if traj.hit is None:
        raise PossiblyTrapped(f"possibly trapped or s_max too small (traced to s={traj.s_end:.6g})")
    if traj.hit.grazing and not allow_grazing:
        raise GrazingHit(f"grazing hit at {traj.hit.point.tolist()}", hit=traj.hit)
    return traj.hit


# ---------------------------------------------------------------- Jacobi transport

def _variational_rhs(spec: MetricSpec, sign: float, fd_rel=1e-6):
    base = hamiltonian_rhs(spec, sign)

    def rhs(aug):
        m = len(aug)
        y = aug[:, :8]
        phi = aug[:, 8:].reshape(m, 8, 8)
        steps = fd_rel * np.maximum(1.0, np.abs(y))
        plus = np.repeat(y[:, None, :], 8, axis=1)
        minus = plus.copy()
        eye = np.eye(8)[None]
        plus = plus + eye * steps[:, None, :]
        minus = minus - eye * steps[:, None, :]
        stacked = np.concatenate([y, plus.reshape(-1, 8), minus.reshape(-1, 8)])
        evals = base(stacked)
        f0 = evals[:m]
        fp = evals[m:m + 8 * m].reshape(m, 8, 8)
        fm = evals[m + 8 * m:].reshape(m, 8, 8)
        jac = np.transpose((fp - fm) / (2 * steps[:, :, None]), (0, 2, 1))
        dphi = jac @ phi
        return np.concatenate([f0, dphi.reshape(m, 64)], axis=1)

    return rhs


@dataclass
class JacobiTransport:
    """Propagator Phi(s) = d y(s) / d y(0) of the Hamiltonian flow along one ray."""

    solution: DenseSolution
    direction: int
    spec: MetricSpec = field(repr=False)
    s_end: float = 0.0

    def propagator(self, s):
        st = np.atleast_2d(self.solution(np.clip(s, 0, self.s_end)))
        return st[:, 8:].reshape(-1, 8, 8)

    def position_block(self, s):
        """D(s) = d x(s) / d zeta(0)."""
        return self.propagator(s)[:, :4, 4:]

    def base_state(self, s):
        return np.atleast_2d(self.solution(np.clip(s, 0, self.s_end)))[:, :8]

    def _initial_frame(self):
        init = self.base_state(0.0)
        kappa0 = self.spec.coefficients(init[:, :4])[1][0]
        frame0 = _screen_frame(kappa0, velocity(self.spec, init)[0, 1:], None)
        dzeta = np.zeros((2, 4))
        dzeta[:, 1:] = frame0 @ kappa0  # flat of the spatial frame vectors
        return frame0, dzeta

    def screen_blocks(self, svals, return_frames=False):
        """2x2 screen blocks A_ab(s) = g(D(s) flat(E_a(0)), E_b(s)).

        The screen frame E(s) is spatial, kappa-orthonormal and
        kappa-orthogonal to the spatial velocity, carried along the
        (increasing) grid by projecting the previous frame.
        """
        svals = np.atleast_1d(np.asarray(svals, dtype=float))
        states = np.atleast_2d(self.solution(np.clip(svals, 0, self.s_end)))
        x, phi = states[:, :4], states[:, 8:].reshape(-1, 8, 8)
        _, kappa = self.spec.coefficients(x)
        vel = velocity(self.spec, states[:, :8])[:, 1:]
        frame, dzeta = self._initial_frame()
        blocks = np.empty((len(svals), 2, 2))
        frames = np.empty((len(svals), 2, 3))
        for i in range(len(svals)):
            frame = _screen_frame(kappa[i], vel[i], frame)
            frames[i] = frame
            dx = phi[i, :4, 4:] @ dzeta.T
            blocks[i] = dx[1:].T @ kappa[i] @ frame.T
        return (blocks, frames) if return_frames else blocks

    def screen_block_near(self, s, frame_hint):
        """Screen block at a single s using a nearby frame for orientation."""
        state = np.atleast_2d(self.solution(np.clip(s, 0, self.s_end)))
        _, kappa = self.spec.coefficients(state[:, :4])
        vel = velocity(self.spec, state[:, :8])[0, 1:]
        frame = _screen_frame(kappa[0], vel, frame_hint)
        _, dzeta = self._initial_frame()
        dx = state[0, 8:].reshape(8, 8)[:4, 4:] @ dzeta.T
        return dx[1:].T @ kappa[0] @ frame.T


def _screen_frame(kappa, vel, previous):
    """Two kappa-orthonormal spatial vectors kappa-orthogonal to vel."""
    vk = kappa @ vel
    if previous is None:
        trial = np.eye(3)[np.argsort(np.abs(vel))[:2]]
    else:
        trial = previous
    out = []
    for vec in trial:
        vec = vec - (vec @ vk) / (vel @ vk) * vel
        for prev in out:
            vec = vec - (vec @ kappa @ prev) * prev
        vec = vec / np.sqrt(vec @ kappa @ vec)
        out.append(vec)
    return np.array(out)


def jacobi_transport(spec: MetricSpec, trajectory: Trajectory, rtol=1e-10, atol=1e-11) -> JacobiTransport:
    """Integrate the variational equations along ``trajectory``."""
    return jacobi_transport_batch(spec, [trajectory], rtol, atol)[0]


def jacobi_transport_batch(spec: MetricSpec, trajectories, rtol=1e-10, atol=1e-11):
    if not trajectories:
        return []
    y0 = np.array([t.solution.y[0] for t in trajectories])
    s_end = np.array([t.s_end for t in trajectories])
    phi0 = np.broadcast_to(np.eye(8).reshape(1, 64), (len(y0), 64))
    aug0 = np.concatenate([y0, phi0], axis=1)
    sign = float(trajectories[0].direction)
    if any(t.direction != trajectories[0].direction for t in trajectories):
        raise ValueError("batched Jacobi transport needs a common trace direction")
    sols = dopri_batch(_variational_rhs(spec, sign), aug0, s_end, rtol=rtol, atol=atol,
                       h0=0.02 * s_end)
    out = []
    for sol, traj, end in zip(sols, trajectories, s_end):
        if sol.status == "stall":
            raise IntegratorStall("integrator stall in Jacobi transport", last_state=sol.y[-1, :8])
        out.append(JacobiTransport(sol, traj.direction, spec, float(end)))
    return out
