"""Conjugate points, second connecting geodesics and cut-free certificates."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.spatial import cKDTree

from .geodesics import (Trajectory, jacobi_transport_batch, trace_batch)
from .metric import MetricSpec, in_diamond, null_vector, reference_norm
from .sampling import angle_between, fibonacci_sphere, orthonormal_complement, spacing

CONNECT_TOL = 1e-6
SEPARATION = 1e-3


def unit_null(spec: MetricSpec, point, directions):
    """Future null vectors with the given spatial directions, unit in g+."""
    pts = np.broadcast_to(np.asarray(point, dtype=float), (len(np.atleast_2d(directions)), 4))
    vec = null_vector(spec, pts, np.atleast_2d(directions))
    vec = np.atleast_2d(vec)
    return vec / reference_norm(spec, pts, vec)[:, None]


# ---------------------------------------------------------------- conjugate points

@dataclass
class ConjugateScan:
    s_conjugate: Optional[float]
    kind: Optional[str]          # "simple" (sign change) or "double" (symmetric focusing)
    grid: np.ndarray
    determinant: np.ndarray
    singular_min: np.ndarray
    s_exit: float


def _scan_conjugate(transport, s_exit: float, oversample: int = 4) -> ConjugateScan:
    nodes = transport.solution.s
    nodes = nodes[nodes <= s_exit]
    pieces = [np.linspace(a, b, oversample, endpoint=False) for a, b in zip(nodes[:-1], nodes[1:])]
    grid = np.concatenate(pieces + [[s_exit]]) if pieces else np.array([s_exit])
    grid = grid[grid > 1e-6 * max(s_exit, 1e-12)]
    blocks, frames = transport.screen_blocks(grid, return_frames=True)
    det = np.linalg.det(blocks)
    sing = np.linalg.svd(blocks, compute_uv=False)
    smin, smax = sing[:, 1], sing[:, 0]
    best = None

    def det_at(s, hint):
        return float(np.linalg.det(transport.screen_block_near(s, hint)))

    flips = np.flatnonzero(np.sign(det[1:]) != np.sign(det[:-1]))
    if flips.size:
        i = int(flips[0])
        hint = frames[i]
        s_root = brentq(lambda s: det_at(s, hint), grid[i], grid[i + 1], xtol=1e-13)
        best = (s_root, "simple")
    # symmetric focusing: both screen directions vanish together, det touches zero
    running_max = np.maximum.accumulate(smax)
    dips = np.flatnonzero((smin[1:-1] < smin[:-2]) & (smin[1:-1] <= smin[2:])
                          & (smin[1:-1] < 0.05 * running_max[1:-1])) + 1
    for i in dips:
        if best is not None and grid[i - 1] >= best[0]:
            break
        hint = frames[i]
        res = minimize_scalar(
            lambda s: np.linalg.svd(transport.screen_block_near(s, hint), compute_uv=False)[1],
            bounds=(grid[i - 1], grid[i + 1]), method="bounded", options={"xatol": 1e-13})
        if res.fun < 1e-6 * running_max[i]:
            if best is None or res.x < best[0]:
                best = (float(res.x), "double")
            break
    return ConjugateScan(None if best is None else best[0], None if best is None else best[1],
                         grid, det, smin, s_exit)


def first_conjugate_batch(spec: MetricSpec, trajectories: list[Trajectory], s_limits=None):
    """Conjugate scans for several traced rays sharing a trace direction."""
    if not trajectories:
        return []
    transports = jacobi_transport_batch(spec, trajectories)
    out = []
    for idx, (traj, tr) in enumerate(zip(trajectories, transports)):
        end = traj.s_end if s_limits is None else min(traj.s_end, s_limits[idx])
        out.append(_scan_conjugate(tr, end))
    return out


def first_conjugate(spec: MetricSpec, q, v, direction: int = 1) -> Optional[float]:
    """First parameter s* > 0 where the screen block of D(s) is singular, or None."""
    traj = trace_batch(spec, q, v, direction)[0]
    return first_conjugate_batch(spec, [traj])[0].s_conjugate


# ---------------------------------------------------------------- second geodesics

@dataclass
class Fan:
    """Null geodesics from one point over a Fibonacci grid of directions."""

    spec: MetricSpec = field(repr=False)
    origin: np.ndarray
    directions: np.ndarray
    trajectories: list
    direction: int
    samples: np.ndarray = field(repr=False)  # (n, count, 4) positions on a uniform grid
    params: np.ndarray = field(repr=False)   # (n, count)

    @property
    def spacing(self) -> float:
        return spacing(len(self.directions))


def build_fan(spec: MetricSpec, origin, count: int = 512, direction: int = 1, samples: int = 64) -> Fan:
    dirs = fibonacci_sphere(count)
    origin = np.asarray(origin, dtype=float)
    vecs = unit_null(spec, origin, dirs)
    trajs = trace_batch(spec, np.broadcast_to(origin, (count, 4)), vecs, direction)
    params = np.array([np.linspace(0.0, t.s_end, samples) for t in trajs])
    pos = np.array([t.position(p) for t, p in zip(trajs, params)])
    return Fan(spec, origin, dirs, trajs, direction, pos, params)


def _distance_to_target(spec, traj, target, metric_chol, s_lo, s_hi):
    def dist2(s):
        diff = traj.position(s) - target
        return float(np.sum((metric_chol.T @ diff) ** 2))

    res = minimize_scalar(dist2, bounds=(s_lo, s_hi), method="bounded", options={"xatol": 1e-12})
    return res.x, np.sqrt(max(res.fun, 0.0))


@dataclass
class SecondSeed:
    direction: np.ndarray   # spatial unit direction at the origin
    vector: np.ndarray      # g+-unit null vector
    parameter: float
    residual: float


def second_geodesic_search(spec: MetricSpec, q, target, exclusion_direction, cone_samples: int = 512,
                           fan: Optional[Fan] = None, direction: int = 1,
                           connect_tol: float = CONNECT_TOL, max_candidates: int = 4) -> Optional[SecondSeed]:
    """Look for a null geodesic from q to ``target`` not along ``exclusion_direction``.

    ``exclusion_direction`` is a spatial 3-vector (or a null 4-vector whose
    spatial part is used).  Returns None when nothing is found.
    """
    q = np.asarray(q, dtype=float)
    target = np.asarray(target, dtype=float)
    if direction * (target[0] - q[0]) <= 0:
        return None
    if fan is None:
        fan = build_fan(spec, q, cone_samples, direction)
    excl = np.asarray(exclusion_direction, dtype=float)
    excl = excl[1:] if excl.shape == (4,) else excl
    gplus = spec.reference_matrices(target[None])[0]
    chol = np.linalg.cholesky(gplus)
    diffs = fan.samples - target
    dists = np.sqrt(np.einsum("nki,ij,nkj->nk", diffs, gplus, diffs))
    best_k = np.argmin(dists, axis=1)
    best = dists[np.arange(len(dists)), best_k]
    tree = cKDTree(fan.directions)
    _, nbrs = tree.query(fan.directions, k=min(9, len(fan.directions)))
    local_min = np.all(best[:, None] <= best[nbrs], axis=1)
    reach = np.linalg.norm(target - q)
    threshold = 1.5 * fan.spacing * reach
    sep = angle_between(fan.directions, np.broadcast_to(excl, fan.directions.shape))
    cands = np.flatnonzero(local_min & (best < threshold) & (sep > 2.0 * fan.spacing))
    cands = cands[np.argsort(best[cands])][:max_candidates]
    for c in cands:
        found = _refine_connection(spec, q, target, fan, int(c), int(best_k[c]), chol, direction)
        if found is None:
            continue
        if found.residual < connect_tol and angle_between(found.direction, excl) > SEPARATION:
            return found
    return None


def _refine_connection(spec, q, target, fan: Fan, cand: int, k_best: int, chol, direction,
                       max_iter: int = 10, fd_step: float = 1e-6):
    """Gauss-Newton on (two direction offsets, parameter) with batched FD columns."""
    centre = fan.directions[cand]
    e1, e2 = orthonormal_complement(centre)
    params = np.array([0.0, 0.0, float(fan.params[cand, k_best])])
    s_cap = 1.2 * params[2] + 1e-3
    start_norm = None

    def dirs_for(ab):
        raw = centre + ab[0] * e1 + ab[1] * e2
        return raw / np.linalg.norm(raw)

    resid = None
    for _ in range(max_iter):
        offsets = [params[:2], params[:2] + [fd_step, 0.0], params[:2] + [0.0, fd_step]]
        dirs = np.array([dirs_for(ab) for ab in offsets])
        vecs = unit_null(spec, q, dirs)
        trajs = trace_batch(spec, np.broadcast_to(q, (3, 4)), vecs, direction, s_max=s_cap,
                            stop_at_boundary=False)
        s = float(np.clip(params[2], 0.0, s_cap))
        x0 = trajs[0].position(s)
        resid = chol.T @ (x0 - target)
        rnorm = float(np.linalg.norm(resid))
        if rnorm < 1e-12:
            break
        if start_norm is None:
            start_norm = rnorm
        elif _ >= 3 and rnorm > 1e-3 * start_norm:
            return None  # not converging towards an exact connection
        jac = np.column_stack([
            chol.T @ (trajs[1].position(s) - x0) / fd_step,
            chol.T @ (trajs[2].position(s) - x0) / fd_step,
            chol.T @ trajs[0].position_rate(s),
        ])
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        params = params + step
        s_cap = max(s_cap, 1.2 * params[2] + 1e-3)
        if np.linalg.norm(step) < 1e-13:
            break
        if np.linalg.norm(params[:2]) > 1.0:
            return None
    d = dirs_for(params[:2])
    vec = unit_null(spec, q, d)[0]
    traj = trace_batch(spec, q, vec, direction, s_max=s_cap, stop_at_boundary=False)[0]
    resid = chol.T @ (traj.position(params[2]) - target)
    return SecondSeed(d, vec, float(params[2]), float(np.linalg.norm(resid)))


# ---------------------------------------------------------------- cut parameter

@dataclass
class CutReport:
    rho: Optional[float]          # None means none within the domain
    cause: str                    # conjugate, second_geodesic or undetected
    s_exit: float
    certificate: dict

    def to_dict(self):
        return {"rho": self.rho, "cause": self.cause, "s_exit": self.s_exit,
                "certificate": self.certificate}


def null_cut_parameter(spec: MetricSpec, q, v, direction: int = 1, cone_samples: int = 512,
                       n_targets: int = 32, fan: Optional[Fan] = None, s_limit: Optional[float] = None,
                       trajectory: Optional[Trajectory] = None,
                       conjugate: Optional[ConjugateScan] = None) -> CutReport:
    """rho(q, v) = min(first conjugate, first second-connection), parameter of the supplied v."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    traj = trajectory or trace_batch(spec, q, v, direction)[0]
    s_exit = traj.s_end
    scan = conjugate or first_conjugate_batch(spec, [traj])[0]
    limit = s_exit if s_limit is None else min(s_exit, s_limit)
    s_conj = scan.s_conjugate if scan.s_conjugate is not None and scan.s_conjugate <= limit else None
    search_end = limit if s_conj is None else s_conj
    if fan is None:
        fan = build_fan(spec, q, cone_samples, direction)
    # with a conjugate point the last target would sit on the caustic itself
    count = n_targets if s_conj is None else n_targets - 1
    grid = search_end * np.arange(1, count + 1) / n_targets
    s_second, seed = None, None
    prev = 0.0
    for s_t in grid:
        target = traj.position(s_t)
        hit = second_geodesic_search(spec, q, target, v, fan=fan, direction=direction)
        if hit is not None:
            lo, hi, seed = prev, s_t, hit
            for _ in range(6):
                mid = 0.5 * (lo + hi)
                probe = second_geodesic_search(spec, q, traj.position(mid), v, fan=fan,
                                               direction=direction)
                if probe is None:
                    lo = mid
                else:
                    hi, seed = mid, probe
            s_second = hi
            break
        prev = s_t
    bracket = search_end / n_targets
    cert = {"jacobi_grid": len(scan.grid), "targets": int(n_targets), "cone_samples": len(fan.directions)}
    if s_conj is not None and (s_second is None or s_conj <= s_second + bracket):
        cert.update(kind=scan.kind, determinant_min=float(np.min(np.abs(scan.determinant))))
        return CutReport(float(s_conj), "conjugate", s_exit, cert)
    if s_second is not None:
        cert.update(second_direction=seed.direction.tolist(), residual=seed.residual)
        return CutReport(float(s_second), "second_geodesic", s_exit, cert)
    return CutReport(None, "undetected", s_exit, cert)


# ---------------------------------------------------------------- certificates

@dataclass
class Certificate:
    certified: bool
    margin: float
    samples: int
    seeds_per_point: int
    failures: list

    def to_dict(self):
        return {"certified": self.certified, "margin": self.margin, "samples": self.samples,
                "seeds_per_point": self.seeds_per_point, "failures": self.failures[:20]}


def _region_exit(traj: Trajectory, region: Callable, count: int = 128) -> float:
    s = np.linspace(0.0, traj.s_end, count)
    inside = np.asarray(region(traj.position(s)), dtype=bool)
    outside = np.flatnonzero(~inside[1:]) + 1
    if not outside.size:
        return traj.s_end
    i = int(outside[0])
    lo, hi = s[i - 1], s[i]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if bool(np.asarray(region(traj.position(mid)[None]))[0]):
            lo = mid
        else:
            hi = mid
    return lo


def no_cut_certificate(spec: MetricSpec, points, seeds_per_point: int = 16,
                       region: Optional[Callable] = None, cone_samples: int = 512,
                       n_targets: int = 32, trust_conformal_flatness: bool = True) -> Certificate:
    """Check that no sampled null segment inside ``region`` reaches its cut point.

    ``region`` is a vectorized membership predicate on points (defaults to the
    open diamond).  For conformally flat metrics the null geodesics are
    straight lines, which never have cut points inside the diamond, so the
    search is skipped when ``trust_conformal_flatness`` is set.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    region = region or (lambda pts: in_diamond(pts))
    dirs = fibonacci_sphere(seeds_per_point)
    margin = np.inf
    failures = []
    for point in points:
        vecs = unit_null(spec, point, dirs)
        trajs = trace_batch(spec, np.broadcast_to(point, (len(dirs), 4)), vecs, 1)
        exits = np.array([_region_exit(t, region) for t in trajs])
        if spec.conformally_flat and trust_conformal_flatness:
            margin = min(margin, float(np.min([t.s_end for t in trajs] - exits)))
            continue
        scans = first_conjugate_batch(spec, trajs)
        fan = build_fan(spec, point, cone_samples, 1)
        for traj, vec, scan, s_reg in zip(trajs, vecs, scans, exits):
            report = null_cut_parameter(spec, point, vec, 1, fan=fan, s_limit=s_reg,
                                        n_targets=n_targets, trajectory=traj, conjugate=scan)
            s_cut = report.rho if report.rho is not None else traj.s_end
            margin = min(margin, s_cut - s_reg)
            if report.rho is not None and report.rho <= s_reg:
                failures.append({"point": point.tolist(), "vector": vec.tolist(),
                                 "rho": report.rho, "cause": report.cause})
    return Certificate(not failures, float(margin), len(points), seeds_per_point, failures)
