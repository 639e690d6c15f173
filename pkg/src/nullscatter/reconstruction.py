"""Reconstruction of light observation sets, points, charts and conformal class.

Everything here except ``point_recovery`` consumes relation records and
boundary data only; the metric is never imported at module level.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .boundary import BoundaryLightVector, generator_direction
from .config import Sampling, Tolerances
from .errors import (DegenerateCurveFamily, InsufficientData, LibraryRequired, OutsideRange,
                     RadicalDegenerateScreen, UnderdeterminedFit)
from .sampling import orthonormal_complement


# ---------------------------------------------------------------- direction sets

class DirectionSet:
    """Finite sample of boundary light vectors on U+ (one observation set)."""

    def __init__(self, members: Iterable[BoundaryLightVector] = (), distinct: float = 1e-6, label=None):
        uniq, seen = [], []
        for v in members:
            emb = np.concatenate([v.p, v.ray[1:]])
            if any(np.linalg.norm(emb - e) < distinct for e in seen):
                continue
            seen.append(emb)
            uniq.append(v)
        self.members: list[BoundaryLightVector] = uniq
        self.label = label
        self.distinct = distinct

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def points(self) -> np.ndarray:
        return np.array([v.p for v in self.members]).reshape(-1, 4)

    @property
    def rays(self) -> np.ndarray:
        return np.array([v.ray for v in self.members]).reshape(-1, 4)

    def embedding(self) -> np.ndarray:
        """Metric-free coordinates (p, spatial part of w/w_T) on the bundle."""
        return np.concatenate([self.points, self.rays[:, 1:]], axis=1)

    def subset(self, mask) -> "DirectionSet":
        mask = np.asarray(mask)
        if mask.dtype == bool:
            chosen = [v for v, keep in zip(self.members, mask) if keep]
        else:
            chosen = [self.members[i] for i in mask]
        out = DirectionSet(distinct=self.distinct, label=self.label)
        out.members = chosen
        return out

    def keys(self) -> set:
        return {v.key() for v in self.members}

    def hausdorff(self, other: "DirectionSet") -> float:
        if not len(self) or not len(other):
            return np.inf
        a, b = self.embedding(), other.embedding()
        da = cKDTree(b).query(a)[0]
        db = cKDTree(a).query(b)[0]
        return float(max(da.max(), db.max()))

    def grid_scale(self) -> float:
        """Median nearest-neighbour distance of the projected points."""
        if len(self) < 2:
            return np.inf
        dist, _ = cKDTree(self.points).query(self.points, k=2)
        return float(np.median(dist[:, 1]))

    def to_dict(self) -> dict:
        return {"label": self.label, "members": [v.to_dict() for v in self.members]}


# ---------------------------------------------------------------- local surface fits on S+

def chart_basis(center):
    center = np.asarray(center, dtype=float)
    center = center / np.linalg.norm(center)
    e1, e2 = orthonormal_complement(center)
    return center, e1, e2


def gnomonic(points, center) -> np.ndarray:
    """Gnomonic coordinates of the generator directions of boundary points."""
    c, e1, e2 = chart_basis(center)
    dirs = generator_direction(points)
    dots = dirs @ c
    return np.column_stack([dirs @ e1, dirs @ e2]) / dots[:, None]


def _design(uv, degree=2):
    u, v = uv[:, 0], uv[:, 1]
    cols = [np.ones_like(u), u, v]
    if degree >= 2:
        cols += [u * u, u * v, v * v]
    if degree >= 3:
        cols += [u ** 3, u * u * v, u * v * v, v ** 3]
    return np.column_stack(cols)


@dataclass
class LocalSurface:
    """Quadratic graph T = f(u) of an observation set near a generator."""

    center: np.ndarray
    coeffs: np.ndarray
    rms: float
    count: int
    radius: float

    def __call__(self, uv):
        return _design(np.atleast_2d(uv)) @ self.coeffs

    def at_points(self, points):
        return self(gnomonic(points, self.center))

    def gradient(self, uv):
        uv = np.atleast_2d(uv)
        c = self.coeffs
        du = c[1] + 2 * c[3] * uv[:, 0] + c[4] * uv[:, 1]
        dv = c[2] + c[4] * uv[:, 0] + 2 * c[5] * uv[:, 1]
        return np.column_stack([du, dv])

    def normal(self, uv):
        grad = self.gradient(uv)[0]
        n = np.array([-grad[0], -grad[1], 1.0])
        return n / np.linalg.norm(n)


def fit_surface(points, center, weights=None) -> LocalSurface:
    points = np.atleast_2d(points)
    if len(points) < 6:
        raise InsufficientData(f"insufficient data: {len(points)} points for a surface fit")
    uv = gnomonic(points, center)
    # centre the chart on the anchor generator
    design = _design(uv)
    target = points[:, 0]
    w = np.ones(len(points)) if weights is None else np.asarray(weights, dtype=float)
    coeffs, *_ = np.linalg.lstsq(design * w[:, None], target * w, rcond=None)
    resid = target - design @ coeffs
    slope = np.linalg.norm(coeffs[1:3])
    rms = float(np.sqrt(np.mean(resid ** 2)) / np.sqrt(1 + slope ** 2))
    radius = float(np.max(np.linalg.norm(uv, axis=1)))
    return LocalSurface(np.asarray(center, dtype=float), coeffs, rms, len(points), radius)


def local_fit(dset: DirectionSet, anchor, k: int, exclude_self=False) -> LocalSurface:
    pts = dset.points
    k_eff = min(k + (1 if exclude_self else 0), len(pts))
    _, idx = cKDTree(pts).query(np.asarray(anchor)[None], k=k_eff)
    idx = np.atleast_1d(idx[0])
    center = np.asarray(anchor)[1:]
    return fit_surface(pts[idx], center)


# ---------------------------------------------------------------- set operations

def local_dimension(embedding: np.ndarray, k: int, ratio: float = 0.1) -> np.ndarray:
    """Number of dominant PCA directions of each k-neighbourhood."""
    n = len(embedding)
    if n < 3:
        return np.zeros(n, dtype=int)
    k_eff = min(k + 1, n)
    _, idx = cKDTree(embedding).query(embedding, k=k_eff)
    dims = np.zeros(n, dtype=int)
    for i in range(n):
        nb = embedding[idx[i]]
        sv = np.linalg.svd(nb - nb.mean(axis=0), compute_uv=False)
        dims[i] = int(np.sum(sv > ratio * sv[0])) if sv[0] > 0 else 0
    return dims


def conical_piece(tuples: Sequence, v1: BoundaryLightVector, v2: BoundaryLightVector,
                  distinct: float = 1e-6) -> DirectionSet:
    """Observations related to the source pair (v1, v2) with some third source."""
    k1, k2 = v1.key(), v2.key()
    out = []
    for t in tuples:
        if not t.verdict:
            continue
        keys = {s.key() for s in t.sources}
        if k1 in keys and k2 in keys and k1 != k2:
            out.append(t.v0)
    return DirectionSet(out, distinct)


def candidate_cone(pieces: Sequence[DirectionSet], k: int = 12, dimension: int = 2,
                   distinct: float = 1e-6):
    """Union of conical pieces kept where the sample is locally a 2-sheet.

    Returns the set and a diagnostic string (empty when fine).
    """
    merged = DirectionSet([v for piece in pieces for v in piece], distinct)
    if len(merged) < 7:
        return DirectionSet(distinct=distinct), "insufficient sampling"
    dims = local_dimension(merged.embedding(), min(k, len(merged) - 1))
    keep = dims == dimension
    if not keep.any():
        return DirectionSet(distinct=distinct), "insufficient sampling"
    return merged.subset(keep), ""


def earliest_part(dset: DirectionSet, generator_tol: float = 0.05, lipschitz: float = 1.0,
                  distinct: float = 1e-6) -> DirectionSet:
    """Drop members that another member precedes along (nearly) the same generator.

    Exact generator coincidences never occur in samples, so a neighbour at
    generator angle theta counts as earlier when it is earlier by more than
    lipschitz * theta + distinct.
    """
    if len(dset) == 0:
        return dset
    dirs = generator_direction(dset.points)
    times = dset.points[:, 0]
    tree = cKDTree(dirs)
    keep = np.ones(len(dset), dtype=bool)
    for i, nbrs in enumerate(tree.query_ball_point(dirs, 2 * np.sin(generator_tol / 2))):
        nbrs = np.array([j for j in nbrs if j != i], dtype=int)
        if nbrs.size == 0:
            continue
        ang = np.arccos(np.clip(dirs[nbrs] @ dirs[i], -1, 1))
        if np.any(times[nbrs] + lipschitz * ang < times[i] - distinct):
            keep[i] = False
    return dset.subset(keep)


def smooth_part(dset: DirectionSet, k: int = 12, smooth_tol: float = 1e-4, min_neighbors: int = 6):
    """Members whose projected neighbourhood is a smooth graph over the generators.

    Returns (set, diagnostics) where diagnostics maps member index to a reason.
    """
    n = len(dset)
    diag: dict = {}
    k_eff = min(k, n - 1)
    if n == 0 or k_eff < min_neighbors:
        for i in range(n):
            diag[i] = f"fewer than {min_neighbors} neighbours"
        return dset.subset(np.zeros(n, dtype=bool)), diag
    pts = dset.points
    _, idx = cKDTree(pts).query(pts, k=k_eff + 1)
    keep = np.zeros(n, dtype=bool)
    for i in range(n):
        try:
            fit = fit_surface(pts[idx[i]], pts[i, 1:])
        except InsufficientData as exc:
            diag[i] = str(exc)
            continue
        if fit.rms < smooth_tol:
            keep[i] = True
        else:
            diag[i] = f"fit rms {fit.rms:.2e}"
    return dset.subset(keep), diag


# ---------------------------------------------------------------- tangency and order

@dataclass
class TangencyRecord:
    point: np.ndarray
    angle: float
    verdict: str            # tangential | transversal
    ordering: str           # "<", ">", incomparable
    method: str             # ray (shared member) or plane (fitted planes)
    fits: tuple = ()

    @property
    def tangential(self) -> bool:
        return self.verdict == "tangential"


def _shared_member(a: DirectionSet, b: DirectionSet, p, distinct):
    ea, eb = a.embedding(), b.embedding()
    ia = np.where(np.linalg.norm(a.points - p, axis=1) < distinct)[0]
    ib = np.where(np.linalg.norm(b.points - p, axis=1) < distinct)[0]
    best = None
    for i in ia:
        for j in ib:
            d = np.linalg.norm(ea[i, 4:] - eb[j, 4:])
            if best is None or d < best[0]:
                best = (d, i, j)
    return best


def compare_order(earlier: DirectionSet, later_fit: LocalSurface, p, radius: float,
                  tol: float, distinct: float) -> str:
    """'<' when the members of ``earlier`` near p are on or before the fitted surface."""
    pts = earlier.points
    near = np.linalg.norm(pts[:, 1:] - p[1:], axis=1) < radius
    near &= np.linalg.norm(pts - p, axis=1) > distinct
    if not near.any():
        return "incomparable"
    diff = pts[near, 0] - later_fit.at_points(pts[near])
    if np.all(diff <= tol) and np.any(diff < -tol):
        return "<"
    if np.all(diff >= -tol) and np.any(diff > tol):
        return ">"
    return "incomparable"


def tangency_order(ca: DirectionSet, cb: DirectionSet, p, k: int = 12, theta_tan: float = 1e-3,
                   distinct: float = 1e-6, radius: Optional[float] = None) -> TangencyRecord:
    """Tangency of two observation sets at p and their order along generators there."""
    p = np.asarray(p, dtype=float)
    for name, s in (("first", ca), ("second", cb)):
        if len(s) == 0 or np.min(np.linalg.norm(s.points - p, axis=1)) > max(distinct, 1e-3):
            raise InsufficientData(f"insufficient data: {name} set has no member near {p.tolist()}")
    if ca.keys() == cb.keys():
        return TangencyRecord(p, 0.0, "tangential", "incomparable", "ray")
    fa = local_fit(ca, p, k)
    fb = local_fit(cb, p, k)
    shared = _shared_member(ca, cb, p, distinct)
    if shared is not None:
        method = "ray"
        angle = float(shared[0])
    else:
        method = "plane"
        uv = gnomonic(p[None], p[1:])
        angle = float(np.arccos(np.clip(fa.normal(uv) @ fb.normal(uv), -1, 1)))
    if angle >= theta_tan:
        return TangencyRecord(p, angle, "transversal", "incomparable", method, (fa, fb))
    if radius is None:
        radius = 3 * max(ca.grid_scale(), cb.grid_scale())
    # each comparison is only as sharp as the fit it is measured against
    order = compare_order(ca, fb, p, radius, 3 * fb.rms + 1e-12, distinct)
    if order == "incomparable":
        flipped = compare_order(cb, fa, p, radius, 3 * fa.rms + 1e-12, distinct)
        order = {"<": ">", ">": "<"}.get(flipped, "incomparable")
    return TangencyRecord(p, angle, "tangential", order, method, (fa, fb))


def regular_part(c_ear: DirectionSet, library: Sequence[DirectionSet], k: int = 12,
                 theta_tan: float = 1e-3, distinct: float = 1e-6, radius: Optional[float] = None):
    """Keep members at which some library set touches from the past.

    Returns (set, per-member diagnostics).
    """
    if not library:
        raise LibraryRequired("library required: no smooth sets to compare with")
    if len(c_ear) == 0:
        return c_ear, {}
    keep = np.zeros(len(c_ear), dtype=bool)
    diag = {}
    own_keys = c_ear.keys()
    libs = [lib for lib in library if len(lib) and lib.keys() != own_keys]
    if libs:
        owner = np.concatenate([np.full(len(lib), i) for i, lib in enumerate(libs)])
        tree = cKDTree(np.vstack([lib.points for lib in libs]))
    for i, v in enumerate(c_ear.members):
        hits = sorted({int(owner[j]) for j in tree.query_ball_point(v.p, distinct)}) if libs else []
        for li in hits:
            try:
                rec = tangency_order(libs[li], c_ear, v.p, k, theta_tan, distinct, radius)
            except InsufficientData:
                continue
            if rec.tangential and rec.ordering == "<":
                keep[i] = True
                break
        if not keep[i]:
            diag[i] = "no earlier tangential library set"
    return c_ear.subset(keep), diag


# ---------------------------------------------------------------- relation index

class RelationIndex:
    """Member tuples grouped by the interior point their geodesics share.

    Two distinct null geodesics meet at most once in a certified region, so a
    pair of vectors from one member tuple determines its point; tuples that
    share such a pair share the point.
    """

    def __init__(self, tuples: Sequence):
        self.tuples = [t for t in tuples if t.verdict]
        self.vectors: dict = {}
        parent: dict = {}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        self.pair_of_tuple = []
        for t in self.tuples:
            keys = [t.v0.key()]
            for s in t.sources:
                self.vectors.setdefault(s.key(), s)
                keys.append(s.key())
            self.vectors.setdefault(t.v0.key(), t.v0)
            pairs = [tuple(sorted((keys[a], keys[b]))) for a, b in itertools.combinations(range(4), 2)]
            for pr in pairs:
                parent.setdefault(pr, pr)
            for pr in pairs[1:]:
                union(pairs[0], pr)
            self.pair_of_tuple.append(pairs[0])
        groups: dict = {}
        for i, pr in enumerate(self.pair_of_tuple):
            groups.setdefault(find(pr), []).append(i)
        self.groups = [groups[k] for k in sorted(groups, key=lambda g: min(groups[g]))]
        self.by_observation: dict = {}
        for i, t in enumerate(self.tuples):
            self.by_observation.setdefault(t.v0.key(), []).append(i)

    def group_tuples(self, g: int):
        return [self.tuples[i] for i in self.groups[g]]

    def sources_with(self, v0: BoundaryLightVector) -> set:
        out = set()
        for i in self.by_observation.get(v0.key(), []):
            out.update(s.key() for s in self.tuples[i].sources)
        return out


def v_one_membership(index: RelationIndex, v1: BoundaryLightVector, c_reg: DirectionSet,
                     v0: BoundaryLightVector, v0_tilde: BoundaryLightVector,
                     sheet_neighbors: int = 2, radius: Optional[float] = None) -> bool:
    """Is v1 in the common source sheet of two observations of the same point?"""
    if v0.key() == v0_tilde.key():
        return False
    keys = c_reg.keys()
    if v0.key() not in keys or v0_tilde.key() not in keys:
        return False
    common = index.sources_with(v0) & index.sources_with(v0_tilde)
    if v1.key() not in common:
        return False
    emb = np.array([np.concatenate([index.vectors[k].p, index.vectors[k].ray[1:]]) for k in common])
    here = np.concatenate([v1.p, v1.ray[1:]])
    dist = np.linalg.norm(emb - here, axis=1)
    if radius is None:
        if len(emb) < 2:
            return False
        nn = cKDTree(emb).query(emb, k=2)[0][:, 1]
        radius = 3 * float(np.median(nn))
    return int(np.sum((dist > 0) & (dist <= radius))) >= sheet_neighbors


@dataclass
class ReconstructedSet:
    label: int
    candidate: DirectionSet
    earliest: DirectionSet
    smooth: DirectionSet
    regular: DirectionSet
    sources: list
    anchors: tuple = ()
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"label": self.label, "sizes": {"candidate": len(self.candidate),
                "earliest": len(self.earliest), "smooth": len(self.smooth),
                "regular": len(self.regular)},
                "regular": [v.to_dict() for v in self.regular],
                "sources": [v.to_dict() for v in self.sources],
                "diagnostics": self.diagnostics}


@dataclass
class ReconstructionResult:
    sets: list
    library: list
    merged: int
    diagnostics: list


def reconstruct_all(tuples: Sequence, sampling: Optional[Sampling] = None,
                    tolerances: Optional[Tolerances] = None) -> ReconstructionResult:
    """Rebuild deduplicated regular observation sets from relation records alone."""
    sampling = sampling or Sampling()
    tol = tolerances or Tolerances()
    index = RelationIndex(tuples)
    stages = []
    diagnostics = []
    for g in range(len(index.groups)):
        group = index.group_tuples(g)
        cand, note = candidate_cone([DirectionSet((t.v0 for t in group), tol.distinct)],
                                    sampling.k_neighbors)
        if note:
            diagnostics.append({"group": g, "stage": "candidate", "note": note})
        ear = earliest_part(cand, sampling.generator_tol, sampling.lipschitz, tol.distinct)
        smooth, sdiag = smooth_part(ear, sampling.k_neighbors, tol.smooth)
        srcs = {s.key(): s for t in group for s in t.sources}
        stages.append((g, cand, ear, smooth, list(srcs.values())))
    library = [st[3] for st in stages if len(st[3])]
    out = []
    for g, cand, ear, smooth, srcs in stages:
        if len(smooth) < sampling.min_set_size:
            continue
        if not library:
            raise LibraryRequired("library required: no smooth sets to compare with")
        reg, rdiag = regular_part(smooth, library, sampling.k_neighbors, tol.theta_tan, tol.distinct)
        if len(reg) < 2:
            diagnostics.append({"group": g, "stage": "regular", "note": "fewer than two regular members"})
            continue
        anchors = _best_anchor_pair(index, reg)
        if anchors is None:
            diagnostics.append({"group": g, "stage": "v1", "note": "no anchor pair"})
            continue
        passing = [s for s in srcs if v_one_membership(index, s, reg, anchors[0], anchors[1])]
        if len(passing) < 2:
            diagnostics.append({"group": g, "stage": "v1", "note": "source pair fails the V1 test"})
            continue
        out.append(ReconstructedSet(g, cand, ear, smooth, reg, passing, anchors,
                                    {"removed_regular": len(rdiag)}))
    merged = 0
    kept: list = []
    for rs in out:
        scale = rs.regular.grid_scale()
        if any(rs.regular.hausdorff(o.regular) < scale for o in kept):
            merged += 1
            continue
        kept.append(rs)
    return ReconstructionResult(kept, library, merged, diagnostics)


def _best_anchor_pair(index: RelationIndex, reg: DirectionSet):
    best, score = None, 1
    members = reg.members
    with_sources = [(v, index.sources_with(v)) for v in members]
    with_sources = [(v, s) for v, s in with_sources if len(s) > 2]
    for (va, sa), (vb, sb) in itertools.combinations(with_sources, 2):
        common = len(sa & sb)
        if common > score:
            best, score = (va, vb), common
    return best


# ---------------------------------------------------------------- ground-truth audit (test oracle)

@dataclass
class PointEstimate:
    point: np.ndarray
    residual: float
    rays: int
    ill_posed: bool


def point_recovery(spec, c_reg: DirectionSet, iterations: int = 20) -> PointEstimate:
    """Least-squares closest point to the backward null geodesics of a set.

    Test oracle only: needs the true metric.
    """
    from .geodesics import trace_batch

    n = len(c_reg)
    if n == 0:
        raise InsufficientData("insufficient data: empty set")
    trajs = trace_batch(spec, c_reg.points, c_reg.rays, -1)
    anchors = c_reg.points.copy()
    tangents = c_reg.rays.copy()
    params = np.zeros(n)

    def solve(anchors, tangents):
        lhs = np.zeros((4, 4))
        rhs = np.zeros(4)
        for x, t in zip(anchors, tangents):
            u = t / np.linalg.norm(t)
            proj = np.eye(4) - np.outer(u, u)
            lhs += proj
            rhs += proj @ x
        sv = np.linalg.svd(lhs, compute_uv=False)
        return np.linalg.lstsq(lhs, rhs, rcond=None)[0], sv[-1] / sv[0]

    q, cond = solve(anchors, tangents)
    ill = n < 2 or cond < 1e-8
    for _ in range(iterations):
        for i, tr in enumerate(trajs):
            s = params[i]
            for _ in range(20):
                x = tr.position(s)
                rate = tr.position_rate(s)
                step = -(rate @ (x - q)) / (rate @ rate)
                s = float(np.clip(s + step, 0.0, tr.s_end))
                if abs(step) < 1e-15:
                    break
            params[i] = s
            anchors[i] = tr.position(s)
            tangents[i] = tr.position_rate(s)
        new_q, cond = solve(anchors, tangents)
        moved = np.linalg.norm(new_q - q)
        q = new_q
        if moved < 1e-14:
            break
    resid = np.array([np.linalg.norm((np.eye(4) - np.outer(t, t) / (t @ t)) @ (q - x))
                      for x, t in zip(anchors, tangents)])
    return PointEstimate(q, float(np.sqrt(np.mean(resid ** 2))), n, bool(ill or cond < 1e-8))


# ---------------------------------------------------------------- smooth structure

def earliest_observation_time(dset: DirectionSet, curve: Callable, s_range, k: int = 12,
                              samples: int = 64) -> float:
    """Parameter at which the boundary curve meets the fitted observation surface."""
    lo, hi = s_range
    svals = np.linspace(lo, hi, samples)
    pts = np.atleast_2d(curve(svals))
    if len(dset) < 6:
        raise InsufficientData("insufficient data: set too small for a surface fit")
    tree = cKDTree(generator_direction(dset.points))
    dist, _ = tree.query(generator_direction(pts))
    reach = 3 * dset.grid_scale() + 1e-12

    def signed(s):
        x = np.atleast_2d(curve(s))[0]
        fit = local_fit(dset, _nearest_on_set(dset, x), k)
        return x[0] - fit.at_points(x[None])[0]

    vals = np.array([signed(s) if d < reach else np.nan for s, d in zip(svals, dist)])
    roots = []
    for i in range(samples - 1):
        a, b = vals[i], vals[i + 1]
        if np.isnan(a) or np.isnan(b):
            continue
        if a == 0.0:
            roots.append(svals[i])
        elif a * b < 0:
            roots.append(brentq(signed, svals[i], svals[i + 1], xtol=1e-14, rtol=1e-14))
    if len(roots) != 1:
        raise OutsideRange(f"outside R(mu): {len(roots)} crossings with the observation set")
    return float(roots[0])


def _nearest_on_set(dset: DirectionSet, x):
    dirs = generator_direction(dset.points)
    target = generator_direction(x[None])[0]
    i = int(np.argmax(dirs @ target))
    anchor = dset.points[i].copy()
    return anchor


@dataclass
class Chart:
    curves: list
    jacobian: np.ndarray
    sigma_ratio: float
    center: np.ndarray
    selected: tuple

    def to_dict(self):
        return {"center": self.center.tolist(), "selected": list(self.selected),
                "jacobian": self.jacobian.tolist(), "sigma_ratio": self.sigma_ratio,
                "curves": [getattr(c, "to_dict", lambda: repr(c))() for c in self.curves]}


def coordinate_jacobian(set_at: Callable, center, curves: Sequence, s_ranges: Sequence,
                        step: float = 1e-3, k: int = 12) -> np.ndarray:
    """Central-difference Jacobian of the earliest observation times at ``center``."""
    center = np.asarray(center, dtype=float)
    jac = np.zeros((len(curves), 4))
    for axis in range(4):
        offset = np.zeros(4)
        offset[axis] = step
        plus, minus = set_at(center + offset), set_at(center - offset)
        for row, (curve, rng) in enumerate(zip(curves, s_ranges)):
            jac[row, axis] = (earliest_observation_time(plus, curve, rng, k)
                              - earliest_observation_time(minus, curve, rng, k)) / (2 * step)
    return jac


def chart_build(jacobian: np.ndarray, curves: Sequence, center, sigma_chart: float = 1e-4) -> Chart:
    """Pick the 4 curves whose coordinate Jacobian is best conditioned."""
    jacobian = np.asarray(jacobian, dtype=float)
    if len(curves) < 4:
        raise DegenerateCurveFamily("degenerate curve family: fewer than 4 curves")
    best = None
    for combo in itertools.combinations(range(len(curves)), 4):
        sub = jacobian[list(combo)]
        sv = np.linalg.svd(sub, compute_uv=False)
        ratio = sv[-1] / sv[0] if sv[0] > 0 else 0.0
        if best is None or ratio > best[0]:
            best = (ratio, combo)
    ratio, combo = best
    if ratio <= sigma_chart:
        raise DegenerateCurveFamily(f"degenerate curve family: best sigma ratio {ratio:.2e}")
    return Chart([curves[i] for i in combo], jacobian[list(combo)], float(ratio),
                 np.asarray(center, dtype=float), combo)


# ---------------------------------------------------------------- conformal class

def _quadratic_rows(rays):
    rays = np.atleast_2d(rays)
    rows = []
    for v in rays:
        row = []
        for i in range(4):
            for j in range(i, 4):
                row.append(v[i] * v[j] * (1.0 if i == j else 2.0))
        rows.append(row)
    return np.array(rows)


def _sym_from(vec):
    q = np.zeros((4, 4))
    k = 0
    for i in range(4):
        for j in range(i, 4):
            q[i, j] = q[j, i] = vec[k]
            k += 1
    return q


@dataclass
class ConformalFit:
    form: np.ndarray
    residual: float
    rank: int
    rays: int

    def to_dict(self):
        return {"Q": self.form.tolist(), "residual": self.residual, "rank": self.rank, "rays": self.rays}


def conformal_recover(rays, rank_tol: float = 1e-9) -> ConformalFit:
    """Unit-Frobenius quadratic form vanishing on the given null rays, Q(dT,dT) < 0."""
    rays = np.atleast_2d(np.asarray(rays, dtype=float))
    rays = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    rows = _quadratic_rows(rays)
    if len(rows) < 9:
        raise UnderdeterminedFit(f"underdetermined conformal fit: {len(rows)} rays, need 9")
    _, sv, vt = np.linalg.svd(rows, full_matrices=True)
    rank = int(np.sum(sv > rank_tol * sv[0]))
    if rank < 9:
        raise UnderdeterminedFit(f"underdetermined conformal fit: rank {rank} < 9")
    form = _sym_from(vt[-1])
    form /= np.linalg.norm(form)
    if form[0, 0] > 0:
        form = -form
    resid = float(np.sqrt(np.mean((rows @ vt[-1]) ** 2)))
    return ConformalFit(form, resid, rank, len(rays))


def normalized_form_distance(a, b) -> float:
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    if a[0, 0] > 0:
        a = -a
    if b[0, 0] > 0:
        b = -b
    return float(np.linalg.norm(a - b))


def ray_from_family(points: Sequence, parameters: Sequence) -> np.ndarray:
    """Tangent direction at the middle of a curve of recovered points (finite differences)."""
    pts = np.asarray(points, dtype=float)
    par = np.asarray(parameters, dtype=float)
    if len(pts) < 2:
        raise InsufficientData("insufficient data: need two points on the family")
    coeffs = np.polyfit(par, pts, min(2, len(pts) - 1))
    deriv = coeffs[-2]
    ray = deriv / np.linalg.norm(deriv)
    return ray if ray[0] > 0 else -ray


def screen_to_ray(g_matrix, p, screen, tol: float = 1e-10) -> np.ndarray:
    """Future transversal null ray orthogonal to a spacelike screen inside T_p S+.

    ``g_matrix`` is the (conformal) metric at p; ``screen`` holds two tangent
    vectors of S+ as rows.
    """
    g = np.asarray(g_matrix, dtype=float)
    p = np.asarray(p, dtype=float)
    screen = np.atleast_2d(np.asarray(screen, dtype=float))
    normal = np.concatenate([[1.0], p[1:] / np.linalg.norm(p[1:])])
    if np.max(np.abs(screen @ normal)) > tol * np.max(np.abs(screen)):
        raise RadicalDegenerateScreen("radical-degenerate screen: vectors not tangent to S+")
    generator = np.concatenate([[1.0], -p[1:] / np.linalg.norm(p[1:])])
    basis = np.column_stack([screen.T, generator])
    sv = np.linalg.svd(basis, compute_uv=False)
    if sv[-1] <= tol * sv[0]:
        raise RadicalDegenerateScreen("radical-degenerate screen: contains the null generator")
    # orthogonal complement of the screen under g
    constraint = screen @ g
    _, _, vt = np.linalg.svd(constraint)
    comp = vt[2:].T
    small = comp.T @ g @ comp
    evals, evecs = np.linalg.eigh(small)
    if evals[0] >= 0 or evals[1] <= 0:
        raise RadicalDegenerateScreen("radical-degenerate screen: complement not Lorentzian")
    lam = np.sqrt(-evals[0] / evals[1])
    cands = [comp @ (evecs[:, 0] + sgn * lam * evecs[:, 1]) for sgn in (1.0, -1.0)]
    gen_dir = generator / np.linalg.norm(generator)
    best = None
    for c in cands:
        c = c / np.linalg.norm(c)
        if c[0] < 0:
            c = -c
        par = abs(c @ gen_dir)
        if best is None or par < best[0]:
            best = (par, c)
    ray = best[1]
    return ray / ray[0]


def tangents_at(spec, c_reg: DirectionSet, q) -> np.ndarray:
    """Null tangents at q of the backward geodesics of a set (test oracle: needs the metric)."""
    from .geodesics import trace_batch

    q = np.asarray(q, dtype=float)
    out = []
    for tr in trace_batch(spec, c_reg.points, c_reg.rays, -1):
        sv, xs = tr.samples(128)
        s = float(sv[np.argmin(np.linalg.norm(xs - q, axis=1))])
        for _ in range(30):
            rate = tr.rate(s)
            step = -(rate @ (tr.position(s) - q)) / (rate @ rate)
            s = float(np.clip(s + step, 0.0, tr.s_end))
            if abs(step) < 1e-15:
                break
        tangent = tr.tangent(s)
        out.append(tangent / np.linalg.norm(tangent))
    return np.array(out)
