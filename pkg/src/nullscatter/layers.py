"""Layer stripping: boundary generators, null normal congruences and the task schedule.

Regions are indexed by two arrival levels.  For a point x,

    lam_plus(x)  = earliest time on S+ reached by a future null geodesic from x,
    lam_minus(x) = -(latest time on S- reached by a past null geodesic from x),

so that J^-(S+(A)) = {lam_plus <= A} and J^+(S-(B)) = {lam_minus <= B} inside M.
Every task is a cell A < lam_plus < A + D, B < lam_minus < B + D restricted
to the diamond of two boundary caps around one generator direction.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.spatial import ConvexHull, cKDTree

from .boundary import PatchSpec, boundary_generators, boundary_point  # noqa: F401  (re-export)
from .config import Sampling, Tolerances
from .cutlocus import Certificate, no_cut_certificate
from .errors import (DegenerateBase, InputError, ResolutionInsufficient, ScheduleError)
from .geodesics import Trajectory, trace_batch
from .metric import MetricSpec, in_diamond, inner, reference_norm
from .oracle import Crossing, VMinusSpec, build_V_minus
from .sampling import fibonacci_sphere, orthonormal_complement

log = logging.getLogger(__name__)

TIMES = ("future", "past")
ORIENTATIONS = ("inward", "outward")


# ---------------------------------------------------------------- normal null directions

def base_surface(side: str, level: float, directions) -> np.ndarray:
    """Points of S+(level) (T = level) or S-(level) (T = -level) over unit directions."""
    if side not in ("S+", "S-"):
        raise InputError(f"side must be S+ or S-, got {side!r}")
    if not 0.0 <= level < 1.0:
        raise InputError(f"level must lie in [0, 1), got {level}")
    t = level if side == "S+" else -level
    dirs = np.atleast_2d(directions)
    return np.array([boundary_point(side, d, t) for d in dirs])


def sphere_tangents(directions) -> tuple[np.ndarray, np.ndarray]:
    """Two spatial tangent vectors of the base 2-surface at each direction."""
    dirs = np.atleast_2d(directions)
    e1 = np.zeros((len(dirs), 4))
    e2 = np.zeros((len(dirs), 4))
    for i, d in enumerate(dirs):
        a, b = orthonormal_complement(d)
        e1[i, 1:], e2[i, 1:] = a, b
    return e1, e2


def normal_null_vectors(spec: MetricSpec, points, e1, e2, time: str = "future",
                        orientation: str = "inward") -> np.ndarray:
    """Future null vectors g-orthogonal to both base tangents.

    ``time`` says whether the geodesic is followed to the future or to the
    past; ``orientation`` says whether that motion decreases |X| (inward).
    Vectors are normalized to unit reference norm.
    """
    if time not in TIMES or orientation not in ORIENTATIONS:
        raise InputError(f"direction must be in {ORIENTATIONS} x {TIMES}")
    points = np.atleast_2d(points)
    g, _ = spec.metric_matrices(points)
    motion = 1.0 if time == "future" else -1.0
    out = np.zeros((len(points), 4))
    for i in range(len(points)):
        tangents = np.vstack([e1[i], e2[i]])
        sv = np.linalg.svd(tangents, compute_uv=False)
        if sv[-1] < 1e-10 * max(sv[0], 1e-300):
            raise DegenerateBase(f"degenerate base tangents at {points[i].tolist()}")
        basis = null_space(tangents @ g[i])
        gram = basis.T @ g[i] @ basis
        vals, vecs = np.linalg.eigh(gram)
        if not (vals[0] < 0 < vals[1]):
            raise DegenerateBase(f"normal plane not Lorentzian at {points[i].tolist()}")
        radial = points[i, 1:] / max(np.linalg.norm(points[i, 1:]), 1e-300)
        chosen = None
        for sign in (1.0, -1.0):
            c = vecs[:, 0] / np.sqrt(-vals[0]) + sign * vecs[:, 1] / np.sqrt(vals[1])
            w = basis @ c
            if w[0] < 0:
                w = -w
            inward = motion * (w[1:] @ radial) < 0
            if inward == (orientation == "inward"):
                chosen = w
        if chosen is None:
            raise DegenerateBase(f"no {orientation} normal at {points[i].tolist()}")
        out[i] = chosen
    return out / reference_norm(spec, points, out)[:, None]


# ---------------------------------------------------------------- congruence mesh

def _prism_tets(tri: np.ndarray, layer: int, count: int) -> np.ndarray:
    """Vertex indices (flattened ray*count + layer) of the 3 tetrahedra of one prism."""
    a0, b0, c0 = (tri * count + layer)
    a1, b1, c1 = (tri * count + layer + 1)
    return np.array([[a0, b0, c0, a1], [b0, c0, a1, b1], [c0, a1, b1, c1]])


@dataclass
class CongruenceMesh:
    """Hypersurface swept by normal null geodesics of S+(level) or S-(level)."""

    spec: MetricSpec = field(repr=False)
    side: str
    level: float
    time: str
    orientation: str
    directions: np.ndarray = field(repr=False)
    base: np.ndarray = field(repr=False)
    vectors: np.ndarray = field(repr=False)
    s_grid: np.ndarray = field(repr=False)
    vertices: np.ndarray = field(repr=False)       # (rays, layers, 4)
    valid_layers: np.ndarray = field(repr=False)   # per ray
    triangles: np.ndarray = field(repr=False)
    triangle_layers: np.ndarray = field(repr=False)  # valid layers per triangle
    normal_residual: np.ndarray = field(repr=False)
    trajectories: list = field(repr=False, default_factory=list)

    def __post_init__(self):
        self._tets = None
        self._tree = None

    @property
    def truncated(self) -> bool:
        return bool(np.all(self.triangle_layers <= 1))

    @property
    def trace_direction(self) -> int:
        return 1 if self.time == "future" else -1

    def tetrahedra(self):
        """(tets (N,4,4), owning triangle (N,))."""
        if self._tets is None:
            count = len(self.s_grid)
            idx, owner = [], []
            for m, tri in enumerate(self.triangles):
                for layer in range(int(self.triangle_layers[m]) - 1):
                    idx.append(_prism_tets(tri, layer, count))
                    owner.extend([m] * 3)
            flat = self.vertices.reshape(-1, 4)
            if idx:
                idx = np.concatenate(idx)
                self._tets = (flat[idx], np.array(owner), idx)
            else:
                self._tets = (np.zeros((0, 4, 4)), np.zeros(0, dtype=int), np.zeros((0, 4), dtype=int))
        return self._tets[0], self._tets[1]

    def _search(self):
        if self._tree is None:
            tets, _ = self.tetrahedra()
            if len(tets) == 0:
                self._tree = (None, 0.0)
            else:
                centers = tets.mean(axis=1)
                radius = float(np.max(np.linalg.norm(tets - centers[:, None], axis=2)))
                self._tree = (cKDTree(centers), radius)
        return self._tree

    def surface_point(self, direction, sigma: float, s_limit: float):
        """Position and parameter rate at ``sigma`` along the normal geodesic over ``direction``."""
        direction = np.atleast_2d(direction)
        direction = direction / np.linalg.norm(direction, axis=1, keepdims=True)
        pts = base_surface(self.side, self.level, direction)
        e1, e2 = sphere_tangents(direction)
        vec = normal_null_vectors(self.spec, pts, e1, e2, self.time, self.orientation)
        trajs = trace_batch(self.spec, pts, vec, self.trace_direction, s_max=s_limit)
        return trajs

    # crossings ---------------------------------------------------------
    def _linear_candidates(self, traj: Trajectory, samples: int = 256, slack: float = 1e-3):
        tree, radius = self._search()
        if tree is None:
            return []
        sv, xs = traj.samples(samples)
        p0, p1 = xs[:-1], xs[1:]
        half = 0.5 * np.linalg.norm(p1 - p0, axis=1)
        mids = 0.5 * (p0 + p1)
        tets, owner = self.tetrahedra()
        seg_idx, tet_idx = [], []
        for i, found in enumerate(tree.query_ball_point(mids, radius + half.max() + 1e-12)):
            seg_idx.extend([i] * len(found))
            tet_idx.extend(found)
        if not seg_idx:
            return []
        seg_idx = np.array(seg_idx)
        tet_idx = np.array(tet_idx)
        v0 = tets[tet_idx, 0]
        edges = tets[tet_idx, 1:] - v0[:, None]                # (K,3,4)
        delta = p1[seg_idx] - p0[seg_idx]
        mat = np.concatenate([delta[:, :, None], -np.transpose(edges, (0, 2, 1))], axis=2)
        rhs = v0 - p0[seg_idx]
        det = np.linalg.det(mat)
        scale = np.linalg.norm(delta, axis=1) * np.prod(np.linalg.norm(edges, axis=2), axis=1)
        ok = np.abs(det) > 1e-14 * np.maximum(scale, 1e-300)
        sol = np.full((len(mat), 4), np.nan)
        if ok.any():
            sol[ok] = np.linalg.solve(mat[ok], rhs[ok][:, :, None])[:, :, 0]
        tau, bary = sol[:, 0], sol[:, 1:]
        inside = (ok & (tau >= -slack) & (tau <= 1 + slack) & np.all(bary >= -slack, axis=1)
                  & (bary.sum(axis=1) <= 1 + slack))
        out = []
        for k in np.nonzero(inside)[0]:
            i = seg_idx[k]
            s = sv[i] + np.clip(tau[k], 0, 1) * (sv[i + 1] - sv[i])
            out.append((float(s), int(tet_idx[k]), bary[k]))
        out.sort(key=lambda item: item[0])
        return out

    def _refine(self, traj: Trajectory, s0: float, tet: int, bary, iters: int = 20,
                step: float = 1e-6, tol: float = 1e-12):
        """Newton on (s, base direction offsets, sigma) against freshly traced normal geodesics."""
        _, owner = self.tetrahedra()
        idx = self._tets[2][tet]
        count = len(self.s_grid)
        rays, layers = idx // count, idx % count
        weights = np.concatenate([[1 - np.sum(bary)], bary])
        center = weights @ self.directions[rays]
        center /= np.linalg.norm(center)
        f1, f2 = orthonormal_complement(center)
        sigma = float(weights @ self.s_grid[layers])
        s_limit = float(self.s_grid[min(layers.max() + 3, count - 1)]) * 1.05 + 1e-9
        xi = np.zeros(2)
        s = s0
        residual = np.inf
        jac = None
        for _ in range(iters):
            dirs = np.array([center + xi[0] * f1 + xi[1] * f2,
                             center + (xi[0] + step) * f1 + xi[1] * f2,
                             center + xi[0] * f1 + (xi[1] + step) * f2])
            trajs = self.surface_point(dirs, sigma, max(s_limit, sigma * 1.2))
            if sigma > trajs[0].s_end or not 0 <= s <= traj.s_end:
                return None
            phi = trajs[0].position(sigma)
            resid = traj.position(s) - phi
            residual = float(np.linalg.norm(resid))
            d1 = (trajs[1].position(sigma) - phi) / step
            d2 = (trajs[2].position(sigma) - phi) / step
            dsig = trajs[0].rate(sigma)
            jac = np.column_stack([traj.rate(s), -d1, -d2, -dsig])
            if residual < tol:
                break
            try:
                delta = np.linalg.solve(jac, -resid)
            except np.linalg.LinAlgError:
                return None
            s, xi, sigma = s + delta[0], xi + delta[1:3], sigma + delta[3]
        if residual > 1e-8 or jac is None:
            return None
        cols = jac / np.maximum(np.linalg.norm(jac, axis=0), 1e-300)
        transversal = abs(np.linalg.det(cols))
        direction = center + xi[0] * f1 + xi[1] * f2
        return s, residual, transversal, direction / np.linalg.norm(direction), sigma

    def crossings(self, traj: Trajectory, refine: bool = True, separation: float = 1e-6) -> list[Crossing]:
        """All distinct transversal crossings of a traced geodesic with the mesh, in order."""
        _, owner = self.tetrahedra()
        found: list[Crossing] = []
        for s0, tet, bary in self._linear_candidates(traj):
            if found and s0 - found[-1].parameter < 10 * separation + 1e-3 * traj.s_end:
                continue
            if refine:
                res = self._refine(traj, s0, tet, bary)
                if res is None:
                    continue
                s, residual, transversal, _, _ = res
            else:
                s, residual, transversal = s0, 0.0, 1.0
            if any(abs(s - c.parameter) < separation for c in found):
                continue
            found.append(Crossing(traj.position(s), traj.tangent(s), float(s), int(owner[tet]),
                                  float(residual), bool(transversal < 1e-8)))
        found.sort(key=lambda c: c.parameter)
        return found

    def first_crossing(self, traj: Trajectory, refine: bool = True) -> Optional[Crossing]:
        for s0, tet, bary in self._linear_candidates(traj):
            _, owner = self.tetrahedra()
            if not refine:
                return Crossing(traj.position(s0), traj.tangent(s0), float(s0), int(owner[tet]), 0.0)
            res = self._refine(traj, s0, tet, bary)
            if res is not None:
                s, residual, transversal, _, _ = res
                return Crossing(traj.position(s), traj.tangent(s), float(s), int(owner[tet]),
                                float(residual), bool(transversal < 1e-8))
        return None

    def vertex_check(self, resolution: int = 2) -> float:
        """Max distance of mesh vertices from geodesics retraced at finer step control."""
        worst = 0.0
        trajs = trace_batch(self.spec, self.base, self.vectors, self.trace_direction,
                            rtol=1e-12 / resolution, atol=1e-13 / resolution)
        for i, t in enumerate(trajs):
            k = int(self.valid_layers[i])
            if k == 0:
                continue
            pos = t.position(self.s_grid[:k])
            worst = max(worst, float(np.max(np.linalg.norm(pos - self.vertices[i, :k], axis=1))))
        return worst

    def summary(self) -> dict:
        return {"side": self.side, "level": float(self.level), "time": self.time,
                "orientation": self.orientation, "rays": int(len(self.base)),
                "layers": int(len(self.s_grid)), "triangles": int(len(self.triangles)),
                "tetrahedra": int(len(self.tetrahedra()[0])),
                "max_normal_residual": float(np.max(self.normal_residual)) if len(self.base) else 0.0,
                "truncated": self.truncated}


def _triangle_area(p0, p1, p2):
    u, v = p1 - p0, p2 - p0
    uu = np.einsum("...i,...i", u, u)
    vv = np.einsum("...i,...i", v, v)
    uv = np.einsum("...i,...i", u, v)
    return 0.5 * np.sqrt(np.clip(uu * vv - uv * uv, 0.0, None))


def _orientation(p0, p1, p2):
    """Sign of the spatial triangle normal against the spatial centroid direction."""
    normal = np.cross(p1[..., 1:] - p0[..., 1:], p2[..., 1:] - p0[..., 1:])
    center = (p0[..., 1:] + p1[..., 1:] + p2[..., 1:]) / 3.0
    return np.sign(np.einsum("...i,...i", normal, center))


def normal_null_congruence(spec: MetricSpec, side: str, level: float, time: str = "future",
                           orientation: str = "inward", rays: int = 256, layers: int = 24,
                           focal_ratio: float = 1e-2, interior_margin: float = 1e-10) -> CongruenceMesh:
    """Trace the chosen normal null congruence of S+(level) or S-(level) and mesh it.

    Rays are truncated at the first layer that leaves the open diamond; a
    triangle is truncated where its area collapses below ``focal_ratio`` of
    the base area or its orientation flips (neighbour rays crossing, the
    finite-difference signature of a focal point).
    """
    if rays < 4:
        raise InputError("need at least 4 base rays")
    if layers < 2:
        raise InputError("need at least 2 layers")
    dirs = fibonacci_sphere(rays)
    base = base_surface(side, level, dirs)
    e1, e2 = sphere_tangents(dirs)
    vecs = normal_null_vectors(spec, base, e1, e2, time, orientation)
    residual = np.maximum(np.abs(inner(spec, base, vecs, e1)), np.abs(inner(spec, base, vecs, e2)))
    direction = 1 if time == "future" else -1
    trajs = trace_batch(spec, base, vecs, direction)
    s_ends = np.array([t.s_end for t in trajs])
    s_grid = np.linspace(0.0, float(s_ends.max()), layers)
    verts = np.zeros((len(dirs), layers, 4))
    valid = np.zeros(len(dirs), dtype=int)
    for i, t in enumerate(trajs):
        verts[i] = t.position(s_grid)
        ok = (s_grid <= s_ends[i] + 1e-12) & in_diamond(verts[i], interior_margin)
        ok[0] = True
        bad = np.nonzero(~ok)[0]
        valid[i] = bad[0] if len(bad) else layers
    tris = ConvexHull(dirs).simplices
    tri_layers = np.min(valid[tris], axis=1)
    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    area = _triangle_area(p0, p1, p2)
    orient = _orientation(p0, p1, p2)
    collapse = (area < focal_ratio * area[:, :1]) | (orient != orient[:, :1])
    collapse[:, 0] = False
    for m in range(len(tris)):
        hit = np.nonzero(collapse[m])[0]
        if len(hit):
            tri_layers[m] = min(tri_layers[m], hit[0])
    # a vertex belongs to the mesh while some triangle through it is still untruncated
    used = np.zeros(len(dirs), dtype=int)
    for k in range(3):
        np.maximum.at(used, tris[:, k], tri_layers)
    valid = np.minimum(valid, used)
    return CongruenceMesh(spec, side, float(level), time, orientation, dirs, base, vecs, s_grid,
                          verts, valid, tris, tri_layers, residual, trajs)


# ---------------------------------------------------------------- arrival models

def _cap_cos(points, axes, half_angle: float):
    """|X| cos(max(0, angle(X, axis) - half_angle)) as an (N, G) array."""
    spatial = points[:, 1:]
    radius = np.linalg.norm(spatial, axis=1)
    unit = spatial / np.maximum(radius, 1e-300)[:, None]
    ang = np.arccos(np.clip(unit @ axes.T, -1.0, 1.0))
    return radius[:, None] * np.cos(np.maximum(ang - half_angle, 0.0))


class FlatArrival:
    """Closed-form arrival levels for metrics conformal to the flat diamond.

    Null geodesics of conformally related metrics coincide as point sets, so
    these formulas are exact for every conformally flat metric in the family.
    """

    exact = True

    def lam_plus(self, points):
        pts = np.atleast_2d(points)
        return 0.5 * (1 + pts[:, 0] - np.linalg.norm(pts[:, 1:], axis=1))

    def lam_minus(self, points):
        pts = np.atleast_2d(points)
        return 0.5 * (1 - pts[:, 0] - np.linalg.norm(pts[:, 1:], axis=1))

    def tau_plus(self, points, axes, half_angle: float = 0.0):
        """Earliest S+ time over generators in the cap, per (point, axis)."""
        pts = np.atleast_2d(points)
        c = _cap_cos(pts, np.atleast_2d(axes), half_angle)
        t = pts[:, 0][:, None]
        r2 = np.sum(pts[:, 1:] ** 2, axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = (1 - 2 * c + r2 - t * t) / (2 * (1 - t - c))
        return np.where(np.isnan(out), np.inf, out)

    def tau_minus(self, points, axes, half_angle: float = 0.0):
        """Latest S- time over generators in the cap, per (point, axis)."""
        pts = np.atleast_2d(points)
        c = _cap_cos(pts, np.atleast_2d(axes), half_angle)
        t = pts[:, 0][:, None]
        r2 = np.sum(pts[:, 1:] ** 2, axis=1)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -(1 - 2 * c + r2 - t * t) / (2 * (1 + t - c))
        return np.where(np.isnan(out), -np.inf, out)

    def corner(self, lam_p: float, lam_m: float, direction) -> np.ndarray:
        """Point with the given arrival levels over ``direction``."""
        a = np.asarray(direction, dtype=float)
        a = a / np.linalg.norm(a)
        return np.concatenate([[lam_p - lam_m], (1 - lam_p - lam_m) * a])


class TracedArrival:
    """Arrival levels from traced null fans (any metric; slow)."""

    exact = False

    def __init__(self, spec: MetricSpec, fan: int = 128):
        self.spec = spec
        self.dirs = fibonacci_sphere(fan)
        self._cache: dict = {}

    def _hits(self, point, direction: int):
        key = (direction,) + tuple(np.round(point, 13))
        hit = self._cache.get(key)
        if hit is None:
            from .cutlocus import unit_null
            vecs = unit_null(self.spec, point, self.dirs)
            trajs = trace_batch(self.spec, np.broadcast_to(point, (len(vecs), 4)), vecs, direction)
            pts = np.array([t.hit.point for t in trajs if t.hit is not None])
            hit = (pts[:, 0], pts[:, 1:] / np.linalg.norm(pts[:, 1:], axis=1, keepdims=True))
            self._cache[key] = hit
        return hit

    def _levels(self, points, direction, axes, half_angle, reduce):
        pts = np.atleast_2d(points)
        axes = np.atleast_2d(axes)
        out = np.full((len(pts), len(axes)), np.inf if reduce is np.min else -np.inf)
        for i, p in enumerate(pts):
            times, gens = self._hits(p, direction)
            if axes.shape[1] == 0:
                continue
            ang = np.arccos(np.clip(gens @ axes.T, -1, 1))
            for j in range(len(axes)):
                sel = ang[:, j] <= half_angle
                if sel.any():
                    out[i, j] = reduce(times[sel])
        return out

    def lam_plus(self, points):
        return np.array([np.min(self._hits(p, 1)[0]) for p in np.atleast_2d(points)])

    def lam_minus(self, points):
        return np.array([-np.max(self._hits(p, -1)[0]) for p in np.atleast_2d(points)])

    def tau_plus(self, points, axes, half_angle: float = 0.0):
        return self._levels(points, 1, axes, half_angle, np.min)

    def tau_minus(self, points, axes, half_angle: float = 0.0):
        return self._levels(points, -1, axes, half_angle, np.max)

    def corner(self, lam_p, lam_m, direction):
        return FlatArrival().corner(lam_p, lam_m, direction)


def arrival_model(spec: MetricSpec, fan: int = 128):
    return FlatArrival() if spec.conformally_flat else TracedArrival(spec, fan)


# ---------------------------------------------------------------- tasks

@dataclass
class LayerConfig:
    target: float = 0.5            # T0
    step: float = 0.25             # initial step parameter (halved by stabilization)
    delta_max: float = 0.5         # upper bound of the no-cut radius search
    generators: int = 128          # generator directions per level
    cap_margin: float = 1.15       # cap half-angle over the generator covering radius
    coverage_samples: int = 20000
    stabilization_tol: float = 1e-3
    max_halvings: int = 3
    containment_levels: int = 5    # arrival-level grid per cell side for the ball test
    containment_dirs: int = 64
    certificate_points: int = 1
    certificate_seeds: int = 8
    radius_centers: int = 8        # centers of the no-cut radius search
    mesh_rays: int = 256
    mesh_layers: int = 24
    mesh_checks: int = 4           # tasks per generation whose corners are re-derived from meshes
    task_points: int = 0           # interior points per spot-checked task (0 disables dumps)
    task_checks: int = 0           # tasks whose relation dumps are reconstructed
    min_step: float = 1e-3
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Optional[dict], defaulted: Optional[list] = None) -> "LayerConfig":
        data = dict(data or {})
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(names)
        if unknown:
            raise InputError(f"unknown layer fields: {sorted(unknown)}")
        kwargs = {}
        for name, fld in names.items():
            if name in data:
                try:
                    kwargs[name] = type(fld.default)(data[name])
                except (TypeError, ValueError) as exc:
                    raise InputError(f"layers.{name}: cannot convert {data[name]!r}") from exc
            elif defaulted is not None:
                defaulted.append(f"layers.{name}")
        cfg = cls(**kwargs)
        if not 0 < cfg.target < 1:
            raise InputError("layers.target must lie in (0, 1)")
        if cfg.step <= 0 or cfg.delta_max <= 0:
            raise InputError("layers.step and layers.delta_max must be positive")
        return cfg


@dataclass(eq=False)
class DiamondTask:
    """One reconstruction region: the diamond of two boundary caps, carved by earlier levels."""

    task_id: str
    scheme: int
    axis: np.ndarray
    half_angle: float
    lower: tuple            # (A, B) arrival levels of the outer corner
    width: float
    U_minus: PatchSpec
    U_plus: PatchSpec
    p0: np.ndarray
    p_minus: np.ndarray
    p_plus: np.ndarray
    vminus: VMinusSpec = field(repr=False, default_factory=VMinusSpec)
    arrival: object = field(repr=False, default=None)
    predecessors: list = field(default_factory=list)
    certificate: Optional[Certificate] = field(repr=False, default=None)
    containment: float = np.nan

    @property
    def status(self) -> str:
        if self.certificate is None:
            return "pending"
        return "certified" if self.certificate.certified else "failed"

    @property
    def carve(self) -> tuple:
        return self.lower

    def region(self, points, tol: float = 0.0):
        """Membership in W (``tol`` > 0 gives a closed neighbourhood)."""
        pts = np.atleast_2d(points)
        lo_a, lo_b = self.lower
        hi_plus = self.U_plus.t_range[1]
        lo_minus = self.U_minus.t_range[0]
        axis = self.axis[None]
        ok = in_diamond(pts, -tol)
        if not ok.any():
            return ok
        sub = pts[ok]
        keep = self.arrival.tau_plus(sub, axis, self.half_angle)[:, 0] < hi_plus + tol
        keep &= self.arrival.tau_minus(sub, axis, self.half_angle)[:, 0] > lo_minus - tol
        if lo_a > 0:
            keep &= self.arrival.lam_plus(sub) > lo_a - tol
        if lo_b > 0:
            keep &= self.arrival.lam_minus(sub) > lo_b - tol
        ok[np.nonzero(ok)[0]] = keep
        return ok

    def closure(self, points):
        return self.region(points, 1e-9)

    def forbidden(self, points):
        """W0: points of the enlarged diamond already reconstructed by earlier levels."""
        pts = np.atleast_2d(points)
        lo_a, lo_b = self.lower
        inside = np.zeros(len(pts), dtype=bool)
        if lo_a > 0:
            inside |= self.arrival.lam_plus(pts) <= lo_a
        if lo_b > 0:
            inside |= self.arrival.lam_minus(pts) <= lo_b
        return inside & in_diamond(pts)

    def candidates(self, levels: int = 5, dirs: int = 64) -> np.ndarray:
        """Sample of the closed region (flat-chart parameterization, filtered by membership)."""
        lo_a, lo_b = self.lower
        grid_a = np.linspace(lo_a, lo_a + self.width, levels)
        grid_b = np.linspace(lo_b, lo_b + self.width, levels)
        from .sampling import fibonacci_cap
        cap = fibonacci_cap(self.axis, min(2.5 * self.half_angle, np.pi), dirs)
        cap = np.vstack([self.axis[None], cap])
        pts = np.array([FlatArrival().corner(a, b, d) for a in grid_a for b in grid_b for d in cap])
        pts = pts[np.linalg.norm(pts[:, 1:], axis=1) > 1e-9]
        return pts[self.closure(pts)]

    def to_dict(self) -> dict:
        return {"id": self.task_id, "scheme": self.scheme, "axis": self.axis.tolist(),
                "half_angle": self.half_angle, "lower": list(self.lower), "width": self.width,
                "U_minus": self.U_minus.to_dict(), "U_plus": self.U_plus.to_dict(),
                "p0": self.p0.tolist(), "p_minus": self.p_minus.tolist(), "p_plus": self.p_plus.tolist(),
                "status": self.status, "containment": self.containment,
                "vminus": self.vminus.mode, "predecessors": list(self.predecessors),
                "certificate": None if self.certificate is None else self.certificate.to_dict()}


def covering_radius(axes, probes: int = 4000) -> float:
    """Largest angular distance from a dense probe grid to its nearest axis."""
    probe = fibonacci_sphere(probes)
    tree = cKDTree(axes)
    chord, _ = tree.query(probe)
    return float(2 * np.arcsin(np.clip(chord.max() / 2, 0, 1)))


def frozen_distance(spec: MetricSpec, center, points) -> np.ndarray:
    """Reference-norm distance with the metric frozen at ``center``."""
    gp = spec.reference_matrices(np.asarray(center)[None])[0]
    diff = np.atleast_2d(points) - center
    return np.sqrt(np.einsum("ni,ij,nj->n", diff, gp, diff))


def no_cut_radius(spec: MetricSpec, centers, delta_max: float, seeds: int = 8, points: int = 4,
                  iterations: int = 12, rng: Optional[np.random.Generator] = None) -> float:
    """Largest ball radius (bisection, min over centers) whose samples pass the no-cut certificate."""
    rng = rng or np.random.default_rng(0)
    centers = np.atleast_2d(centers)
    best = delta_max
    for center in centers:
        def passes(radius):
            gp = spec.reference_matrices(center[None])[0]
            chol = np.linalg.cholesky(gp)
            dirs = rng.normal(size=(points, 4))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            sample = center + 0.5 * radius * np.linalg.solve(chol.T, dirs.T).T
            sample = sample[in_diamond(sample, 1e-6)]
            if len(sample) == 0:
                return True

            def ball(pts, c=center, r=radius):
                return (frozen_distance(spec, c, pts) < r) & in_diamond(pts)
            return no_cut_certificate(spec, sample, seeds, region=ball).certified

        if passes(best):
            continue
        lo, hi = 0.0, best
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if passes(mid):
                lo = mid
            else:
                hi = mid
        best = lo
    return float(best)


@dataclass
class Frontier:
    """Reconstructed arrival levels and the grid shared by all steps."""

    arrival: object
    generators: np.ndarray
    half_angle: float
    width: float
    target: float
    delta: float
    plus_levels: list = field(default_factory=list)   # A levels reached along S+
    minus_levels: list = field(default_factory=list)  # B levels reached along S-
    cells: dict = field(default_factory=dict)          # (i, j) -> list of task ids
    meshes: dict = field(default_factory=dict)

    def level(self, k: int) -> float:
        return float(min(k * self.width, self.target))

    @property
    def rows(self) -> int:
        return int(np.ceil(self.target / self.width - 1e-12))

    @property
    def empty(self) -> bool:
        return not self.cells


def _cell_tasks(spec: MetricSpec, frontier: Frontier, i: int, j: int, scheme: int,
                predecessors: Sequence[str]) -> list[DiamondTask]:
    lo_a, lo_b = frontier.level(i), frontier.level(j)
    hi_a, hi_b = frontier.level(i + 1), frontier.level(j + 1)
    width = min(hi_a - lo_a, hi_b - lo_b)
    if width <= 0:
        raise ScheduleError(f"degenerate cell ({i}, {j}) with zero width")
    tasks = []
    arrival = frontier.arrival
    for g, axis in enumerate(frontier.generators):
        u_plus = PatchSpec("S+", tuple(axis), frontier.half_angle, (lo_a, hi_a))
        u_minus = PatchSpec("S-", tuple(axis), frontier.half_angle, (-hi_b, -lo_b))
        task = DiamondTask(f"s{scheme}-{i}-{j}-{g}", scheme, np.asarray(axis), frontier.half_angle,
                           (lo_a, lo_b), width, u_minus, u_plus,
                           arrival.corner(lo_a, lo_b, axis), arrival.corner(lo_a, hi_b, axis),
                           arrival.corner(hi_a, lo_b, axis), arrival=arrival,
                           predecessors=list(predecessors))
        if scheme in (2, 4):
            task.vminus = build_V_minus(spec, scheme, forbidden=task.forbidden)
        else:
            task.vminus = build_V_minus(spec, scheme)
        tasks.append(task)
    frontier.cells[(i, j)] = [t.task_id for t in tasks]
    return tasks


def containment_radius(spec: MetricSpec, task: DiamondTask, levels: int = 5, dirs: int = 64) -> float:
    pts = task.candidates(levels, dirs)
    if len(pts) == 0:
        return 0.0
    return float(frozen_distance(spec, task.p0, pts).max())


def _probe_frontier(arrival, generators, half_angle, width, target, delta):
    return Frontier(arrival, generators, half_angle, width, target, delta)


def plan_step1(spec: MetricSpec, delta: float, config: Optional[LayerConfig] = None,
               arrival=None, probes: int = 8) -> tuple[list[DiamondTask], Frontier]:
    """Scheme-1 tasks at spacelike infinity, with T1 shrunk until every sampled diamond fits in its ball."""
    config = config or LayerConfig()
    if delta <= 0:
        raise ScheduleError("delta must be positive")
    arrival = arrival or arrival_model(spec)
    gens = fibonacci_sphere(config.generators)
    half = covering_radius(gens) * config.cap_margin
    picks = gens[np.linspace(0, len(gens) - 1, min(probes, len(gens))).astype(int)]

    def fits(width):
        probe = _probe_frontier(arrival, picks, half, width, config.target, delta)
        for task in _cell_tasks(spec, probe, 0, 0, 1, []):
            if containment_radius(spec, task, config.containment_levels, config.containment_dirs) >= delta:
                return False
        return True

    t1 = min(config.step, config.target)
    if not fits(t1):
        lo, hi = 0.0, t1
        for _ in range(30):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if fits(mid) else (lo, mid)
        t1 = lo
    if t1 < config.min_step:
        raise ScheduleError(f"delta too small for grid (T1 = {t1:.3g} below {config.min_step})")
    frontier = Frontier(arrival, gens, half, t1, config.target, delta)
    tasks = _cell_tasks(spec, frontier, 0, 0, 1, [])
    frontier.plus_levels.append(frontier.level(1))
    frontier.minus_levels.append(frontier.level(1))
    return tasks, frontier


def plan_step(spec: MetricSpec, step: int, frontier: Frontier, increment: Optional[float] = None
              ) -> list[DiamondTask]:
    """Tasks of one generation of step 2 (along S+), 3 (along S-) or 4 (interior corners)."""
    if frontier is None or frontier.empty:
        raise ScheduleError("empty frontier: run step 1 first")
    if increment is not None and increment <= 0:
        raise ScheduleError("step advance must be positive")
    if step == 2:
        i = len(frontier.plus_levels)
        if frontier.plus_levels[-1] >= frontier.target:
            return []
        tasks = _cell_tasks(spec, frontier, i, 0, 2, frontier.cells[(i - 1, 0)])
        new = frontier.level(i + 1)
        if new <= frontier.plus_levels[-1]:
            raise ScheduleError("frontier did not advance")
        frontier.plus_levels.append(new)
        return tasks
    if step == 3:
        j = len(frontier.minus_levels)
        if frontier.minus_levels[-1] >= frontier.target:
            return []
        tasks = _cell_tasks(spec, frontier, 0, j, 3, frontier.cells[(0, j - 1)])
        new = frontier.level(j + 1)
        if new <= frontier.minus_levels[-1]:
            raise ScheduleError("frontier did not advance")
        frontier.minus_levels.append(new)
        return tasks
    if step == 4:
        tasks = []
        ready = [(i, j) for i in range(1, len(frontier.plus_levels)) for j in range(1, len(frontier.minus_levels))
                 if (i, j) not in frontier.cells and (i - 1, j) in frontier.cells and (i, j - 1) in frontier.cells]
        for i, j in ready:
            preds = frontier.cells[(i - 1, j)] + frontier.cells[(i, j - 1)]
            tasks += _cell_tasks(spec, frontier, i, j, 4, preds)
        return tasks
    raise InputError(f"step must be 2, 3 or 4, got {step}")


# ---------------------------------------------------------------- geometric corners

def corner_from_meshes(spec: MetricSpec, frontier: Frontier, lam_p: float, lam_m: float, axis,
                       rays: int = 256, layers: int = 24) -> tuple[np.ndarray, int, float]:
    """Corner point as the crossing of the past-inward normal geodesic of S+(lam_p) over ``axis``
    with the future-inward congruence of S-(lam_m).  Returns (point, crossing count, residual)."""
    key = ("S-", round(lam_m, 12))
    mesh = frontier.meshes.get(key)
    if mesh is None:
        mesh = normal_null_congruence(spec, "S-", lam_m, "future", "inward", rays, layers)
        frontier.meshes[key] = mesh
    base = base_surface("S+", lam_p, np.asarray(axis)[None])
    e1, e2 = sphere_tangents(np.asarray(axis)[None])
    vec = normal_null_vectors(spec, base, e1, e2, "past", "inward")
    traj = trace_batch(spec, base, vec, -1)[0]
    found = mesh.crossings(traj)
    if not found:
        raise ScheduleError(f"no crossing with the S-({lam_m}) congruence")
    return found[0].point, len(found), found[0].residual


# ---------------------------------------------------------------- pipeline

@dataclass
class SweepResult:
    step: float
    width: float
    tasks: list
    frontier: Frontier
    covered: np.ndarray
    coverage: float
    certified: int
    failed: int
    overlap: float
    angular_overlap: float
    levels: dict
    mesh_checks: list
    seconds: float

    def to_dict(self) -> dict:
        by_scheme = {s: sum(1 for t in self.tasks if t.scheme == s) for s in (1, 2, 3, 4)}
        return {"step": self.step, "width": self.width, "tasks": len(self.tasks),
                "tasks_by_scheme": by_scheme, "certified": self.certified, "failed": self.failed,
                "coverage": self.coverage, "overlap": self.overlap,
                "angular_overlap": self.angular_overlap, "levels": self.levels,
                "mesh_checks": self.mesh_checks}


def interior_sample(arrival, target: float, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of I(T0) = {lam_plus < T0, lam_minus < T0} inside the diamond."""
    out = []
    total = 0
    while total < count:
        cand = rng.uniform(-1, 1, size=(4 * count, 4))
        cand = cand[in_diamond(cand)]
        keep = (arrival.lam_plus(cand) < target) & (arrival.lam_minus(cand) < target)
        out.append(cand[keep])
        total += int(keep.sum())
    return np.concatenate(out)[:count]


def certify_task(spec: MetricSpec, task: DiamondTask, config: LayerConfig) -> Certificate:
    pts = task.candidates(3, 8)
    if len(pts) == 0:
        task.certificate = Certificate(False, -np.inf, 0, config.certificate_seeds,
                                       [{"cause": "empty region sample"}])
        return task.certificate
    center = pts.mean(axis=0)
    if not task.closure(center[None])[0]:
        center = pts[np.argmin(np.linalg.norm(pts - center, axis=1))]
    sample = center[None]
    if config.certificate_points > 1:
        extra = pts[np.linspace(0, len(pts) - 1, config.certificate_points - 1).astype(int)]
        sample = np.vstack([sample, extra])
    sample = sample[in_diamond(sample, 1e-9)]
    task.certificate = no_cut_certificate(spec, sample, config.certificate_seeds, region=task.closure)
    return task.certificate


def _cell_membership(arrival, frontier: Frontier, points, i: int, j: int, tol: float = 1e-12):
    """(N, G) membership of the sample in every task of cell (i, j)."""
    lo_a, lo_b = frontier.level(i), frontier.level(j)
    hi_a, hi_b = frontier.level(i + 1), frontier.level(j + 1)
    member = arrival.tau_plus(points, frontier.generators, frontier.half_angle) < hi_a + tol
    member &= arrival.tau_minus(points, frontier.generators, frontier.half_angle) > -hi_b - tol
    rows = np.ones(len(points), dtype=bool)
    if lo_a > 0:
        rows &= arrival.lam_plus(points) > lo_a - tol
    if lo_b > 0:
        rows &= arrival.lam_minus(points) > lo_b - tol
    return member & rows[:, None]


def sweep(spec: MetricSpec, config: LayerConfig, step: float, delta: float, sample: np.ndarray,
          arrival=None, certify: bool = True) -> SweepResult:
    """Plan every generation for one step parameter and measure coverage of the sample."""
    start = time.perf_counter()
    arrival = arrival or arrival_model(spec)
    cfg = dataclasses.replace(config, step=step)
    tasks, frontier = plan_step1(spec, delta, cfg, arrival)
    while frontier.plus_levels[-1] < frontier.target:
        tasks += plan_step(spec, 2, frontier)
    while frontier.minus_levels[-1] < frontier.target:
        tasks += plan_step(spec, 3, frontier)
    while True:
        new = plan_step(spec, 4, frontier)
        if not new:
            break
        tasks += new
    for lv in (frontier.plus_levels, frontier.minus_levels):
        if np.any(np.diff(lv) <= 0):
            raise ScheduleError("frontier levels must increase strictly")

    certified = failed = 0
    status = {}
    for task in tasks:
        task.containment = containment_radius(spec, task, cfg.containment_levels, cfg.containment_dirs)
        if task.containment >= delta:
            task.certificate = Certificate(False, -np.inf, 0, 0, [{"cause": "ball containment"}])
        elif certify:
            certify_task(spec, task, cfg)
        else:
            task.certificate = Certificate(True, np.inf, 0, 0, [])
        status[task.task_id] = task.status == "certified"
        certified += task.status == "certified"
        failed += task.status == "failed"

    covered = np.zeros(len(sample), dtype=bool)
    cell_hits = np.zeros(len(sample), dtype=int)
    multi_generator = np.zeros(len(sample), dtype=bool)
    for (i, j), ids in frontier.cells.items():
        member = _cell_membership(arrival, frontier, sample, i, j)
        ok = np.array([status[t] for t in ids])
        member &= ok[None, :]
        in_cell = member.any(axis=1)
        covered |= in_cell
        cell_hits += in_cell
        multi_generator |= member.sum(axis=1) > 1

    # cells of one sweep overlap only on their carved boundaries
    overlap = float(np.mean(cell_hits > 1) / max(np.mean(cell_hits > 0), 1e-300))
    angular = float(np.mean(multi_generator) / max(np.mean(covered), 1e-300))

    checks = []
    order = [c for c in sorted(frontier.cells) if c[0] > 0]
    for i, j in order[: max(cfg.mesh_checks, 0)]:
        axis = frontier.generators[0]
        lam_p, lam_m = frontier.level(i), frontier.level(j + 1)
        try:
            point, count, resid = corner_from_meshes(spec, frontier, lam_p, lam_m, axis,
                                                     cfg.mesh_rays, cfg.mesh_layers)
            expected = arrival.corner(lam_p, lam_m, axis)
            checks.append({"cell": [i, j], "crossings": count, "residual": resid,
                           "corner_error": float(np.linalg.norm(point - expected))})
        except ScheduleError as exc:
            checks.append({"cell": [i, j], "error": str(exc)})
    levels = {"plus": frontier.plus_levels, "minus": frontier.minus_levels}
    return SweepResult(step, frontier.width, tasks, frontier, covered, float(covered.mean()),
                       certified, failed, overlap, angular, levels, checks,
                       time.perf_counter() - start)


@dataclass
class PipelineReport:
    target: float
    delta: float
    accepted_step: Optional[float]
    stabilized: bool
    coverage: float
    history: list
    defaulted: list
    task_results: list = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def execute_task(spec: MetricSpec, task: DiamondTask, points: int, seed: int = 0,
                 sampling: Optional[Sampling] = None, tolerances: Optional[Tolerances] = None) -> dict:
    """Relation dump and blind reconstruction for interior points of one certified task."""
    from .harness import synthesize_point, decoy_tuples
    from .oracle import RelationOracle
    from .reconstruction import point_recovery, reconstruct_all

    if task.status != "certified":
        raise ScheduleError(f"task {task.task_id} is not certified")
    sampling = sampling or Sampling()
    rng = np.random.default_rng(seed)
    pool = task.candidates(7, 128)
    pool = pool[task.region(pool) & in_diamond(pool, 1e-3)]
    if len(pool) < points:
        raise ScheduleError(f"task {task.task_id} region too thin to sample {points} points")
    # interior points between the sampled ones keep clear of the carved faces
    picks = []
    for _ in range(points * 20):
        a, b = pool[rng.integers(len(pool), size=2)]
        q = 0.5 * (a + b)
        if task.region(q[None])[0] and in_diamond(q[None], 1e-3)[0]:
            picks.append(q)
        if len(picks) == points:
            break
    qs = np.array(picks)
    oracle = RelationOracle(spec, region=task.closure, vminus=task.vminus, tolerances=tolerances)
    plans = []
    for q in qs:
        obs_axis = task.p_plus[1:] - q[1:]
        src_axis = q[1:] - task.p_minus[1:]
        plans.append(synthesize_point(spec, q, sampling, rng, patch=task.U_plus,
                                      obs_axis=obs_axis / np.linalg.norm(obs_axis),
                                      src_axis=src_axis / np.linalg.norm(src_axis)))
    cands = [t for p in plans for t in p.tuples] + decoy_tuples(plans, rng, sampling.decoys)
    decided = oracle.evaluate(cands)
    result = reconstruct_all([t for t in decided if t.verdict], sampling, tolerances)
    errors = []
    for q in qs:
        best = np.inf
        for rs in result.sets:
            est = point_recovery(spec, rs.regular)
            best = min(best, float(np.linalg.norm(est.point - q)))
        errors.append(best)
    return {"task": task.task_id, "points": len(qs), "members": sum(1 for t in decided if t.verdict),
            "sets": len(result.sets), "max_error": float(max(errors)) if errors else None}


def run_pipeline(spec: MetricSpec, config: Optional[LayerConfig] = None,
                 defaulted: Optional[list] = None) -> PipelineReport:
    """Sweep with the step halved until successive coverage maps agree."""
    config = config or LayerConfig()
    rng = np.random.default_rng(config.seed)
    arrival = arrival_model(spec)
    centers = np.array([[0.0, *(0.5 * d)] for d in fibonacci_sphere(config.radius_centers)])
    delta = no_cut_radius(spec, centers, config.delta_max, config.certificate_seeds, rng=rng)
    sample = interior_sample(arrival, config.target, config.coverage_samples, rng)
    history = []
    previous = None
    gaps = []
    step = config.step
    accepted = None
    reason = ""
    results = []
    for halving in range(config.max_halvings + 1):
        res = sweep(spec, config, step, delta, sample, arrival)
        results.append(res)
        entry = res.to_dict()
        if previous is not None:
            gap = float(np.mean(previous.covered != res.covered)
                        + abs(previous.coverage - res.coverage))
            entry["disagreement"] = gap
            gaps.append(gap)
            if gap <= config.stabilization_tol:
                accepted = previous.step
                history.append(entry)
                break
            if len(gaps) >= 3 and gaps[-1] >= gaps[-2] >= gaps[-3]:
                history.append(entry)
                reason = "resolution insufficient: two halvings without agreement improvement"
                break
        history.append(entry)
        log.info("sweep step=%.4g coverage=%.6f tasks=%d", step, res.coverage, len(res.tasks))
        previous = res
        step *= 0.5
    else:
        reason = "resolution insufficient: halving budget exhausted"
    final = results[-2] if accepted is not None else results[-1]
    report = PipelineReport(config.target, delta, accepted, accepted is not None, final.coverage,
                            history, list(defaulted or []), reason=reason)
    if config.task_checks > 0 and config.task_points > 0:
        pool = [t for t in final.tasks if t.status == "certified"]
        picks = rng.choice(len(pool), size=min(config.task_checks, len(pool)), replace=False)
        for k in sorted(picks):
            try:
                report.task_results.append(execute_task(spec, pool[k], config.task_points,
                                                        seed=config.seed + int(k)))
            except ScheduleError as exc:
                report.task_results.append({"task": pool[k].task_id, "error": str(exc)})
    return report


def require_stable(report: PipelineReport) -> PipelineReport:
    if not report.stabilized:
        raise ResolutionInsufficient(report.reason or "step-size loop did not stabilize")
    return report
