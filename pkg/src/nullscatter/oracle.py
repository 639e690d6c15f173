"""Forward data: lens relations and the three-to-one scattering relation.

Membership of (v0; v1, v2, v3) is decided geometrically: the three source
geodesics must meet at one point q of the region, the observation geodesic
of v0 must pass through q before its cut point, and its tangent at q must lie
in the span of the three source tangents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .boundary import BoundaryLightVector
from .config import Tolerances
from .cutlocus import null_cut_parameter
from .errors import CertificateViolation, DegenerateFrame, InputError
from .geodesics import Trajectory, hit_of, trace_batch
from .metric import MetricSpec, in_diamond

COARSE_SAMPLES = 96


# ---------------------------------------------------------------- span test

@dataclass
class SpanResult:
    member: bool
    coefficients: np.ndarray
    residual: float
    sigma_min: float
    flags: list = field(default_factory=list)


def span_membership(w0, w1, w2, w3, reference=None, span_tol: float = 1e-6,
                    sigma_tol: float = 1e-6) -> SpanResult:
    """Is w0 in span(w1, w2, w3)?  Norms use the reference metric matrix if given."""
    chol = np.eye(4) if reference is None else np.linalg.cholesky(np.asarray(reference, dtype=float))
    frame = chol.T @ np.column_stack([w1, w2, w3]).astype(float)
    target = chol.T @ np.asarray(w0, dtype=float)
    unit = frame / np.linalg.norm(frame, axis=0)
    sing = np.linalg.svd(unit, compute_uv=False)
    sigma = float(sing[-1] / sing[0])
    if sigma <= sigma_tol:
        raise DegenerateFrame(f"degenerate frame: source tangents dependent (sigma={sigma:.2e})")
    coeffs, *_ = np.linalg.lstsq(frame, target, rcond=None)
    residual = float(np.linalg.norm(target - frame @ coeffs) / np.linalg.norm(target))
    member = residual < span_tol
    flags = []
    if member:
        weights = np.abs(coeffs) * np.linalg.norm(frame, axis=0)
        if np.sum(weights > span_tol * np.linalg.norm(target)) == 1:
            flags.append("proportional to a single generator")
    return SpanResult(bool(member), coeffs, residual, sigma, flags)


# ---------------------------------------------------------------- relation records

@dataclass
class RelationTuple:
    v0: BoundaryLightVector
    v1: BoundaryLightVector
    v2: BoundaryLightVector
    v3: BoundaryLightVector
    verdict: Optional[bool] = None
    witness: Optional[np.ndarray] = None
    coefficients: Optional[np.ndarray] = None
    reason: str = ""

    @property
    def sources(self):
        return (self.v1, self.v2, self.v3)

    def to_dict(self) -> dict:
        out = {"v0": self.v0.to_dict(), "v1": self.v1.to_dict(), "v2": self.v2.to_dict(),
               "v3": self.v3.to_dict(), "verdict": self.verdict, "reason": self.reason}
        if self.verdict:
            out["witness"] = {"q": [float(x) for x in self.witness],
                              "coefficients": [float(x) for x in self.coefficients]}
        else:
            out["witness"] = None
        return out

    @classmethod
    def from_dict(cls, data, keep_witness: bool = True) -> "RelationTuple":
        try:
            vecs = [BoundaryLightVector.from_dict(data[k]) for k in ("v0", "v1", "v2", "v3")]
            verdict = data["verdict"]
        except KeyError as exc:
            raise InputError(f"relation record missing field {exc}") from exc
        if not isinstance(verdict, bool):
            raise InputError("relation record verdict must be true or false")
        if vecs[0].side != "S+" or any(v.side != "S-" for v in vecs[1:]):
            raise InputError("relation record must have v0 on S+ and v1..v3 on S-")
        tup = cls(*vecs, verdict=verdict, reason=str(data.get("reason", "")))
        wit = data.get("witness")
        if keep_witness and verdict and wit:
            tup.witness = np.asarray(wit["q"], dtype=float)
            tup.coefficients = np.asarray(wit["coefficients"], dtype=float)
        return tup


@dataclass
class Intersection:
    point: Optional[np.ndarray]
    distance: float
    s_a: float = np.nan
    s_b: float = np.nan


# ---------------------------------------------------------------- V- specification

@dataclass
class VMinusSpec:
    """Admissible source triples: all distinct triples, or a filtered subset."""

    mode: str = "full"
    forbidden: Optional[Callable] = None       # W0 membership predicate on points
    inner_mesh: Optional[object] = None        # CongruenceMesh carrying U-^in
    inner_region: Optional[Callable] = None    # U-^in predicate on mesh crossing points

    def contains(self, oracle: "RelationOracle", triple: Sequence[BoundaryLightVector]) -> bool:
        keys = {v.key() for v in triple}
        if len(keys) < 3:
            return False
        if self.mode == "full":
            return True
        if self.forbidden is not None:
            for a, b in ((0, 1), (0, 2), (1, 2)):
                meet = oracle.intersection(triple[a], triple[b], region=None)
                if meet.point is not None and bool(self.forbidden(meet.point[None])[0]):
                    return False
        if self.inner_mesh is not None:
            for v in triple:
                crossing = oracle.restricted(v, self.inner_mesh)
                if crossing is None:
                    return False
                if self.inner_region is not None and not bool(self.inner_region(crossing.point[None])[0]):
                    return False
        return True


def build_V_minus(spec: MetricSpec, scheme: int, forbidden=None, inner_mesh=None,
                  inner_region=None) -> VMinusSpec:
    """Scheme 1/3: every triple of distinct vectors.  Scheme 2/4: geometric filtering."""
    if scheme in (1, 3):
        return VMinusSpec("full")
    if scheme in (2, 4):
        if forbidden is None and inner_mesh is None:
            raise InputError("filtered schemes need the forbidden region or the inner mesh")
        return VMinusSpec("filtered", forbidden, inner_mesh, inner_region)
    raise InputError(f"unknown scheme {scheme}")


# ---------------------------------------------------------------- oracle

class RelationOracle:
    """Caching evaluator of lens maps, geodesic meetings and relation membership.

    ``region`` is the closed region predicate W (vectorized on points);
    ``cut_window`` is "certified" (the region is known cut-free, so the cut
    window is vacuous) or "compute" (rho of the observation geodesic is
    estimated explicitly).
    """

    def __init__(self, spec: MetricSpec, region: Optional[Callable] = None,
                 vminus: Optional[VMinusSpec] = None, tolerances: Optional[Tolerances] = None,
                 cut_window: str = "certified", rtol: float = 1e-10):
        self.spec = spec
        self.region = region
        self.vminus = vminus or VMinusSpec("full")
        self.tol = tolerances or Tolerances()
        if cut_window not in ("certified", "compute"):
            raise InputError("cut_window must be 'certified' or 'compute'")
        self.cut_window = cut_window
        self.rtol = rtol
        self._forward: dict = {}
        self._backward: dict = {}
        self._samples: dict = {}
        self._pairs: dict = {}
        self._cut: dict = {}

    # traces ---------------------------------------------------------
    def _trace(self, vectors: Iterable[BoundaryLightVector], direction: int) -> list[Trajectory]:
        cache = self._forward if direction > 0 else self._backward
        vectors = list(vectors)
        missing, seen = [], set()
        for v in vectors:
            k = v.key()
            if k not in cache and k not in seen:
                seen.add(k)
                missing.append(v)
        if missing:
            pts = np.array([v.p for v in missing])
            vecs = np.array([v.w for v in missing])
            trajs = trace_batch(self.spec, pts, vecs, direction, rtol=self.rtol,
                                null_tol=max(self.tol.null, 1e-10))
            for v, t in zip(missing, trajs):
                cache[v.key()] = t
        return [cache[v.key()] for v in vectors]

    def forward(self, vectors) -> list[Trajectory]:
        return self._trace(vectors, 1)

    def backward(self, vectors) -> list[Trajectory]:
        return self._trace(vectors, -1)

    def prefetch(self, tuples: Iterable[RelationTuple]):
        tuples = list(tuples)
        self.forward([v for t in tuples for v in t.sources])
        self.backward([t.v0 for t in tuples])

    def lens(self, v: BoundaryLightVector) -> BoundaryLightVector:
        if v.side != "S-":
            raise InputError("lens relation expects a vector on S-")
        hit = hit_of(self.forward([v])[0])
        return BoundaryLightVector(hit.point, hit.tangent, "S+")

    def inverse_lens(self, v: BoundaryLightVector) -> BoundaryLightVector:
        if v.side != "S+":
            raise InputError("inverse lens expects a vector on S+")
        hit = hit_of(self.backward([v])[0])
        return BoundaryLightVector(hit.point, hit.tangent, "S-")

    def restricted(self, v: BoundaryLightVector, mesh):
        return restricted_lens(self.spec, v, mesh, trajectory=self.forward([v])[0])

    # geometry -------------------------------------------------------
    def _coarse(self, key, traj: Trajectory):
        cached = self._samples.get(key)
        if cached is None:
            s = np.linspace(0.0, traj.s_end, COARSE_SAMPLES)
            cached = (s, traj.position(s))
            self._samples[key] = cached
        return cached

    def _distance(self, a, b):
        mid = 0.5 * (a + b)
        gp = self.spec.reference_matrices(mid[None])[0]
        d = a - b
        return float(np.sqrt(d @ gp @ d))

    def intersection(self, va: BoundaryLightVector, vb: BoundaryLightVector,
                     region: Optional[Callable] = "default") -> Intersection:
        """Meeting point of the forward geodesics of two sources (or None)."""
        region = self.region if region == "default" else region
        key = (va.key(), vb.key(), id(region))
        if key in self._pairs:
            return self._pairs[key]
        ta, tb = self.forward([va, vb])
        result = self._meet(va.key(), ta, vb.key(), tb, region)
        self._pairs[key] = result
        self._pairs[(vb.key(), va.key(), id(region))] = Intersection(
            result.point, result.distance, result.s_b, result.s_a)
        return result

    def _meet(self, ka, ta: Trajectory, kb, tb: Trajectory, region) -> Intersection:
        sa, xa = self._coarse(("f",) + ka, ta)
        sb, xb = self._coarse(("f",) + kb, tb)
        dist = np.linalg.norm(xa[:, None, :] - xb[None, :, :], axis=2)
        step = max(np.max(np.linalg.norm(np.diff(xa, axis=0), axis=1)),
                   np.max(np.linalg.norm(np.diff(xb, axis=0), axis=1)))
        # local minima of the coarse distance table are the starting guesses
        padded = np.pad(dist, 1, constant_values=np.inf)
        core = padded[1:-1, 1:-1]
        is_min = np.ones_like(core, dtype=bool)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di or dj:
                    is_min &= core <= padded[1 + di:1 + di + core.shape[0], 1 + dj:1 + dj + core.shape[1]]
        cand = np.argwhere(is_min & (core < 2.0 * step))
        order = np.argsort(core[cand[:, 0], cand[:, 1]])
        found = []
        best = Intersection(None, float(dist.min()))
        for i, j in cand[order][:6]:
            s1, s2, d = self._newton_pair(ta, tb, sa[i], sb[j])
            point = 0.5 * (ta.position(s1) + tb.position(s2))
            if d < best.distance:
                best = Intersection(None, d, s1, s2)
            if d < self.tol.intersect:
                if not any(np.linalg.norm(point - f[0]) < 1e3 * self.tol.intersect for f in found):
                    found.append((point, d, s1, s2))
        if region is not None:
            found = [f for f in found if bool(np.asarray(region(f[0][None]))[0])]
        else:
            found = [f for f in found if bool(in_diamond(f[0][None], -1e-9)[0])]
        if len(found) > 1:
            raise CertificateViolation(
                f"certificate violated: two meetings of the same pair at "
                f"{found[0][0].tolist()} and {found[1][0].tolist()}")
        if found:
            point, d, s1, s2 = found[0]
            return Intersection(point, d, s1, s2)
        return best

    def _newton_pair(self, ta: Trajectory, tb: Trajectory, s1: float, s2: float, iters: int = 30):
        xa, xb = ta.position(s1), tb.position(s2)
        chol = np.linalg.cholesky(self.spec.reference_matrices((0.5 * (xa + xb))[None])[0])
        for _ in range(iters):
            r = chol.T @ (xa - xb)
            jac = chol.T @ np.column_stack([ta.rate(s1), -tb.rate(s2)])
            step, *_ = np.linalg.lstsq(jac, -r, rcond=None)
            n1 = float(np.clip(s1 + step[0], 0.0, ta.s_end))
            n2 = float(np.clip(s2 + step[1], 0.0, tb.s_end))
            done = abs(n1 - s1) + abs(n2 - s2) < 1e-15 * (1 + s1 + s2)
            s1, s2 = n1, n2
            xa, xb = ta.position(s1), tb.position(s2)
            if done:
                break
        return s1, s2, self._distance(xa, xb)

    def closest_parameter(self, key, traj: Trajectory, point):
        """Parameter and reference distance of the point of ``traj`` closest to ``point``."""
        s_grid, xs = self._coarse(key, traj)
        point = np.asarray(point, dtype=float)
        i = int(np.argmin(np.linalg.norm(xs - point, axis=1)))
        s = float(s_grid[i])
        gp = self.spec.reference_matrices(point[None])[0]
        for _ in range(30):
            x = traj.position(s)
            rate = traj.rate(s)
            grad = rate @ gp @ (x - point)
            curv = rate @ gp @ rate
            new = float(np.clip(s - grad / curv, 0.0, traj.s_end))
            if abs(new - s) < 1e-15 * (1 + s):
                s = new
                break
            s = new
        return s, self._distance(traj.position(s), point)

    def is_proper(self, tup: RelationTuple) -> bool:
        srcs = [v.p for v in tup.sources]
        for a in range(3):
            for b in range(a + 1, 3):
                if self._distance(srcs[a], srcs[b]) <= self.tol.distinct:
                    return False
        outs = [tup.v0.p] + [hit_of(t, allow_grazing=True).point for t in self.forward(tup.sources)]
        for a in range(4):
            for b in range(a + 1, 4):
                if self._distance(outs[a], outs[b]) <= self.tol.distinct:
                    return False
        return True

    def cut_parameter_backward(self, v0: BoundaryLightVector) -> Optional[float]:
        key = v0.key()
        if key not in self._cut:
            traj = self.backward([v0])[0]
            report = null_cut_parameter(self.spec, v0.p, v0.w, direction=-1, trajectory=traj)
            self._cut[key] = report.rho
        return self._cut[key]

    # membership -----------------------------------------------------
    def membership(self, tup: RelationTuple) -> RelationTuple:
        out = RelationTuple(tup.v0, tup.v1, tup.v2, tup.v3)
        if tup.v0.side != "S+" or any(v.side != "S-" for v in tup.sources):
            raise InputError("tuple must have v0 on S+ and v1..v3 on S-")

        def reject(reason):
            out.verdict, out.reason = False, reason
            return out

        if not self.is_proper(tup):
            return reject("improper")
        if not self.vminus.contains(self, tup.sources):
            return reject("outside V-")
        meets, params = [], {}
        for a, b in ((0, 1), (0, 2), (1, 2)):
            m = self.intersection(tup.sources[a], tup.sources[b])
            if m.point is None:
                return reject("no common point")
            meets.append(m.point)
            params.setdefault(a, m.s_a)
            params.setdefault(b, m.s_b)
        meets = np.array(meets)
        q = meets.mean(axis=0)
        spread = max(self._distance(meets[i], meets[j]) for i, j in ((0, 1), (0, 2), (1, 2)))
        if spread > 3 * self.tol.intersect:
            return reject("no common point")
        traj0 = self.backward([tup.v0])[0]
        s0, d0 = self.closest_parameter(("b",) + tup.v0.key(), traj0, q)
        if d0 > 3 * self.tol.intersect:
            return reject("observation geodesic misses q")
        if s0 <= self.tol.intersect:
            return reject("q on the observation boundary")
        if self.cut_window == "compute":
            rho = self.cut_parameter_backward(tup.v0)
            if rho is not None and s0 >= rho:
                return reject("beyond cut point")
        tangents = [traj.tangent(params[j]) for j, traj in enumerate(self.forward(tup.sources))]
        w0 = traj0.tangent(s0)
        try:
            span = span_membership(w0, *tangents, reference=self.spec.reference_matrices(q[None])[0],
                                   span_tol=self.tol.span, sigma_tol=self.tol.sigma_min)
        except DegenerateFrame:
            return reject("degenerate frame")
        if not span.member:
            return reject("span")
        out.verdict, out.reason = True, "member"
        out.witness, out.coefficients = q, span.coefficients
        return out

    def evaluate(self, tuples: Iterable[RelationTuple]) -> list[RelationTuple]:
        tuples = list(tuples)
        self.prefetch(tuples)
        return [self.membership(t) for t in tuples]


# ---------------------------------------------------------------- module-level API

def lens_relation(spec: MetricSpec, v: BoundaryLightVector) -> BoundaryLightVector:
    return RelationOracle(spec).lens(v)


def lens_batch(spec: MetricSpec, vectors: Sequence[BoundaryLightVector], allow_grazing=False):
    oracle = RelationOracle(spec)
    out = []
    for traj in oracle.forward(vectors):
        hit = hit_of(traj, allow_grazing)
        out.append(BoundaryLightVector(hit.point, hit.tangent, "S+"))
    return out


def is_proper(spec: MetricSpec, tup: RelationTuple, tolerances: Optional[Tolerances] = None) -> bool:
    return RelationOracle(spec, tolerances=tolerances).is_proper(tup)


def forward_intersection(spec: MetricSpec, va: BoundaryLightVector, vb: BoundaryLightVector,
                         region: Optional[Callable] = None,
                         tolerances: Optional[Tolerances] = None) -> Optional[np.ndarray]:
    return RelationOracle(spec, region=region, tolerances=tolerances).intersection(va, vb).point


def relation_membership(spec: MetricSpec, tup: RelationTuple, region: Optional[Callable] = None,
                        vminus: Optional[VMinusSpec] = None, tolerances: Optional[Tolerances] = None,
                        cut_window: str = "certified") -> RelationTuple:
    oracle = RelationOracle(spec, region, vminus, tolerances, cut_window)
    return oracle.membership(tup)


@dataclass
class Crossing:
    point: np.ndarray
    tangent: np.ndarray
    parameter: float
    base_index: int
    residual: float
    tangential: bool = False


def restricted_lens(spec: MetricSpec, v: BoundaryLightVector, mesh, trajectory: Optional[Trajectory] = None,
                    refine: bool = True) -> Optional[Crossing]:
    """First transversal crossing of the forward geodesic of v with a congruence mesh."""
    traj = trajectory or trace_batch(spec, v.p, v.w, 1)[0]
    return mesh.first_crossing(traj, refine=refine)
