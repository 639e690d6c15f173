"""Round-trip harness: relation dumps synthesized around known interior points."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boundary import BoundaryLightVector, PatchSpec
from .config import Sampling
from .errors import InputError
from .geodesics import trace_batch
from .metric import MetricSpec, inner, in_diamond, null_vector, reference_norm
from .oracle import RelationOracle, RelationTuple
from .reconstruction import DirectionSet
from .sampling import fibonacci_cap, fibonacci_sphere, orthonormal_complement


def diamond_points(count: int, rng: np.random.Generator, half_height: float = 0.4,
                   center=(0.0, 0.0, 0.0, 0.0)) -> np.ndarray:
    """Uniform samples of the flat diamond |X - Xc| < h - |T - Tc|."""
    center = np.asarray(center, dtype=float)
    out = []
    while len(out) < count:
        cand = rng.uniform(-half_height, half_height, size=(4 * count, 4))
        ok = np.linalg.norm(cand[:, 1:], axis=1) < half_height - np.abs(cand[:, 0])
        out.extend((cand[ok] + center).tolist())
    pts = np.array(out[:count])
    if not np.all(in_diamond(pts, 1e-3)):
        raise InputError("diamond sample leaves the domain")
    return pts


def random_axis(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def unit_vectors(spec: MetricSpec, q, directions) -> np.ndarray:
    pts = np.broadcast_to(np.asarray(q, dtype=float), (len(directions), 4))
    vec = np.atleast_2d(null_vector(spec, pts, np.asarray(directions)))
    return vec / reference_norm(spec, pts, vec)[:, None]


def _hits(trajs, side) -> list:
    out = []
    for t in trajs:
        h = t.hit
        out.append(None if h is None or h.grazing or h.which != side
                   else BoundaryLightVector(h.point, h.tangent, side))
    return out


def sources_from(spec: MetricSpec, q, vectors) -> list:
    """Source vectors on S- whose forward geodesics pass q with the given tangents."""
    vectors = np.atleast_2d(vectors)
    trajs = trace_batch(spec, np.broadcast_to(q, (len(vectors), 4)), vectors, -1)
    return _hits(trajs, "S-")


def observations_from(spec: MetricSpec, q, vectors, patch: Optional[PatchSpec] = None) -> list:
    """Observation vectors on S+ of the forward geodesics from q."""
    vectors = np.atleast_2d(vectors)
    trajs = trace_batch(spec, np.broadcast_to(q, (len(vectors), 4)), vectors, 1)
    out = _hits(trajs, "S+")
    if patch is not None:
        out = [v if v is not None and patch.contains(v.p)[0] else None for v in out]
    return out


def forward_observation_set(spec: MetricSpec, q, axis, half_angle: float, count: int,
                            patch: Optional[PatchSpec] = None, distinct: float = 1e-6) -> DirectionSet:
    """Forward-traced sample of the observation set of q (ground truth side)."""
    dirs = fibonacci_cap(axis, half_angle, count) if half_angle < np.pi else fibonacci_sphere(count)
    obs = observations_from(spec, q, unit_vectors(spec, q, dirs), patch)
    return DirectionSet([v for v in obs if v is not None], distinct)


def completion(spec: MetricSpec, q, w0, w1, w2) -> Optional[np.ndarray]:
    """Null vector w3 with w0 in span(w1, w2, w3): w3 = w0 + lam (w1 - w2)."""
    u = np.asarray(w1) - np.asarray(w2)
    guu = float(inner(spec, q, u, u)[0])
    if abs(guu) < 1e-14:
        return None
    lam = -2.0 * float(inner(spec, q, w0, u)[0]) / guu
    w3 = np.asarray(w0) + lam * u
    if w3[0] <= 0:
        return None
    # reject completions that repeat a source direction
    for w in (w1, w2, w0):
        cosang = (w3[1:] @ w[1:]) / (np.linalg.norm(w3[1:]) * np.linalg.norm(w[1:]))
        if cosang > 1 - 1e-6:
            return None
    return w3 / float(reference_norm(spec, q, w3)[0])


def retract(spec: MetricSpec, q, w, distance: float):
    """Point a parameter ``distance`` before q on the null geodesic with tangent w,
    and the future tangent there."""
    w = np.asarray(w, dtype=float)
    w = w / float(reference_norm(spec, q, w)[0])
    traj = trace_batch(spec, np.asarray(q)[None], w[None], -1, s_max=distance)[0]
    if traj.s_end < distance * (1 - 1e-12):
        raise InputError("retraction leaves the domain")
    return traj.position(distance), traj.tangent(distance)


@dataclass
class PointPlan:
    """Synthesized records around one interior point."""

    q: np.ndarray
    sources: list
    observations: list
    tuples: list = field(default_factory=list)
    library_points: list = field(default_factory=list)
    decoys: list = field(default_factory=list)


def _tuples_for(spec, q, obs_vecs, obs, src_vecs, src, pairs):
    """Member-candidate tuples: observation j with source pair pairs[j] and its completion."""
    out = []
    need = []
    for j, (a, b) in enumerate(pairs):
        if obs[j] is None or src[a] is None or src[b] is None:
            continue
        w3 = completion(spec, q, obs_vecs[j], src_vecs[a], src_vecs[b])
        if w3 is None:
            continue
        need.append((j, a, b, w3))
    if not need:
        return out
    thirds = sources_from(spec, q, np.array([n[3] for n in need]))
    for (j, a, b, _), v3 in zip(need, thirds):
        if v3 is not None:
            out.append(RelationTuple(obs[j], src[a], src[b], v3))
    return out


def synthesize_point(spec: MetricSpec, q, sampling: Sampling, rng: np.random.Generator,
                     patch: Optional[PatchSpec] = None, library: bool = True,
                     obs_axis=None, src_axis=None) -> PointPlan:
    q = np.asarray(q, dtype=float)
    obs_axis = random_axis(rng) if obs_axis is None else np.asarray(obs_axis, dtype=float)
    src_axis = random_axis(rng) if src_axis is None else np.asarray(src_axis, dtype=float)
    n_src = max(sampling.cluster_sources, 3)
    src_dirs = fibonacci_cap(src_axis, sampling.cluster_angle, n_src)
    src_vecs = unit_vectors(spec, q, src_dirs)
    src = sources_from(spec, q, src_vecs)
    obs_dirs = fibonacci_cap(obs_axis, sampling.observation_angle, sampling.observations)
    obs_vecs = unit_vectors(spec, q, obs_dirs)
    obs = observations_from(spec, q, obs_vecs, patch)
    plan = PointPlan(q, src, obs)

    # anchors: the first two usable observations meet every cyclic source pair
    usable = [j for j, v in enumerate(obs) if v is not None]
    anchors = usable[:2]
    cyclic = [(i, (i + 1) % n_src) for i in range(n_src)]
    for j in anchors:
        plan.tuples += _tuples_for(spec, q, obs_vecs[[j] * n_src], [obs[j]] * n_src,
                                   src_vecs, src, cyclic)
    rest = usable[2:]
    pairs = [(r % n_src, (r + 1) % n_src) for r in range(len(rest))]
    plan.tuples += _tuples_for(spec, q, obs_vecs[rest], [obs[j] for j in rest], src_vecs, src, pairs)

    if library:
        for j in usable:
            plan.tuples += _library_tuples(spec, q, obs_vecs[j], sampling, plan)
    return plan


def _library_tuples(spec, q, w0, sampling: Sampling, plan: PointPlan) -> list:
    """Small fan from a point retracted along the observation geodesic of w0."""
    try:
        qp, tangent = retract(spec, q, w0, sampling.retraction)
    except InputError:
        return []
    plan.library_points.append(qp)
    center = tangent[1:] / np.linalg.norm(tangent[1:])
    e1, e2 = orthonormal_complement(center)
    n_ring = max(sampling.library_rays - 1, 6)
    angles = 2 * np.pi * np.arange(n_ring) / n_ring
    rad = sampling.library_angle
    ring = [np.cos(rad) * center + np.sin(rad) * (np.cos(a) * e1 + np.sin(a) * e2) for a in angles]
    dirs = np.vstack([center] + ring)
    vecs = unit_vectors(spec, qp, dirs)
    vecs[0] = tangent / float(reference_norm(spec, qp, tangent)[0])
    obs = observations_from(spec, qp, vecs)
    # two sources through the retracted point, reused by every fan member
    src_axis = -center
    sd = fibonacci_cap(src_axis, 0.6, 2)
    svecs = unit_vectors(spec, qp, sd)
    src = sources_from(spec, qp, svecs)
    pairs = [(0, 1)] * len(obs)
    return _tuples_for(spec, qp, vecs, obs, svecs, src, pairs)


def decoy_tuples(plans: Sequence[PointPlan], rng: np.random.Generator, count: int) -> list:
    """Non-member candidates: observations of one point with sources of another."""
    out = []
    n = len(plans)
    if n < 2:
        return out
    for i, plan in enumerate(plans):
        members = [t for t in plan.tuples[:len(plan.tuples)]]
        for c in range(count):
            if not members:
                break
            t = members[int(rng.integers(len(members)))]
            other = plans[(i + 1 + c) % n]
            o_members = other.tuples
            if not o_members:
                continue
            ot = o_members[int(rng.integers(len(o_members)))]
            out.append(RelationTuple(t.v0, t.v1, t.v2, ot.v3))
    return out


@dataclass
class HarnessDump:
    plans: list
    tuples: list
    oracle: RelationOracle

    @property
    def members(self):
        return [t for t in self.tuples if t.verdict]


def synthesize_dump(spec: MetricSpec, points, sampling: Optional[Sampling] = None, seed: int = 0,
                    patch: Optional[PatchSpec] = None, oracle: Optional[RelationOracle] = None,
                    library: bool = True) -> HarnessDump:
    """Candidate tuples around every point, decided by the relation oracle."""
    sampling = sampling or Sampling()
    rng = np.random.default_rng(seed)
    oracle = oracle or RelationOracle(spec)
    plans = [synthesize_point(spec, q, sampling, rng, patch, library) for q in np.atleast_2d(points)]
    cands = [t for p in plans for t in p.tuples]
    decoys = decoy_tuples(plans, rng, sampling.decoys)
    decided = oracle.evaluate(cands + decoys)
    return HarnessDump(plans, decided, oracle)


def demo_tuples() -> list:
    """Worked flat-diamond candidates: one member, a span failure and a displaced source."""
    axes = np.eye(3)
    src = [BoundaryLightVector(np.r_[-0.5, -axes[i] / 2], np.r_[1.0, axes[i]], "S-") for i in range(3)]
    w0 = np.array([1 / 3 + 1 / np.sqrt(3), 1 / 3 - 1 / np.sqrt(3), 1 / 3])
    member = RelationTuple(BoundaryLightVector(np.r_[0.5, w0 / 2], np.r_[1.0, w0], "S+"), *src)
    diag = np.ones(3) / np.sqrt(3)
    no_span = RelationTuple(BoundaryLightVector(np.r_[0.5, diag / 2], np.r_[1.0, diag], "S+"), *src)
    shifted = 0.5 * np.array([0.2, 0.0, -np.sqrt(0.96)])
    displaced = RelationTuple(member.v0, src[0], src[1],
                              BoundaryLightVector(np.r_[-0.5, shifted], np.r_[1.0, axes[2]], "S-"))
    return [member, no_span, displaced]
