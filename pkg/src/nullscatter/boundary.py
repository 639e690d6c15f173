"""Boundary light vectors, patches of S+/S- and boundary generators."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError
from .geodesics import transversality
from .metric import (DEFAULT_NULL_TOL, MetricSpec, boundary_defining, inner, null_vector,
                     reference_norm)
from .sampling import angle_between, fibonacci_cap

SIDES = ("S+", "S-")


@dataclass(frozen=True, eq=False)
class BoundaryLightVector:
    """A boundary point p on S+ or S- with a future null transversal vector w."""

    p: np.ndarray
    w: np.ndarray
    side: str

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(4))
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(4))
        if self.side not in SIDES:
            raise InputError(f"side must be S+ or S-, got {self.side!r}")

    @property
    def ray(self) -> np.ndarray:
        """w scaled to unit T-component: a metric-free ray representative."""
        return self.w / self.w[0]

    def key(self, digits: int = 12) -> tuple:
        return (self.side,) + tuple(np.round(np.concatenate([self.p, self.ray]), digits))

    def to_dict(self) -> dict:
        return {"side": self.side, "p": [float(x) for x in self.p], "w": [float(x) for x in self.w]}

    @classmethod
    def from_dict(cls, data) -> "BoundaryLightVector":
        try:
            return cls(np.array(data["p"], dtype=float), np.array(data["w"], dtype=float), data["side"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed boundary vector {data!r}: {exc}") from exc

    def __repr__(self):
        return f"BLV({self.side}, p={np.round(self.p, 6).tolist()}, w={np.round(self.w, 6).tolist()})"


def boundary_residual(v: BoundaryLightVector) -> float:
    fp, fm = boundary_defining(v.p)
    return float(abs(fp if v.side == "S+" else fm))


def validate(spec: MetricSpec, v: BoundaryLightVector, hit_tol=1e-10, null_tol=DEFAULT_NULL_TOL,
             grazing_tol=1e-6) -> None:
    """Raise InputError unless v is a valid element of L(S+) or L(S-)."""
    if boundary_residual(v) > hit_tol:
        raise InputError(f"{v!r} is not on {v.side} (residual {boundary_residual(v):.2e})")
    radius = np.linalg.norm(v.p[1:])
    if not 0 < radius < 1:
        raise InputError(f"{v!r}: boundary point must satisfy 0<|X|<1")
    norm2 = float(inner(spec, v.p, v.w, v.w)[0])
    if abs(norm2) > null_tol * float(reference_norm(spec, v.p, v.w)[0]) ** 2:
        raise InputError(f"{v!r}: vector not null (g(w,w)={norm2:.2e})")
    if v.w[0] <= 0:
        raise InputError(f"{v!r}: vector not future-pointing")
    if transversality(spec, v.p, v.w, v.side) >= -grazing_tol:
        raise InputError(f"{v!r}: vector not transversal to {v.side}")


def boundary_point(side: str, direction, t: float) -> np.ndarray:
    """Point on S+ (t in (0,1)) or S- (t in (-1,0)) over the unit ``direction``."""
    a = np.asarray(direction, dtype=float)
    a = a / np.linalg.norm(a)
    radius = 1 - t if side == "S+" else 1 + t
    return np.concatenate([[t], radius * a])


def vector_at(spec: MetricSpec, side: str, point, direction) -> BoundaryLightVector:
    """Future null vector at a boundary point with the given spatial direction."""
    w = null_vector(spec, point, direction)
    return BoundaryLightVector(np.asarray(point, dtype=float), w, side)


def generator_direction(points) -> np.ndarray:
    """Radial unit direction X/|X| identifying the boundary generator."""
    pts = np.atleast_2d(points)
    return pts[:, 1:] / np.linalg.norm(pts[:, 1:], axis=1, keepdims=True)


@dataclass(frozen=True)
class GeneratorCurve:
    """Null generator mu_a of S+ or S-, parameterized by the time coordinate."""

    side: str
    direction: np.ndarray

    @property
    def t_range(self):
        return (0.0, 1.0) if self.side == "S+" else (-1.0, 0.0)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        a = np.asarray(self.direction, dtype=float)
        a = a / np.linalg.norm(a)
        radius = 1 - t if self.side == "S+" else 1 + t
        out = np.column_stack([t, radius[:, None] * a])
        return out


def boundary_generators(side: str, direction) -> GeneratorCurve:
    if side not in SIDES:
        raise InputError(f"side must be S+ or S-, got {side!r}")
    return GeneratorCurve(side, np.asarray(direction, dtype=float))


@dataclass(frozen=True)
class PatchSpec:
    """Open patch of S+ or S-: a cap of generators times a time interval."""

    side: str
    center: tuple
    half_angle: float
    t_range: tuple

    def __post_init__(self):
        if self.side not in SIDES:
            raise InputError(f"side must be S+ or S-, got {self.side!r}")
        lo, hi = self.t_range
        allowed = (0.0, 1.0) if self.side == "S+" else (-1.0, 0.0)
        if not (allowed[0] <= lo < hi <= allowed[1]):
            raise InputError(f"patch time range {self.t_range} outside {allowed}")

    @property
    def axis(self) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        return c / np.linalg.norm(c)

    def contains(self, points, tol: float = 1e-9) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        fp, fm = boundary_defining(pts)
        level = fp if self.side == "S+" else fm
        lo, hi = self.t_range
        radius = np.linalg.norm(pts[:, 1:], axis=1)
        ok = (np.abs(level) <= tol) & (radius > 0) & (pts[:, 0] > lo) & (pts[:, 0] < hi)
        ang = angle_between(pts[:, 1:], np.broadcast_to(self.axis, (len(pts), 3)))
        return ok & (ang <= self.half_angle + 1e-12)

    def sample_points(self, n_directions: int, n_times: int) -> np.ndarray:
        dirs = fibonacci_cap(self.axis, self.half_angle, n_directions)
        lo, hi = self.t_range
        times = lo + (hi - lo) * (np.arange(n_times) + 0.5) / n_times
        return np.array([boundary_point(self.side, d, t) for t in times for d in dirs]).reshape(-1, 4)

    def to_dict(self):
        return {"side": self.side, "center": list(map(float, self.center)),
                "half_angle": float(self.half_angle), "t_range": list(map(float, self.t_range))}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(data["side"], tuple(data["center"]), float(data["half_angle"]),
                       tuple(data["t_range"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed patch {data!r}: {exc}") from exc


def full_patch(side: str) -> PatchSpec:
    return PatchSpec(side, (0.0, 0.0, 1.0), np.pi, (0.0, 1.0) if side == "S+" else (-1.0, 0.0))


def vectors_from_hits(spec: MetricSpec, trajectories, side: str) -> list[Optional[BoundaryLightVector]]:
    """Boundary light vectors at the hits of traced rays (None for missing or grazing hits)."""
    out = []
    for traj in trajectories:
        hit = traj.hit
        if hit is None or hit.grazing or hit.which != side:
            out.append(None)
        else:
            out.append(BoundaryLightVector(hit.point, hit.tangent, side))
    return out
