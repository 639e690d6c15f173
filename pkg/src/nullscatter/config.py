"""Run configuration: tolerances, sampling densities and mode."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import json

from .errors import InputError


@dataclass
class Tolerances:
    null: float = 1e-10           # relative null band in the reference norm
    hamiltonian: float = 1e-9     # relative Hamiltonian drift
    hit: float = 1e-10            # boundary residual of hit points
    intersect: float = 1e-7       # reference-norm distance for geodesic meetings
    span: float = 1e-6            # relative least-squares residual
    member: float = 0.0           # 0 means 3x the U+ grid spacing
    theta_tan: float = 1e-3       # tangent-plane angle (rad)
    sigma_chart: float = 1e-4     # relative smallest singular value of chart Jacobians
    sigma_min: float = 1e-6       # relative smallest singular value of span frames
    distinct: float = 1e-6        # reference-norm distance separating boundary points
    connect: float = 1e-6         # second-geodesic residual
    smooth: float = 1e-4          # RMS normal deviation of local surface fits
    grazing: float = 1e-6         # normalized transversality floor


@dataclass
class Sampling:
    k_neighbors: int = 12
    cone_samples: int = 512
    cut_targets: int = 32
    certificate_seeds: int = 16
    observations: int = 60        # observation rays per interior point (harness)
    library_rays: int = 8         # neighbouring rays per library set (harness)
    retraction: float = 0.1       # parameter retraction for library points (harness)
    cluster_sources: int = 12     # sources per V1 cluster (harness)
    cluster_angle: float = 0.15   # angular radius of V1 clusters (harness)
    decoys: int = 2               # non-member tuples per interior point (harness)
    observation_angle: float = 0.35  # half-angle of the observation fan per point (harness)
    library_angle: float = 0.08   # ring radius of library fans (harness)
    generator_tol: float = 0.05   # generator angle window of the earliest-part test
    lipschitz: float = 1.0        # slope allowance of the earliest-part test
    min_set_size: int = 20        # smaller smooth sets serve only as library


@dataclass
class RunConfig:
    metric: str = "minkowski"
    mode: str = "round-trip"      # forward-only, blind-reconstruct, round-trip
    seed: int = 0
    tolerances: Tolerances = field(default_factory=Tolerances)
    sampling: Sampling = field(default_factory=Sampling)
    extra: dict = field(default_factory=dict)
    defaulted: list = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        return out


MODES = ("forward-only", "blind-reconstruct", "round-trip")


def _fill(cls, data: dict, prefix: str, defaulted: list):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise InputError(f"unknown {prefix} fields: {sorted(unknown)}")
    kwargs = {}
    for name, fld in names.items():
        if name in data:
            value = data[name]
            default = fld.default
            try:
                value = type(default)(value)
            except (TypeError, ValueError) as exc:
                raise InputError(f"{prefix}.{name}: cannot convert {value!r}") from exc
            if isinstance(value, (int, float)) and prefix == "tolerances" and value < 0:
                raise InputError(f"{prefix}.{name} must be non-negative")
            kwargs[name] = value
        else:
            defaulted.append(f"{prefix}.{name}")
    return cls(**kwargs)


def load_config(source=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON or YAML config; omitted fields fall back to defaults and are listed."""
    data: dict = {}
    if source is not None:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        if path.suffix in (".yaml", ".yml"):
            import yaml
            data = yaml.safe_load(text) or {}
        else:
            try:
                data = json.loads(text) if text.strip() else {}
            except json.JSONDecodeError as exc:
                raise InputError(f"config {path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise InputError("config must be a mapping")
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name:
            data.setdefault(section, {})[name] = value
        else:
            data[key] = value
    defaulted: list = []
    tol = _fill(Tolerances, data.pop("tolerances", {}) or {}, "tolerances", defaulted)
    samp = _fill(Sampling, data.pop("sampling", {}) or {}, "sampling", defaulted)
    top = {}
    for name in ("metric", "mode", "seed"):
        if name in data:
            top[name] = data.pop(name)
        else:
            defaulted.append(name)
    cfg = RunConfig(tolerances=tol, sampling=samp, extra=data, defaulted=defaulted, **top)
    if cfg.mode not in MODES:
        raise InputError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    cfg.seed = int(cfg.seed)
    return cfg
