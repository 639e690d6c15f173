"""Command-line entry points: trace, lens, relation, reconstruct, layerstrip, selftest."""
from __future__ import annotations

import dataclasses
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import io as nio
from .boundary import BoundaryLightVector, validate
from .config import RunConfig, Sampling, Tolerances, load_config
from .errors import (CertificateViolation, DegenerateVectorError, GrazingHit, InputError,
                     MetricSignatureError, NullScatterError, ResolutionInsufficient,
                     ScheduleError, SeedNotNull)
from .metric import MetricSpec, parse_metric

log = logging.getLogger("nullscatter")

EXIT_OK, EXIT_INPUT, EXIT_VERIFY = 0, 2, 3
INPUT_ERRORS = (InputError, SeedNotNull, MetricSignatureError, DegenerateVectorError)
VERIFY_ERRORS = (CertificateViolation, ResolutionInsufficient, ScheduleError, GrazingHit)


class VerificationFailure(NullScatterError):
    """A run finished but failed its stated check."""


def _option_name(section: str, name: str) -> str:
    return f"{section}__{name}"


def _override_options(func):
    from .layers import LayerConfig

    blocks = [("tolerances", Tolerances, ""), ("sampling", Sampling, ""), ("layers", LayerConfig, "layers-")]
    for section, cls, prefix in reversed(blocks):
        for fld in reversed(dataclasses.fields(cls)):
            if section == "layers" and fld.name == "seed":
                continue
            flag = "--" + prefix + fld.name.replace("_", "-")
            func = click.option(flag, _option_name(section, fld.name), type=type(fld.default),
                                default=None, help=f"override {section}.{fld.name}")(func)
    return func


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON or YAML run configuration")
@click.option("--metric", default=None, help="metric spec, e.g. minkowski, bump:8,0.15, conformal:0.1*T")
@click.option("--mode", default=None, help="forward-only, blind-reconstruct or round-trip")
@click.option("--seed", type=int, default=None)
@click.option("-v", "--verbose", count=True)
@_override_options
@click.pass_context
def cli(ctx, config_path, metric, mode, seed, verbose, **overrides):
    """Null geodesics, scattering relations and their inversion in diamond spacetimes."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    flat = {k.replace("__", "."): v for k, v in overrides.items()}
    flat.update({"metric": metric, "mode": mode, "seed": seed})
    ctx.obj = load_config(config_path, flat)


def _spec(cfg: RunConfig) -> MetricSpec:
    return parse_metric(cfg.metric)


def _layer_config(cfg: RunConfig):
    from .layers import LayerConfig

    defaulted: list = []
    data = dict(cfg.extra.get("layers") or {})
    data.setdefault("seed", cfg.seed)
    layer_cfg = LayerConfig.from_dict(data, defaulted)
    return layer_cfg, defaulted


def manifest(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    from . import __version__

    out = {"command": command, "version": __version__, "config": cfg.to_dict(),
           "defaulted": sorted(cfg.defaulted)}
    if command == "layerstrip":
        layer_cfg, defaulted = _layer_config(cfg)
        out["layers"] = dataclasses.asdict(layer_cfg)
        out["defaulted"] = sorted(cfg.defaulted + defaulted)
    out.update(extra or {})
    return out


# ---------------------------------------------------------------- trace

@cli.command()
@click.argument("seeds", type=click.Path(dir_okay=False))
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--direction", type=click.Choice(["forward", "backward"]), default="forward")
@click.option("--samples", type=int, default=64, show_default=True, help="uniform samples per ray")
@click.pass_obj
def trace(cfg: RunConfig, seeds, out_dir, direction, samples):
    """Trace null geodesics from a CSV of seeds (t,x,y,z,vt,vx,vy,vz)."""
    from .geodesics import check_null_seed, trace_batch

    spec = _spec(cfg)
    rows = nio.read_seeds(seeds)
    out = Path(out_dir)
    for lineno, point, vector in rows:
        try:
            check_null_seed(spec, point, vector, cfg.tolerances.null)
        except (SeedNotNull, DegenerateVectorError) as exc:
            raise InputError(f"{seeds}: line {lineno}: {exc}") from exc
    sign = 1 if direction == "forward" else -1
    trajs = []
    if rows:
        trajs = trace_batch(spec, np.array([r[1] for r in rows]), np.array([r[2] for r in rows]), sign,
                            null_tol=cfg.tolerances.null)
    header = ("s", "t", "x", "y", "z", "vt", "vx", "vy", "vz")
    hits = []
    width = max(len(str(len(rows))), 3)
    for k, ((lineno, _, _), traj) in enumerate(zip(rows, trajs), 1):
        svals, xs = traj.samples(samples)
        tangents = np.atleast_2d(traj.tangent(svals))
        table = [[s, *x, *v] for s, x, v in zip(svals, xs, tangents)]
        nio.write_csv(out / f"trajectory_{k:0{width}d}.csv", header, table)
        hit = traj.hit
        if hit is None:
            hits.append([k, lineno, "none", "", "", "", "", "", "", "", "", traj.s_end, ""])
        else:
            hits.append([k, lineno, hit.which, *hit.point, *hit.tangent, hit.parameter, int(hit.grazing)])
    if rows:
        nio.write_csv(out / "hits.csv", ("row", "line", "side", "t", "x", "y", "z", "wt", "wx", "wy", "wz",
                                          "parameter", "grazing"), hits)
    nio.write_json(out / "manifest.json", manifest(cfg, "trace", {"seeds": str(seeds), "rays": len(rows)}))
    click.echo(f"traced {len(rows)} rays into {out}")


# ---------------------------------------------------------------- lens

@cli.command()
@click.argument("vectors", type=click.Path(dir_okay=False))
@click.option("-o", "--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--inverse", is_flag=True, help="map S+ vectors back to S-")
@click.pass_obj
def lens(cfg: RunConfig, vectors, out_path, inverse):
    """Lens relation images of boundary light vectors (JSON lines)."""
    from .oracle import RelationOracle

    spec = _spec(cfg)
    records = nio.read_jsonl(vectors)
    side = "S+" if inverse else "S-"
    items = []
    for lineno, rec in records:
        try:
            vec = BoundaryLightVector.from_dict(rec)
            if vec.side != side:
                raise InputError(f"expected a vector on {side}")
            validate(spec, vec, null_tol=cfg.tolerances.null)
        except InputError as exc:
            raise InputError(f"{vectors}: line {lineno}: {exc}") from exc
        items.append(vec)
    oracle = RelationOracle(spec, tolerances=cfg.tolerances)
    out = [{"input": v.to_dict(), "image": (oracle.inverse_lens(v) if inverse else oracle.lens(v)).to_dict()}
           for v in items]
    nio.write_jsonl(out_path, out)
    nio.write_json(str(out_path) + ".manifest.json", manifest(cfg, "lens", {"vectors": len(items)}))
    click.echo(f"wrote {len(out)} lens images to {out_path}")


# ---------------------------------------------------------------- relation

@cli.command()
@click.option("-o", "--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--points", type=int, default=10, show_default=True, help="interior points to synthesize around")
@click.option("--half-height", type=float, default=0.4, show_default=True)
@click.option("--demo/--no-demo", default=False, help="append the worked flat-diamond candidates")
@click.option("--library/--no-library", default=True)
@click.pass_obj
def relation(cfg: RunConfig, out_path, points, half_height, demo, library):
    """Relation dump (JSON lines) from the geometric oracle."""
    from .cutlocus import no_cut_certificate
    from .harness import demo_tuples, diamond_points, synthesize_dump
    from .oracle import RelationOracle

    spec = _spec(cfg)
    if points < 0:
        raise InputError("--points must be non-negative")
    rng = np.random.default_rng(cfg.seed)
    pts = diamond_points(points, rng, half_height) if points else np.zeros((0, 4))
    if points:
        cert = no_cut_certificate(spec, pts, cfg.sampling.certificate_seeds)
        if not cert.certified:
            raise CertificateViolation(f"no-cut certificate failed at {len(cert.failures)} samples")
    oracle = RelationOracle(spec, tolerances=cfg.tolerances)
    tuples = []
    if points:
        dump = synthesize_dump(spec, pts, cfg.sampling, seed=cfg.seed, oracle=oracle, library=library)
        tuples = dump.tuples
    if demo and spec.conformally_flat:
        tuples = oracle.evaluate(demo_tuples()) + tuples
    nio.write_dump(out_path, tuples)
    stem = Path(out_path)
    nio.write_csv(stem.with_name(stem.name + ".points.csv"), ("t", "x", "y", "z"), pts.tolist())
    members = sum(1 for t in tuples if t.verdict)
    nio.write_json(stem.with_name(stem.name + ".manifest.json"),
                   manifest(cfg, "relation", {"points": points, "half_height": half_height, "demo": demo,
                                              "library": library, "records": len(tuples), "members": members}))
    click.echo(f"wrote {len(tuples)} records ({members} members) to {out_path}")


# ---------------------------------------------------------------- reconstruct

def _plot_rows(label, dset):
    rows = []
    for v in dset:
        a = v.p[1:] / np.linalg.norm(v.p[1:])
        theta = float(np.arccos(np.clip(a[2], -1, 1)))
        phi = float(np.arctan2(a[1], a[0]))
        rows.append([label, theta, phi, float(v.p[0])])
    return rows


@cli.command()
@click.argument("dump", type=click.Path(dir_okay=False))
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--truth", type=click.Path(dir_okay=False), default=None,
              help="CSV of true points (round-trip mode)")
@click.option("--max-error", type=float, default=None, help="fail (exit 3) above this point error")
@click.pass_obj
def reconstruct(cfg: RunConfig, dump, out_dir, truth, max_error):
    """Rebuild observation sets from a relation dump; round-trip mode also recovers points."""
    from .reconstruction import (conformal_recover, normalized_form_distance, point_recovery,
                                 reconstruct_all, tangents_at)

    if cfg.mode == "forward-only":
        raise InputError("reconstruct needs mode blind-reconstruct or round-trip")
    tuples, problems = nio.read_dump(dump, keep_witness=False, strict=False)
    result = reconstruct_all([t for t in tuples if t.verdict], cfg.sampling, cfg.tolerances)
    out = Path(out_dir)
    nio.write_jsonl(out / "sets.jsonl", (s.to_dict() for s in result.sets))
    plot = [row for s in result.sets for row in _plot_rows(s.label, s.regular)]
    nio.write_csv(out / "plot_observations.csv", ("label", "theta", "phi", "t"), plot)
    report = {"records": len(tuples), "members": sum(1 for t in tuples if t.verdict),
              "schema_problems": problems, "sets": len(result.sets), "merged": result.merged,
              "diagnostics": result.diagnostics,
              "sizes": [{"label": s.label, "regular": len(s.regular), "earliest": len(s.earliest),
                         "candidate": len(s.candidate)} for s in result.sets]}
    failed = False
    if cfg.mode == "round-trip":
        spec = _spec(cfg)
        truth_pts = None
        if truth is not None:
            rows = []
            for lineno, row in enumerate(Path(truth).read_text().splitlines(), 1):
                if lineno == 1 and row.startswith("t"):
                    continue
                try:
                    rows.append([float(c) for c in row.split(",")])
                except ValueError as exc:
                    raise InputError(f"{truth}: line {lineno}: {exc}") from exc
            truth_pts = np.array(rows).reshape(-1, 4)
        estimates, fits = [], []
        for s in result.sets:
            est = point_recovery(spec, s.regular)
            row = [s.label, *est.point, est.residual, int(est.ill_posed)]
            if truth_pts is not None and len(truth_pts):
                row.append(float(np.min(np.linalg.norm(truth_pts - est.point, axis=1))))
            estimates.append(row)
            try:
                fit = conformal_recover(tangents_at(spec, s.regular, est.point))
                g, _ = spec.metric_matrices(est.point[None])
                fits.append({"label": s.label, **fit.to_dict(),
                             "distance_to_metric": normalized_form_distance(fit.form, g[0])})
            except NullScatterError as exc:
                fits.append({"label": s.label, "error": str(exc)})
        header = ["label", "t", "x", "y", "z", "residual", "ill_posed"]
        if truth_pts is not None:
            header.append("error")
        nio.write_csv(out / "points.csv", header, estimates)
        nio.write_jsonl(out / "conformal_fits.jsonl", fits)
        if truth_pts is not None and estimates:
            errors = [r[-1] for r in estimates]
            report["max_point_error"] = float(max(errors))
            report["truth_points"] = int(len(truth_pts))
            failed = max_error is not None and max(errors) > max_error
    nio.write_json(out / "report.json", report)
    nio.write_json(out / "manifest.json", manifest(cfg, "reconstruct", {"dump": str(dump)}))
    click.echo(f"reconstructed {len(result.sets)} sets from {report['members']} members into {out}")
    if failed:
        raise VerificationFailure(f"point error {report['max_point_error']:.3g} above {max_error}")


# ---------------------------------------------------------------- layerstrip

@cli.command()
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def layerstrip(cfg: RunConfig, out_dir):
    """Plan the layer-stripping schedule and run the step-size stabilization loop."""
    from .layers import run_pipeline

    spec = _spec(cfg)
    layer_cfg, defaulted = _layer_config(cfg)
    report = run_pipeline(spec, layer_cfg, sorted(cfg.defaulted + defaulted))
    out = Path(out_dir)
    nio.write_json(out / "report.json", report.to_dict())
    nio.write_json(out / "manifest.json", manifest(cfg, "layerstrip"))
    click.echo(f"coverage {report.coverage:.6f}, accepted step {report.accepted_step}")
    if not report.stabilized:
        raise ResolutionInsufficient(report.reason)


# ---------------------------------------------------------------- selftest

@cli.command()
@click.pass_obj
def selftest(cfg: RunConfig):
    """Fast flat-diamond checks of tracing, lens and relation verdicts."""
    from .geodesics import trace_batch
    from .harness import demo_tuples
    from .metric import minkowski
    from .oracle import RelationOracle

    spec = minkowski()
    checks = []
    traj = trace_batch(spec, [[0.0, 0.0, 0.0, 0.0]], [[1.0, 0.6, 0.8, 0.0]], 1)[0]
    s = np.linspace(0, traj.s_end, 9)
    line = np.outer(s, [1.0, 0.6, 0.8, 0.0])
    checks.append(("straight line", float(np.max(np.abs(traj.position(s) - line))) < 1e-10))
    oracle = RelationOracle(spec)
    image = oracle.lens(BoundaryLightVector([-0.5, 0.5, 0, 0], [1, -1, 0, 0], "S-"))
    checks.append(("lens closed form", bool(np.allclose(image.p, [0.5, -0.5, 0, 0], atol=1e-8))))
    verdicts = [t.verdict for t in oracle.evaluate(demo_tuples())]
    checks.append(("relation verdicts", verdicts == [True, False, False]))
    for name, ok in checks:
        click.echo(f"{'PASS' if ok else 'FAIL'} {name}")
    if not all(ok for _, ok in checks):
        raise VerificationFailure("selftest failed")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="nullscatter", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except INPUT_ERRORS as exc:
        click.echo(f"input error: {exc}", err=True)
        return EXIT_INPUT
    except VERIFY_ERRORS + (VerificationFailure,) as exc:
        click.echo(f"verification failure: {exc}", err=True)
        return EXIT_VERIFY
    except NullScatterError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
