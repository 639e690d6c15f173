import json

import numpy as np
import pytest

from nullscatter import io as nio
from nullscatter.cli import EXIT_INPUT, EXIT_OK, EXIT_VERIFY, main
from nullscatter.errors import InputError
from nullscatter.harness import demo_tuples

FAST = ["--cone-samples", "64", "--cut-targets", "8", "--certificate-seeds", "4", "--observations", "30"]


def write_seeds(path, rows, header=True):
    lines = ["t,x,y,z,vt,vx,vy,vz"] if header else []
    lines += [",".join(str(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_trace_straight_line(tmp_path):
    seeds = write_seeds(tmp_path / "seeds.csv", [[0, 0.2, 0, 0, 1, 1, 0, 0], [0, 0.2, 0, 0, 1, -1, 0, 0]])
    assert main(["trace", str(seeds), "-o", str(tmp_path / "out"), "--samples", "11"]) == EXIT_OK
    table = np.loadtxt(tmp_path / "out" / "trajectory_001.csv", delimiter=",", skiprows=1)
    s = table[:, 0]
    assert np.allclose(table[:, 1:5], np.array([0, 0.2, 0, 0]) + np.outer(s, [1, 1, 0, 0]), atol=1e-10)
    hits = (tmp_path / "out" / "hits.csv").read_text().splitlines()
    assert len(hits) == 3 and hits[1].split(",")[2] == "S+"
    assert float(hits[2].split(",")[11]) == pytest.approx(0.6, abs=1e-10)
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["command"] == "trace" and man["rays"] == 2


def test_trace_empty_file_and_bad_seeds(tmp_path, capsys):
    empty = write_seeds(tmp_path / "empty.csv", [])
    assert main(["trace", str(empty), "-o", str(tmp_path / "e")]) == EXIT_OK
    assert json.loads((tmp_path / "e" / "manifest.json").read_text())["rays"] == 0
    bad = write_seeds(tmp_path / "bad.csv", [[0, 0, 0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 0.5, 0, 0]])
    assert main(["trace", str(bad), "-o", str(tmp_path / "b")]) == EXIT_INPUT
    assert "line 3" in capsys.readouterr().err
    short = tmp_path / "short.csv"
    short.write_text("0,0,0\n")
    assert main(["trace", str(short), "-o", str(tmp_path / "s")]) == EXIT_INPUT
    assert main(["--metric", "bump:1", "trace", str(empty), "-o", str(tmp_path / "m")]) == EXIT_INPUT


def test_lens_command(tmp_path):
    vectors = tmp_path / "vectors.jsonl"
    nio.write_jsonl(vectors, [{"side": "S-", "p": [-0.5, 0.5, 0, 0], "w": [1, -1, 0, 0]}])
    out = tmp_path / "lens.jsonl"
    assert main(["lens", str(vectors), "-o", str(out)]) == EXIT_OK
    (_, rec), = nio.read_jsonl(out)
    assert np.allclose(rec["image"]["p"], [0.5, -0.5, 0, 0], atol=1e-8)
    assert main(["lens", str(vectors), "-o", str(out), "--inverse"]) == EXIT_INPUT


def test_relation_is_deterministic(tmp_path):
    args = FAST + ["relation", "--points", "2", "--half-height", "0.25"]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["--seed", "4"] + args + ["-o", str(a)]) == EXIT_OK
    assert main(["--seed", "4"] + args + ["-o", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes() and a.stat().st_size > 0
    tuples = nio.read_dump(a)
    assert any(t.verdict for t in tuples) and not all(t.verdict for t in tuples)


def test_relation_zero_points_and_demo(tmp_path):
    empty = tmp_path / "empty.jsonl"
    assert main(["relation", "--points", "0", "-o", str(empty)]) == EXIT_OK
    assert empty.read_text() == ""
    demo = tmp_path / "demo.jsonl"
    assert main(["relation", "--points", "0", "--demo", "-o", str(demo)]) == EXIT_OK
    got = nio.read_dump(demo)
    assert [t.verdict for t in got] == [True, False, False]
    assert np.allclose(got[0].v0.p, demo_tuples()[0].v0.p)
    assert main(["relation", "--points", "-1", "-o", str(demo)]) == EXIT_INPUT


def test_reconstruct_round_trip(tmp_path):
    dump = tmp_path / "dump.jsonl"
    assert main(["--seed", "2"] + FAST + ["relation", "--points", "2", "--half-height", "0.25",
                                          "-o", str(dump)]) == EXIT_OK
    truth = tmp_path / "dump.jsonl.points.csv"
    out = tmp_path / "rec"
    code = main(["--mode", "round-trip", "--observations", "30", "reconstruct", str(dump), "-o", str(out),
                 "--truth", str(truth), "--max-error", "1e-6"])
    assert code == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["sets"] >= 1 and report["max_point_error"] < 1e-6
    assert report["schema_problems"] == []
    fits = nio.read_jsonl(out / "conformal_fits.jsonl")
    assert all(rec.get("distance_to_metric", 1.0) < 1e-3 for _, rec in fits if "error" not in rec)
    # an impossible bound turns the same run into a verification failure
    assert main(["--mode", "round-trip", "--observations", "30", "reconstruct", str(dump), "-o", str(out),
                 "--truth", str(truth), "--max-error", "0"]) == EXIT_VERIFY


def test_reconstruct_truncated_dump_reports_partial(tmp_path):
    dump = tmp_path / "dump.jsonl"
    assert main(["relation", "--points", "0", "--demo", "-o", str(dump)]) == EXIT_OK
    text = dump.read_text()
    dump.write_text(text + text.splitlines()[0][:40] + "\n")
    out = tmp_path / "rec"
    assert main(["--mode", "blind-reconstruct", "reconstruct", str(dump), "-o", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    assert report["records"] == 3 and len(report["schema_problems"]) == 1
    assert report["schema_problems"][0]["line"] == 4
    with pytest.raises(InputError, match="line 4"):
        nio.read_dump(dump)
    assert main(["--mode", "forward-only", "reconstruct", str(dump), "-o", str(out)]) == EXIT_INPUT


def test_manifest_lists_defaulted_knobs(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"metric": "minkowski", "tolerances": {"null": 1e-9}}))
    seeds = write_seeds(tmp_path / "seeds.csv", [[0, 0, 0, 0, 1, 0, 1, 0]])
    assert main(["--config", str(cfg), "trace", str(seeds), "-o", str(tmp_path / "t")]) == EXIT_OK
    man = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert man["config"]["tolerances"]["null"] == 1e-9
    assert "tolerances.null" not in man["defaulted"]
    assert "tolerances.hit" in man["defaulted"] and "sampling.k_neighbors" in man["defaulted"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"tolerances": {"nul": 1}}))
    assert main(["--config", str(bad), "trace", str(seeds), "-o", str(tmp_path / "u")]) == EXIT_INPUT


def test_selftest_and_usage_errors(capsys):
    assert main(["selftest"]) == EXIT_OK
    assert capsys.readouterr().out.count("PASS") == 3
    assert main(["nonsense"]) == EXIT_INPUT
    assert main(["trace"]) == EXIT_INPUT
