"""Serialization: atomic writes, JSON-lines relation dumps, CSV tables and seed files."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InputError
from .oracle import RelationTuple

SEED_COLUMNS = ("t", "x", "y", "z", "vt", "vx", "vy", "vz")


def jsonable(obj):
    """Recursively convert numpy containers and scalars to plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if np.isnan(value):
            return None
        if np.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return obj


def atomic_write_text(path, text: str) -> Path:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_text(path, dumps_json(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def write_jsonl(path, records: Iterable) -> Path:
    lines = [json.dumps(jsonable(r), sort_keys=True, separators=(",", ":")) for r in records]
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path, problems: list | None = None) -> list[tuple[int, dict]]:
    """(line number, record) pairs; blank lines are skipped.

    Unparseable lines raise InputError unless a ``problems`` list is given,
    in which case they are recorded there and skipped.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict):
                raise InputError("record must be an object")
        except (json.JSONDecodeError, InputError) as exc:
            message = getattr(exc, "msg", None) or str(exc)
            if problems is None:
                raise InputError(f"{path}: line {lineno}: {message}") from exc
            problems.append({"line": lineno, "error": message})
            continue
        out.append((lineno, record))
    return out


def write_dump(path, tuples: Iterable[RelationTuple]) -> Path:
    return write_jsonl(path, (t.to_dict() for t in tuples))


def read_dump(path, keep_witness: bool = False, strict: bool = True):
    """Relation tuples of a dump.

    With ``strict`` a schema violation raises InputError naming the line;
    otherwise bad lines are skipped and returned as diagnostics.
    """
    tuples, problems = [], []
    for lineno, record in read_jsonl(path, None if strict else problems):
        try:
            tuples.append(RelationTuple.from_dict(record, keep_witness=keep_witness))
        except InputError as exc:
            if strict:
                raise InputError(f"{path}: line {lineno}: {exc}") from exc
            problems.append({"line": lineno, "error": str(exc)})
    return (tuples, problems) if not strict else tuples


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([f"{float(v):.17g}" if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_seeds(path) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Seed rows (line, point, vector) from a CSV with columns t,x,y,z,vt,vx,vy,vz.

    A header row is optional; lines starting with '#' are comments.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read seeds {path}: {exc}") from exc
    out = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in row]
        if lineno == 1 and cells[0].lower() in ("t", "T"):
            continue
        if len(cells) != len(SEED_COLUMNS):
            raise InputError(f"{path}: line {lineno}: expected {len(SEED_COLUMNS)} columns, got {len(cells)}")
        try:
            values = np.array([float(c) for c in cells])
        except ValueError as exc:
            raise InputError(f"{path}: line {lineno}: {exc}") from exc
        if not np.all(np.isfinite(values)):
            raise InputError(f"{path}: line {lineno}: non-finite value")
        out.append((lineno, values[:4], values[4:]))
    return out
