"""Deterministic report artifacts: JSON with sorted keys, CSV tables.

Writes go through a temp file in the destination directory followed by an
atomic rename, so a crashed run never leaves a half-written report.  No
timestamps or environment data enter the payloads; rerunning a scenario
reproduces the artifacts byte for byte.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

REPORT_SCHEMA_VERSION = 1

_SCHEMA_PATH = Path(__file__).parent / "report_schema.json"


class ReportError(ValueError):
    pass


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".",
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    """Coerce numpy scalars/arrays and tuples into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        try:
            return obj.item()
        except (AttributeError, ValueError):
            pass
    if hasattr(obj, "tolist"):
        return obj.tolist()
    return obj


def write_json(path, payload: dict) -> None:
    text = json.dumps(_jsonable(payload), sort_keys=True, indent=2,
                      allow_nan=False)
    atomic_write_text(path, text + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ReportError(
                f"row width {len(row)} does not match header {len(header)}")
        lines.append(",".join(_format_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def report_schema() -> dict:
    return json.loads(_SCHEMA_PATH.read_text())


def validate_report(payload: dict) -> None:
    """Structural check of a pipeline report against the shipped schema."""
    schema = report_schema()
    required = schema.get("required", [])
    missing = [k for k in required if k not in payload]
    if missing:
        raise ReportError(f"report missing required keys: {missing}")
    if payload.get("schema") != REPORT_SCHEMA_VERSION:
        raise ReportError(
            f"report schema version {payload.get('schema')!r}, "
            f"expected {REPORT_SCHEMA_VERSION}")
    stages = payload.get("stages")
    if not isinstance(stages, list):
        raise ReportError("report stages must be a list")
    statuses = {"pass", "fail", "skipped", "hypotheses-not-met"}
    for st in stages:
        if not isinstance(st, dict) or "name" not in st or "status" not in st:
            raise ReportError(f"malformed stage entry: {st!r}")
        if st["status"] not in statuses:
            raise ReportError(f"unknown stage status {st['status']!r}")


def stage_csv_rows(result_dict: dict):
    """Flatten a pipeline report into (stage, status) rows for a summary CSV."""
    return [(st["name"], st["status"]) for st in result_dict["stages"]]
