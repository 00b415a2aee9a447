"""Report and checkpoint IO.

Every CSV report carries a reproducibility header: the timestamp isolated
on its own line (so byte comparisons can drop it), then the seed and the
full resolved configuration as comment lines. Checkpoints are versioned
JSON with a config echo and carry no timestamp, so identical runs produce
byte-identical files.
"""

from __future__ import annotations

import json
import os
from datetime import datetime, timezone

import numpy as np

CHECKPOINT_VERSION = 1


class ArtifactError(ValueError):
    pass


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_report(path, columns: list[str], rows, config: dict | None = None,
                 seed=None, timestamp: bool = True) -> None:
    """Write a CSV report with the reproducibility header."""
    lines = []
    if timestamp:
        lines.append(f"# timestamp = {datetime.now(timezone.utc).isoformat()}")
    if seed is not None:
        lines.append(f"# seed = {seed}")
    for key in sorted(config or {}):
        lines.append(f"# config.{key} = {_fmt((config or {})[key])}")
    lines.append(",".join(columns))
    for row in rows:
        if isinstance(row, dict):
            row = [row[c] for c in columns]
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_report(path):
    """Read a report; returns (meta, columns, rows) with rows as dicts of strings."""
    meta: dict[str, str] = {}
    columns: list[str] | None = None
    rows: list[dict[str, str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            parts = line.split(",")
            if columns is None:
                columns = parts
                continue
            if len(parts) != len(columns):
                raise ArtifactError(f"{path}: row has {len(parts)} fields, expected {len(columns)}")
            rows.append(dict(zip(columns, parts)))
    if columns is None:
        raise ArtifactError(f"{path}: no header row found")
    return meta, columns, rows


def report_body(path) -> str:
    """Report content with the timestamp line removed, for byte comparisons."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [l for l in fh.read().splitlines() if not l.startswith("# timestamp =")]
    return "\n".join(lines) + "\n"


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], config: dict | None = None) -> None:
    obj = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": {k: _jsonable(v) for k, v in sorted((config or {}).items())},
        "params": {k: arrays[k].tolist() for k in sorted(arrays)},
        "shapes": {k: list(arrays[k].shape) for k in sorted(arrays)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (kind, arrays, config). Unknown versions are rejected."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != CHECKPOINT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {obj.get('format_version')}")
    arrays = {}
    for name, data in obj["params"].items():
        arr = np.asarray(data, dtype=float)
        arrays[name] = arr.reshape(obj["shapes"][name])
    return obj["kind"], arrays, obj.get("config", {})


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.bool_,)):
        return bool(v)
    return v


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
