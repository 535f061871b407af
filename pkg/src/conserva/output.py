"""Deterministic writers: CSV with a config header, JSON summaries, binary matrices.

Nothing time-dependent is written, so re-running a config with the same
seed reproduces every file byte for byte.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"CNSVMAT1"  # 8 bytes, followed by two little-endian uint32 dims


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if x != x or x in (float("inf"), float("-inf")):
            return str(x)
        return x
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path: Path, payload: dict, config: dict, seed: int) -> Path:
    body = {"config": config, "seed": int(seed), "result": payload}
    path.write_text(dumps(body), encoding="utf-8")
    return path


def write_csv(path: Path, header: list[str], rows, config: dict, seed: int) -> Path:
    """CSV whose leading ``#`` lines carry the resolved config and seed."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# config: " + json.dumps(_plain(config), sort_keys=True) + "\n")
        fh.write(f"# seed: {int(seed)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _cell(v):
    v = _plain(v)
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_matrix(path: Path, matrix: np.ndarray, meta: dict, config: dict, seed: int) -> Path:
    """Raw float64 matrix after a 16-byte header; metadata goes to ``<path>.json``."""
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("matrix dump expects a 2-d array")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + struct.pack("<II", *m.shape))
        fh.write(m.tobytes())
    write_json(Path(str(path) + ".json"), meta, config, seed)
    return path


def read_matrix(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MATRIX_MAGIC:
        raise ValueError("not a matrix dump")
    rows, cols = struct.unpack("<II", raw[8:16])
    return np.frombuffer(raw[16:], dtype="<f8").reshape(rows, cols).copy()
