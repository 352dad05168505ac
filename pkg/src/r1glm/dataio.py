"""Deterministic file formats for datasets, fits and reports.

The binary matrix format is a single JSON header line (rows, cols,
row-major order) followed by little-endian 64-bit floats. All JSON and
CSV output is canonicalized (sorted keys, repr floats) so identical
inputs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

MATRIX_SUFFIX = ".bin"


def write_matrix(path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    if matrix.ndim != 2:
        raise ValueError("matrix must be 2-d")
    header = json.dumps(
        {"rows": matrix.shape[0], "cols": matrix.shape[1],
         "order": "row-major"},
        sort_keys=True, separators=(",", ":"),
    )
    with open(path, "wb") as handle:
        handle.write(header.encode("ascii") + b"\n")
        handle.write(matrix.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as handle:
        header = json.loads(handle.readline().decode("ascii"))
        if header.get("order") != "row-major":
            raise ValueError("unsupported matrix ordering")
        rows, cols = int(header["rows"]), int(header["cols"])
        data = np.frombuffer(handle.read(rows * cols * 8), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError("truncated matrix file")
    return data.reshape(rows, cols).copy()


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=float)
    lines = [",".join(repr(float(x)) for x in row) for row in matrix]
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    with open(path) as handle:
        rows = [
            [float(x) for x in line.split(",")]
            for line in handle.read().strip().splitlines()
        ]
    return np.asarray(rows, dtype=float)


def write_json(path, payload) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    with open(path, "w", newline="") as handle:
        handle.write(text + "\n")


def read_json(path):
    with open(path) as handle:
        return json.load(handle)


def write_table_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for cell in row:
            if isinstance(cell, float):
                cells.append(repr(float(cell)))
            else:
                cells.append(str(cell))
        lines.append(",".join(cells))
    with open(path, "w", newline="") as handle:
        handle.write("\n".join(lines) + "\n")


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_manifest(config: dict, seed: int, version: str, outputs: dict,
                   timings: dict | None = None, extra: dict | None = None) -> dict:
    """Run record: config hash, seed, per-file digests and stage timings.

    Timings are informational and vary between runs; every other field is
    reproducible from the inputs.
    """
    manifest = {
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
        "tool_version": version,
        "outputs": dict(sorted(outputs.items())),
        "timings_seconds": timings or {},
    }
    if extra:
        manifest.update(extra)
    return manifest
