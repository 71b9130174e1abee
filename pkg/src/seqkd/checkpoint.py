"""Checkpoint file format for named float64 tensors.

Text layout: an optional one-line JSON header (must start with '{'), then per
tensor a declaration line ``tensor <name> <rank> <dim0> <dim1> ...`` followed
by one line of space-separated decimal floats per row. Values are written
with repr so the round-trip is exact.

A little-endian binary variant keeps the same header/declaration lines but
stores each tensor's payload as raw '<f8' bytes; selected by ``binary=True``
and flagged in the declaration line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class CheckpointError(ValueError):
    pass


def _rows(data: np.ndarray):
    if data.ndim == 0:
        return data.reshape(1, 1)
    if data.ndim == 1:
        return data.reshape(1, -1)
    return data.reshape(data.shape[0], -1)


def save_tensors(path, tensors: dict[str, np.ndarray], header: dict | None = None,
                 binary: bool = False) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        if header is not None:
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, data in tensors.items():
            if " " in name:
                raise CheckpointError(f"tensor name may not contain spaces: {name!r}")
            data = np.asarray(data, dtype=np.float64)
            dims = " ".join(str(d) for d in data.shape)
            decl = f"tensor {name} {data.ndim}{' ' + dims if dims else ''}"
            if binary:
                f.write((decl + " binary\n").encode())
                f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
                f.write(b"\n")
            else:
                f.write((decl + "\n").encode())
                for row in _rows(data):
                    f.write((" ".join(repr(float(v)) for v in row) + "\n").encode())


def load_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    header: dict = {}
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        line = f.readline()
        if line.startswith(b"{"):
            header = json.loads(line.decode())
            line = f.readline()
        while line:
            parts = line.decode().split()
            if not parts:
                line = f.readline()
                continue
            if parts[0] != "tensor":
                raise CheckpointError(f"{path}: expected tensor declaration, got {line!r}")
            is_binary = parts[-1] == "binary"
            if is_binary:
                parts = parts[:-1]
            name = parts[1]
            rank = int(parts[2])
            shape = tuple(int(d) for d in parts[3:3 + rank])
            if len(shape) != rank:
                raise CheckpointError(f"{path}: bad declaration for tensor {name!r}")
            count = int(np.prod(shape)) if shape else 1
            if is_binary:
                raw = f.read(count * 8)
                if len(raw) != count * 8:
                    raise CheckpointError(f"{path}: truncated binary payload for {name!r}")
                f.readline()  # trailing newline
                data = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            else:
                nrows = 1 if rank <= 1 else shape[0]
                values: list[float] = []
                for _ in range(nrows):
                    row = f.readline()
                    if not row:
                        raise CheckpointError(f"{path}: truncated payload for {name!r}")
                    values.extend(float(v) for v in row.split())
                if len(values) != count:
                    raise CheckpointError(
                        f"{path}: tensor {name!r} expected {count} values, got {len(values)}")
                data = np.array(values, dtype=np.float64)
            tensors[name] = data.reshape(shape)
            line = f.readline()
    return header, tensors
