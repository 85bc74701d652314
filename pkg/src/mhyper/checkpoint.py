"""MHCK binary checkpoints (little-endian, float32 tables)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MHCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model) -> None:
    tables = model.tables()
    buf = bytearray(MAGIC)
    buf += struct.pack("<IIIII", VERSION, model.dim, model.n_entities, model.n_relations, len(tables))
    for name, p in tables.items():
        arr = p.detach().cpu().numpy().astype("<f4")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an MHCK checkpoint")
    version, d, n_ent, n_rel, n_tables = struct.unpack_from("<IIIII", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 24
    tables = {}
    try:
        for _ in range(n_tables):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(data):
                raise CheckpointError(f"{path}: table {name!r} truncated")
            tables[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    header = {"version": version, "dim": d, "n_entities": n_ent, "n_relations": n_rel}
    return header, tables


def load_into(model, tables: dict[str, np.ndarray]) -> None:
    """Copy tables into ``model``; any missing table or shape mismatch is an error."""
    own = model.tables()
    problems = []
    for name, p in own.items():
        if name not in tables:
            problems.append(f"{name}: missing from checkpoint (expected {tuple(p.shape)})")
        elif tuple(tables[name].shape) != tuple(p.shape):
            problems.append(f"{name}: expected {tuple(p.shape)}, found {tuple(tables[name].shape)}")
    for name in tables:
        if name not in own:
            problems.append(f"{name}: unexpected table in checkpoint")
    if problems:
        raise CheckpointError("checkpoint incompatible with dataset:\n  " + "\n  ".join(problems))
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(torch.as_tensor(tables[name], dtype=p.dtype))
