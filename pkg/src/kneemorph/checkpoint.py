"""DMMC binary checkpoint container.

Layout (all integers little-endian)::

    b"DMMC" | u32 version | role: u32 length + ASCII
    parameter table | optimizer table
    rng state: u32 length + UTF-8 JSON
    flow history: u32 count, then per field u32 H, u32 W, 2*H*W f64 (dx plane, dy plane)
    metadata: u32 length + UTF-8 JSON

A table is a u32 entry count followed by entries of
``u16 name length, UTF-8 name, u8 dtype code, u8 ndim, u32 dims..., raw payload``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DMMC"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    role: str
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    flow_history: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _write_table(buf: io.BytesIO, table: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode()
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<BB", _CODES[dt], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_table(view: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    table = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + klen]).decode()
        pos += klen
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        table[name] = np.frombuffer(view[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    return table, pos


def _write_text(buf: io.BytesIO, text: str) -> None:
    raw = text.encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_text(view: memoryview, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    return bytes(view[pos:pos + n]).decode(), pos + n


def dumps(ckpt: Checkpoint) -> bytes:
    if not ckpt.role.isascii():
        raise ValueError("role tag must be ASCII")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_text(buf, ckpt.role)
    _write_table(buf, ckpt.params)
    _write_table(buf, ckpt.optimizer)
    _write_text(buf, json.dumps(ckpt.rng_state, sort_keys=True))
    buf.write(struct.pack("<I", len(ckpt.flow_history)))
    for fl in ckpt.flow_history:
        fl = np.asarray(fl, dtype="<f8")
        if fl.ndim != 3 or fl.shape[0] != 2:
            raise ValueError(f"flow history entries must be (2, H, W), got {fl.shape}")
        buf.write(struct.pack("<II", fl.shape[1], fl.shape[2]))
        buf.write(fl.tobytes())
    _write_text(buf, json.dumps(ckpt.meta, sort_keys=True))
    return buf.getvalue()


def loads(raw: bytes) -> Checkpoint:
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise ValueError("not a DMMC checkpoint")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    role, pos = _read_text(view, 8)
    params, pos = _read_table(view, pos)
    optimizer, pos = _read_table(view, pos)
    rng_text, pos = _read_text(view, pos)
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    history = []
    for _ in range(count):
        h, w = struct.unpack_from("<II", view, pos)
        pos += 8
        nbytes = 2 * h * w * 8
        history.append(np.frombuffer(view[pos:pos + nbytes], dtype="<f8").reshape(2, h, w).copy())
        pos += nbytes
    meta_text, pos = _read_text(view, pos)
    if pos != len(raw):
        raise ValueError(f"trailing bytes after checkpoint ({len(raw) - pos})")
    return Checkpoint(role, params, optimizer, json.loads(rng_text), history, json.loads(meta_text))


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
