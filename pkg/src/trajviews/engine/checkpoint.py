"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      4 bytes   b"TVCK"
    version    u32       currently 1
    meta_len   u32       length of the UTF-8 JSON metadata block
    meta       bytes     JSON object (config snapshot, epoch, vocabularies,
                         optimizer hyper-parameters and step counter)
    3 tensor tables, in order: parameters, AdamW first moments, AdamW second moments
        count      u32
        per entry:
            name_len   u16
            name       UTF-8 bytes
            ndim       u8
            dims       ndim x u32
            values     prod(dims) x float32 (C order)

Moment tables may be empty (count 0) when no optimizer state is saved.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TVCK"
VERSION = 1


def _write_table(buf: io.BufferedIOBase, table: dict) -> None:
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint")
    return data


def _read_table(buf) -> dict:
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    table = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
        name = _read_exact(buf, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
        dims = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim)) if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(_read_exact(buf, 4 * size), dtype="<f4").reshape(dims)
        table[name] = values.astype(np.float32)
    return table


def save_checkpoint(path, params: dict, meta: dict, moments: tuple[dict, dict] | None = None) -> None:
    m1, m2 = moments if moments is not None else ({}, {})
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_raw)))
        f.write(meta_raw)
        for table in (params, m1, m2):
            _write_table(f, table)


def load_checkpoint(path) -> tuple[dict, dict, tuple[dict, dict]]:
    """Return ``(params, meta, (first_moments, second_moments))``."""
    with open(Path(path), "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, meta_len = struct.unpack("<II", _read_exact(f, 8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        params = _read_table(f)
        m1 = _read_table(f)
        m2 = _read_table(f)
    return params, meta, (m1, m2)
