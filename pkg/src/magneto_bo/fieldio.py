"""Bit-exact binary fields, CSV tables and the artifact index.

Binary layout (little-endian): b"MBO1", u32 version, u32 rank, rank x u64
dims, u8 dtype tag, then the row-major payload.  Tag 0 is complex128 stored
as interleaved (re, im) float64 pairs.  A sidecar ``<name>.meta.json`` holds
grid ranges, frame tag, h and time stamp.
"""

from __future__ import annotations

import csv
import json
import os
import struct

import numpy as np

MAGIC = b"MBO1"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<c16")}


class FieldFormatError(ValueError):
    pass


def write_field(path, array, meta=None):
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.complex128))
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<B", 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<c16", copy=False).tobytes(order="C"))
    if meta is not None:
        with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def read_field(path, with_meta=False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise FieldFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FieldFormatError(f"{path}: unsupported version {version}")
    off = 12
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<B", raw, off)
    off += 1
    if tag not in DTYPE_TAGS:
        raise FieldFormatError(f"{path}: unknown dtype tag {tag}")
    dt = DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - off != count * dt.itemsize:
        raise FieldFormatError(f"{path}: payload size {len(raw) - off} does not match dims {dims}")
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(dims).astype(np.complex128)
    if not with_meta:
        return arr
    meta_path = str(path) + ".meta.json"
    meta = None
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return arr, meta


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def format_value(v):
    """Full-precision text for a table cell (17 significant digits)."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.16e" % float(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path, rows, columns=None):
    """rows: list of dicts (column order from ``columns`` or the first row)."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r.get(c)) for c in columns])
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return list(rd)


def write_index(directory, entries):
    """Index of written artifacts: list of {"path", "kind", "description"}."""
    path = os.path.join(directory, "index.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"artifacts": list(entries)}, fh, indent=2, sort_keys=True)
    return path


def write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
    return path
