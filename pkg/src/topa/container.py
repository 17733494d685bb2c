"""Binary container for named dense arrays plus a JSON header.

Layout::

    b"TOPA\\x01"                   magic
    uint64 little-endian          header length in bytes
    header                        canonical JSON (sorted keys, utf-8)
    array payloads                raw little-endian bytes, in header order

The header carries user metadata under ``"meta"`` and an ``"arrays"`` table of
``{name, dtype, shape, offset, nbytes}``.  Writing is byte-deterministic, so
save -> load -> save reproduces the same file.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"TOPA\x01"
_ALLOWED = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> bytes:
    table = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = arr.dtype.name
        if kind not in _ALLOWED:
            raise TypeError(f"unsupported dtype {kind} for array {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_ALLOWED[kind]).tobytes()
        table.append({"name": name, "dtype": kind, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = canonical_json({"meta": dict(meta), "arrays": table}).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(payloads)


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError("not a TOPA container")
    start = len(MAGIC)
    (hlen,) = struct.unpack("<Q", blob[start:start + 8])
    body = start + 8 + hlen
    header = json.loads(blob[start + 8:body].decode("utf-8"))
    arrays = {}
    for entry in header["arrays"]:
        lo = body + entry["offset"]
        raw = blob[lo:lo + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_ALLOWED[entry["dtype"]]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(entry["dtype"])
    return header["meta"], arrays


def read_meta(path: str | os.PathLike) -> dict:
    """Read only the header, without touching array payloads."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a TOPA container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))["meta"]


def save(path: str | os.PathLike, meta: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> None:
    # write-then-rename so readers never see a half-written file
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


# -- feature files ---------------------------------------------------------


def save_features(path, rows: np.ndarray, descriptor: str, extra: Mapping[str, Any] | None = None) -> None:
    """Write a feature file: header {dimension, encoder descriptor, count} + float32 rows."""
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2:
        raise ValueError("feature rows must be a 2-D array")
    meta = {"dimension": int(rows.shape[1]), "encoder_descriptor": descriptor,
            "count": int(rows.shape[0])}
    if extra:
        meta.update(extra)
    save(path, meta, {"rows": rows})


def load_features(path) -> tuple[dict, np.ndarray]:
    meta, arrays = load(path)
    return meta, arrays["rows"]
