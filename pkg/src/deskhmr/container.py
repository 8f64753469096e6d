"""Single-file container for named arrays with a JSON header.

Layout::

    8 bytes   magic  b"DSKHMR01"
    8 bytes   little-endian uint64 header length
    header    canonical JSON: {"format_version", "kind", "meta", "tensors": [...]}
    payload   raw little-endian array bytes, in header order

Writing the same arrays and metadata always yields the same bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DSKHMR01"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.float64, "<i8": np.int64, "|b1": np.bool_}


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _normalise(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        return np.array(a, dtype="<f8", order="C")
    if a.dtype.kind in "iu":
        return np.array(a, dtype="<i8", order="C")
    if a.dtype.kind == "b":
        return np.array(a, dtype="|b1", order="C")
    raise ContainerError(f"unsupported dtype {a.dtype}")


def dumps(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = _normalise(arrays[name])
        raw = a.tobytes(order="C")
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = canonical_json({"format_version": FORMAT_VERSION, "kind": kind, "meta": meta, "tensors": entries})
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise ContainerError("not a container file (bad magic)")
    if len(blob) < 16:
        raise ContainerError("truncated container header")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise ContainerError("truncated container header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt container header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported format_version {header.get('format_version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"expected a {kind!r} container, found {header.get('kind')!r}")
    base = 16 + hlen
    arrays = {}
    for e in header["tensors"]:
        dt = _DTYPES.get(e["dtype"])
        if dt is None:
            raise ContainerError(f"unsupported dtype {e['dtype']!r} for {e['name']!r}")
        start = base + e["offset"]
        raw = blob[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContainerError(f"truncated payload for {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def save(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
