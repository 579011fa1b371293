"""MABM checkpoint container: named float64 arrays plus string metadata.

Layout (little-endian)::

    b"MABM" | version u32 | n_arrays u32
    n_arrays x (name_len u32 | name utf-8 | ndim u32 | shape u64[ndim] | data f64[prod(shape)])
    footer: n_entries u32, then n_entries x (len u32 | utf-8 "key=value")
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mabe.data import BadMagicError, TruncatedFileError, VersionMismatchError
from mabe.nn import MLP

MAGIC = b"MABM"
VERSION = 1


def checkpoint_bytes(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    items = sorted((str(k), str(v)) for k, v in (meta or {}).items())
    parts.append(struct.pack("<I", len(items)))
    for k, v in items:
        line = f"{k}={v}".encode("utf-8")
        parts.append(struct.pack("<I", len(line)) + line)
    return b"".join(parts)


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(arrays, meta))
    return path


def _take(blob: bytes, off: int, n: int, what: str) -> tuple[bytes, int]:
    if len(blob) < off + n:
        raise TruncatedFileError(f"{what} incomplete", len(blob))
    return blob[off:off + n], off + n


def parse_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    raw, off = _take(blob, 4, 8, "header")
    version, n_arrays = struct.unpack("<II", raw)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {VERSION}")
    arrays = {}
    for _ in range(n_arrays):
        raw, off = _take(blob, off, 4, "array name length")
        name_b, off = _take(blob, off, struct.unpack("<I", raw)[0], "array name")
        raw, off = _take(blob, off, 4, "array rank")
        ndim = struct.unpack("<I", raw)[0]
        raw, off = _take(blob, off, 8 * ndim, "array shape")
        shape = struct.unpack(f"<{ndim}Q", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, off = _take(blob, off, 8 * count, "array data")
        arrays[name_b.decode("utf-8")] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    raw, off = _take(blob, off, 4, "metadata count")
    meta = {}
    for _ in range(struct.unpack("<I", raw)[0]):
        raw, off = _take(blob, off, 4, "metadata length")
        line, off = _take(blob, off, struct.unpack("<I", raw)[0], "metadata entry")
        k, _, v = line.decode("utf-8").partition("=")
        meta[k] = v
    return arrays, meta


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return parse_checkpoint(Path(path).read_bytes())


def mlp_to_arrays(net: MLP, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_arrays(arrays: dict[str, np.ndarray], prefix: str, head: str) -> MLP:
    ws, bs = [], []
    i = 0
    while f"{prefix}.w{i}" in arrays:
        ws.append(arrays[f"{prefix}.w{i}"])
        bs.append(arrays[f"{prefix}.b{i}"])
        i += 1
    return MLP(tuple(ws), tuple(bs), head)
