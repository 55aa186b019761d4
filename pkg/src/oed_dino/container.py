"""Directory containers: a sorted ``key = value`` manifest plus raw little-endian arrays.

Array file layout: ``b"OEDBIN01"``, u8 dtype tag, u8 rank, ``rank`` u64 dims,
then the row-major payload.  The manifest carries an FNV-1a 64 checksum of
all payloads concatenated in sorted array-name order.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ContainerError

MAGIC = b"OEDBIN01"
DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<u8"), 3: np.dtype("<u4")}
TAGS = {v: k for k, v in DTYPES.items()}
MANIFEST = "manifest.txt"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(chunks) -> int:
    """FNV-1a 64 over a sequence of byte strings, treated as one stream."""
    h = _FNV_OFFSET
    mask = 0xFFFFFFFFFFFFFFFF
    for chunk in chunks:
        data = np.frombuffer(chunk, dtype=np.uint8)
        # the recurrence is sequential; process in a tight Python loop over bytes
        for b in data.tolist():
            h = ((h ^ b) * _FNV_PRIME) & mask
    return h


def encode_array(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype("<f8")
    elif a.dtype == np.uint32:
        a = a.astype("<u4")
    elif a.dtype.kind in "iub":
        if a.size and a.min() < 0:
            raise ContainerError("negative integers cannot be stored")
        a = a.astype("<u8")
    else:
        raise ContainerError(f"unsupported dtype {a.dtype}")
    header = MAGIC + struct.pack("<BB", TAGS[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return header + np.ascontiguousarray(a).tobytes()


def decode_array(raw: bytes, name: str = "?"):
    """Return (array, payload bytes)."""
    if raw[:8] != MAGIC:
        raise ContainerError(f"{name}: bad magic")
    tag, rank = struct.unpack("<BB", raw[8:10])
    if tag not in DTYPES:
        raise ContainerError(f"{name}: unknown dtype tag {tag}")
    dims = struct.unpack(f"<{rank}Q", raw[10:10 + 8 * rank])
    payload = raw[10 + 8 * rank:]
    dt = DTYPES[tag]
    if len(payload) != dt.itemsize * int(np.prod(dims, dtype=np.int64)):
        raise ContainerError(f"{name}: payload length {len(payload)} does not match dims {dims}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).copy(), payload


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    s = str(v)
    if "\n" in s:
        raise ContainerError("manifest values must be single-line")
    return s


def sparse_arrays(name: str, A) -> dict:
    """Coordinate triplets of a sparse matrix as three arrays."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    return {
        f"{name}.row": C.row[order].astype(np.uint64),
        f"{name}.col": C.col[order].astype(np.uint64),
        f"{name}.val": C.data[order].astype(float),
        f"{name}.shape": np.asarray(C.shape, dtype=np.uint64),
    }


def sparse_from(arrays: dict, name: str):
    shape = tuple(int(x) for x in arrays[f"{name}.shape"])
    return sp.coo_matrix(
        (arrays[f"{name}.val"], (arrays[f"{name}.row"].astype(int), arrays[f"{name}.col"].astype(int))), shape=shape
    ).tocsr()


def checksum_of(payloads: dict) -> str:
    return f"{fnv1a64(payloads[k] for k in sorted(payloads)):016x}"


def write_container(path, arrays: dict, meta: dict | None = None, overwrite: bool = False) -> str:
    """Write a container; returns its checksum.  Existing containers are never replaced silently."""
    path = Path(path)
    encoded = {k: encode_array(v) for k, v in arrays.items()}
    payloads = {k: raw[10 + 8 * raw[9]:] for k, raw in encoded.items()}
    checksum = checksum_of(payloads)
    if (path / MANIFEST).exists() and not overwrite:
        existing = read_manifest(path)
        if existing.get("checksum") == checksum:
            return checksum
        raise ContainerError(f"{path} exists with different contents (checksum {existing.get('checksum')} != {checksum})")
    path.mkdir(parents=True, exist_ok=True)
    entries = {f"meta.{k}": _fmt(v) for k, v in (meta or {}).items()}
    for k, raw in encoded.items():
        fname = f"{k}.bin"
        if "/" in k or os.sep in k:
            raise ContainerError(f"array name {k!r} may not contain path separators")
        (path / fname).write_bytes(raw)
        entries[f"array.{k}"] = fname
    entries["checksum"] = checksum
    entries["format"] = "OEDBIN01"
    lines = [f"{k} = {entries[k]}" for k in sorted(entries)]
    (path / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return checksum


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        text = (path / MANIFEST).read_text(encoding="utf-8")
    except OSError as exc:
        raise ContainerError(f"cannot read manifest in {path}: {exc}") from exc
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ContainerError(f"malformed manifest line {line!r}")
        out[key.strip()] = value
    return out


def read_container(path, verify: bool = True):
    """Return (arrays, meta).  The checksum is verified unless ``verify=False``."""
    path = Path(path)
    manifest = read_manifest(path)
    arrays, payloads = {}, {}
    for key, fname in manifest.items():
        if key.startswith("array."):
            name = key[len("array."):]
            try:
                raw = (path / fname).read_bytes()
            except OSError as exc:
                raise ContainerError(f"missing array file {fname}") from exc
            arrays[name], payloads[name] = decode_array(raw, name)
    if verify and checksum_of(payloads) != manifest.get("checksum"):
        raise ContainerError(f"checksum mismatch in {path}")
    meta = {k[len("meta."):]: v for k, v in manifest.items() if k.startswith("meta.")}
    return arrays, meta


def exists(path) -> bool:
    return (Path(path) / MANIFEST).exists()
