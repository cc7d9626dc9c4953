"""Binary tensor container shared by checkpoints, pair datasets and decoders.

Layout (little-endian)::

    b"R2F1" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_entries | entries | payload | u64 checksum(payload)

    entry = u16 name_len | name | u8 dtype (0 = f32) | u8 ndim | u32 * ndim shape
            | u64 offset | u64 nbytes

Offsets are relative to the start of the payload. The checksum is the first
8 bytes of BLAKE2b over the payload, read as a little-endian u64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import LabError

MAGIC = b"R2F1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4")}


class ContainerError(LabError):
    exit_code = 4


def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    if len(set(tensors)) != len(tensors):
        raise ContainerError("duplicate tensor names")
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        nb = name.encode()
        shape = np.shape(arr)
        entries.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 0, len(shape))
                       + struct.pack(f"<{len(shape)}I", *shape) + struct.pack("<QQ", offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    head = MAGIC + struct.pack("<II", VERSION, len(meta_bytes)) + meta_bytes
    head += struct.pack("<I", len(entries)) + b"".join(entries)
    return head + payload + struct.pack("<Q", checksum(payload))


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != MAGIC:
        raise ContainerError("bad magic bytes")
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    at = 12
    meta = json.loads(blob[at:at + meta_len].decode())
    at += meta_len
    (n,) = struct.unpack_from("<I", blob, at)
    at += 4
    entries = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", blob, at)
        at += 2
        name = blob[at:at + ln].decode()
        at += ln
        code, ndim = struct.unpack_from("<BB", blob, at)
        at += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, at)
        at += 4 * ndim
        off, nbytes = struct.unpack_from("<QQ", blob, at)
        at += 16
        if code not in _DTYPES:
            raise ContainerError(f"unknown dtype code {code}")
        entries.append((name, code, shape, off, nbytes))
    payload = blob[at:-8]
    (stored,) = struct.unpack("<Q", blob[-8:])
    if checksum(payload) != stored:
        raise ContainerError("payload checksum mismatch")
    names = [e[0] for e in entries]
    if len(set(names)) != len(names):
        raise ContainerError("duplicate tensor names")
    spans = sorted((off, off + nb) for _, _, _, off, nb in entries)
    for (a0, a1), (b0, _) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ContainerError("overlapping tensor payloads")
    out = {}
    for name, code, shape, off, nbytes in entries:
        if off + nbytes > len(payload):
            raise ContainerError(f"tensor {name!r} runs past the payload")
        dt = _DTYPES[code]
        if nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise ContainerError(f"tensor {name!r} size disagrees with its shape")
        out[name] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize,
                                  offset=off).reshape(shape).astype(np.float32)
    return out, meta


def atomic_write(path: str | Path, data: bytes | str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    atomic_write(path, encode(tensors, meta))


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
