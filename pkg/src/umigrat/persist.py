"""Single-file binary artifacts with an FNV-1a integrity fingerprint.

Layout (all little-endian)::

    magic      4 bytes  b"UMGR"
    version    u32
    kind       u32 length + UTF-8 tag
    seed       u64
    fingerprint u64     FNV-1a 64 over the payload bytes
    tool       u32 length + UTF-8 version string
    length     u64      payload byte count
    payload

The payload is a u32-length-prefixed JSON metadata block followed by named
tensors, each ``name (u32 len + UTF-8) | ndim u32 | extents u32... | float32 data``.
Tensors are stored as float32; float64 working values are rounded to nearest even
on the way out.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numba
import numpy as np

from umigrat import __version__

MAGIC = b"UMGR"
FORMAT_VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ArtifactError(ValueError):
    pass


@numba.njit(cache=True)
def _fnv1a_bytes(buf):
    h = np.uint64(0xCBF29CE484222325)
    prime = np.uint64(0x100000001B3)
    for b in buf:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data) -> int:
    """64-bit FNV-1a of a bytes-like object or array (hashes its raw bytes)."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if buf.size == 0:
        return FNV_OFFSET
    return int(_fnv1a_bytes(buf))


def fingerprint_arrays(*arrays) -> str:
    """Hex fingerprint over the float64 content and shapes of several arrays."""
    h = io.BytesIO()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.write(struct.pack("<I", a.ndim))
        h.write(struct.pack(f"<{a.ndim}I", *a.shape))
        h.write(a.tobytes())
    return f"{fnv1a64(h.getvalue()):016x}"


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_payload(meta: dict, tensors: dict) -> bytes:
    out = io.BytesIO()
    out.write(_pack_str(json.dumps(meta, sort_keys=True)))
    out.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        out.write(_pack_str(name))
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArtifactError("truncated artifact")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode_payload(payload: bytes):
    r = _Reader(payload)
    meta = json.loads(r.string())
    tensors = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * count), dtype="<f4")
        tensors[name] = data.astype(np.float64).reshape(shape)
    if r.pos != len(payload):
        raise ArtifactError("trailing bytes in payload")
    return meta, tensors


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_artifact(path, kind: str, meta: dict, tensors: dict, seed: int = 0) -> str:
    """Write an artifact; returns the payload fingerprint as hex."""
    payload = encode_payload(meta, tensors)
    fp = fnv1a64(payload)
    head = (
        MAGIC
        + struct.pack("<I", FORMAT_VERSION)
        + _pack_str(kind)
        + struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
        + struct.pack("<Q", fp)
        + _pack_str(__version__)
        + struct.pack("<Q", len(payload))
    )
    atomic_write(path, head + payload)
    return f"{fp:016x}"


def read_header(buf: bytes) -> dict:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise ArtifactError("bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ArtifactError(f"unsupported format version {version}")
    kind = r.string()
    seed = r.u64()
    fp = r.u64()
    tool = r.string()
    length = r.u64()
    return {"kind": kind, "seed": seed, "fingerprint": fp, "tool": tool,
            "length": length, "offset": r.pos}


def read_artifact(path, kind: str | None = None):
    """Load and verify an artifact. Returns ``(header, meta, tensors)``."""
    buf = Path(path).read_bytes()
    head = read_header(buf)
    if kind is not None and head["kind"] != kind:
        raise ArtifactError(f"expected a {kind!r} artifact, found {head['kind']!r}")
    payload = buf[head["offset"]:]
    if len(payload) != head["length"]:
        raise ArtifactError(
            f"truncated artifact: payload {len(payload)} bytes, header says {head['length']}")
    if fnv1a64(payload) != head["fingerprint"]:
        raise ArtifactError("fingerprint mismatch")
    meta, tensors = decode_payload(payload)
    head["fingerprint"] = f"{head['fingerprint']:016x}"
    return head, meta, tensors


def artifact_fingerprint(path) -> str | None:
    """Stored fingerprint if the file exists and verifies, else None."""
    try:
        head, _, _ = read_artifact(path)
    except (OSError, ArtifactError, ValueError):
        return None
    return head["fingerprint"]


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    atomic_write(path, buf.getvalue().encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))
