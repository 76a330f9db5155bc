"""Binary tile and checkpoint containers, plus small file helpers.

Everything is little-endian. Tile files carry a CRC32 of their payload;
checkpoint files end with a SHA-256 of all preceding bytes. Both loaders
reject anything that does not verify.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from canopysr.errors import CorruptFileError, DimensionError, UsageError
from canopysr.nn import parameter_digest

TILE_MAGIC = b"VSRT"
CKPT_MAGIC = b"VSRC"
TILE_VERSION = 1
CKPT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}
_TILE_HEADER = struct.Struct("<4sIIIIB")


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text(path, text: str) -> None:
    atomic_write(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    write_text(path, buf.getvalue())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- tiles --------------------------------------------------------------------------

def _dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _CODES:
        raise UsageError(f"unsupported tile dtype {dtype}")
    return _CODES[dt]


def encode_tile(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"tiles are (channels, height, width), got shape {a.shape}")
    code = _dtype_code(a.dtype)
    c, h, w = a.shape
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    header = _TILE_HEADER.pack(TILE_MAGIC, TILE_VERSION, h, w, c, code)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_tile(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < _TILE_HEADER.size + 4:
        raise CorruptFileError(f"{source}: truncated tile header")
    magic, version, h, w, c, code = _TILE_HEADER.unpack_from(blob)
    if magic != TILE_MAGIC:
        raise CorruptFileError(f"{source}: bad magic {magic!r}")
    if version != TILE_VERSION:
        raise CorruptFileError(f"{source}: unsupported tile version {version}")
    if code not in _DTYPES:
        raise CorruptFileError(f"{source}: unknown dtype code {code}")
    n = h * w * c * _DTYPES[code].itemsize
    if len(blob) != _TILE_HEADER.size + n + 4:
        raise CorruptFileError(f"{source}: payload length {len(blob) - _TILE_HEADER.size - 4}, expected {n}")
    payload = blob[_TILE_HEADER.size:_TILE_HEADER.size + n]
    (crc,) = struct.unpack_from("<I", blob, _TILE_HEADER.size + n)
    if crc != zlib.crc32(payload):
        raise CorruptFileError(f"{source}: CRC mismatch")
    return np.frombuffer(payload, dtype=_DTYPES[code]).reshape(c, h, w).copy()


def save_tile(path, array: np.ndarray) -> None:
    atomic_write(path, encode_tile(array))


def load_tile(path) -> np.ndarray:
    return decode_tile(Path(path).read_bytes(), str(path))


# -- checkpoints ----------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    frozen: bool = False
    metadata: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return parameter_digest(self.params)


def freeze_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    return Checkpoint({k: v.copy() for k, v in ckpt.params.items()}, True, dict(ckpt.metadata))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    if len(set(names)) != len(names):
        raise UsageError("checkpoint parameter names must be unique")
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    table, payloads, offset = [], [], 0
    for name in names:
        a = np.asarray(ckpt.params[name])
        code = _dtype_code(a.dtype)
        data = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
        nb = name.encode("utf-8")
        table.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
                     + struct.pack(f"<{a.ndim}I", *a.shape)
                     + struct.pack("<BQQ", code, offset, len(data)))
        payloads.append(data)
        offset += len(data)
    body = (CKPT_MAGIC + struct.pack("<IB", CKPT_VERSION, int(ckpt.frozen))
            + struct.pack("<I", len(meta)) + meta
            + struct.pack("<I", len(names)) + b"".join(table) + b"".join(payloads))
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < 4 + 9 + 4 + 32:
        raise CorruptFileError(f"{source}: truncated checkpoint")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFileError(f"{source}: digest mismatch")
    if body[:4] != CKPT_MAGIC:
        raise CorruptFileError(f"{source}: bad magic {body[:4]!r}")
    try:
        version, frozen, meta_len = struct.unpack_from("<IBI", body, 4)
        if version != CKPT_VERSION:
            raise CorruptFileError(f"{source}: unsupported checkpoint version {version}")
        pos = 13
        metadata = json.loads(body[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            code, off, nbytes = struct.unpack_from("<BQQ", body, pos)
            pos += 17
            entries.append((name, shape, code, off, nbytes))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{source}: malformed header ({exc})") from exc

    params, spans = {}, []
    for name, shape, code, off, nbytes in entries:
        if name in params:
            raise CorruptFileError(f"{source}: duplicate entry {name!r}")
        if code not in _DTYPES or nbytes != int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize:
            raise CorruptFileError(f"{source}: entry {name!r} has inconsistent size")
        start = pos + off
        if start + nbytes > len(body):
            raise CorruptFileError(f"{source}: entry {name!r} runs past the end")
        spans.append((off, off + nbytes, name))
        params[name] = np.frombuffer(body[start:start + nbytes], dtype=_DTYPES[code]).reshape(shape).copy()
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptFileError(f"{source}: entries {a!r} and {b!r} overlap")
    return Checkpoint(params, bool(frozen), metadata)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))


# -- renders --------------------------------------------------------------------------

def encode_pgm16(field_: np.ndarray, vmax: float = 120.0) -> bytes:
    """Binary 16-bit greyscale PGM, mapping [0, vmax] linearly onto [0, 65535]."""
    f = np.asarray(field_, dtype=np.float64)
    if f.ndim == 3 and f.shape[0] == 1:
        f = f[0]
    if f.ndim != 2:
        raise DimensionError(f"PGM render needs a 2-D field, got {f.shape}")
    q = np.round(np.clip(f / vmax, 0.0, 1.0) * 65535).astype(">u2")
    h, w = q.shape
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes()


def save_pgm16(path, field_: np.ndarray, vmax: float = 120.0) -> None:
    atomic_write(path, encode_pgm16(field_, vmax))
