"""Binary checkpoint archive of named tensors.

Layout: magic "FARM", version u32, tensor count u32, then per tensor:
name length u16 + UTF-8 name + rank u8 + dims u32[] + raw little-endian
values, and a trailing CRC32 (u32 LE) of everything before it. Version 1
stores 32-bit values; version 2 stores 64-bit values so double-precision
runs round-trip bit-for-bit. Non-tensor state (rng, config echo) rides along
as byte-per-element tensors, which both element widths represent exactly.

Writes are atomic (temp file + rename). Loads verify the CRC before
decoding, so a corrupted file never yields partial state.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

MAGIC = b"FARM"
_VERSION_FOR_DTYPE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPE_FOR_VERSION = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(Exception):
    """Structured load/save failure: bad magic, version, truncation, or CRC."""


def bytes_to_tensor(payload: bytes, dtype) -> np.ndarray:
    """Encode raw bytes as exact small-integer float values (0..255)."""
    return np.frombuffer(payload, dtype=np.uint8).astype(dtype)


def tensor_to_bytes(values: np.ndarray) -> bytes:
    rounded = np.asarray(values)
    if rounded.min() < 0 or rounded.max() > 255:
        raise CheckpointError("byte tensor values outside [0, 255]")
    return rounded.astype(np.uint8).tobytes()


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    dtypes = {np.dtype(t.dtype) for t in tensors.values()}
    if len(dtypes) != 1 or next(iter(dtypes)) not in _VERSION_FOR_DTYPE:
        raise CheckpointError(f"tensors must share one float dtype, got {sorted(map(str, dtypes))}")
    version = _VERSION_FOR_DTYPE[next(iter(dtypes))]
    element = _DTYPE_FOR_VERSION[version]

    chunks = [MAGIC, struct.pack("<II", version, len(tensors))]
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.ascontiguousarray(tensors[name], dtype=element)
        if arr.ndim > 255:
            raise CheckpointError(f"tensor rank {arr.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    blob = payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)

    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], int]:
    """Returns (tensors, version). Nothing is yielded unless the whole file
    verifies, so a failed load cannot mutate partial state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError(f"file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    payload, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    crc_actual = zlib.crc32(payload) & 0xFFFFFFFF
    if crc_actual != crc_stored:
        raise CheckpointError(f"CRC mismatch: stored {crc_stored:#010x}, actual {crc_actual:#010x}")

    version, count = struct.unpack_from("<II", payload, 4)
    if version not in _DTYPE_FOR_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    element = _DTYPE_FOR_VERSION[version]
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * element.itemsize if rank else element.itemsize
            raw = payload[pos : pos + nbytes]
            if len(raw) < nbytes:
                raise CheckpointError(f"truncated tensor {name!r}")
            pos += nbytes
        except struct.error as exc:
            raise CheckpointError(f"truncated header at byte {pos}") from exc
        tensors[name] = np.frombuffer(raw, dtype=element).reshape(dims).copy()
    if pos != len(payload):
        raise CheckpointError(f"{len(payload) - pos} trailing bytes after last tensor")
    return tensors, version


def checkpoint_hash(path: str | os.PathLike) -> str:
    """Git-style content hash (sha1 over a blob header plus the file bytes)."""
    import hashlib

    with open(path, "rb") as fh:
        content = fh.read()
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(content))
    h.update(content)
    return h.hexdigest()


def encode_rng_state(rng: np.random.Generator, dtype) -> np.ndarray:
    return bytes_to_tensor(json.dumps(rng.bit_generator.state).encode("utf-8"), dtype)


def decode_rng_state(values: np.ndarray) -> np.random.Generator:
    state = json.loads(tensor_to_bytes(values).decode("utf-8"))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng
