"""RFCK checkpoint container: named RFTN tensors with integrity check.

Layout: magic "RFCK", version u32 LE, timestamp u64 LE, config-echo
length u32 LE + UTF-8 bytes, tensor count u32 LE, then per tensor a
u16-length-prefixed UTF-8 name followed by an RFTN payload, and a
trailing CRC32 (of everything before it) u32 LE. Except for the
timestamp field the bytes are a pure function of contents, which is
what the determinism checks compare.
"""

from __future__ import annotations

import io
import struct
import time
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import read_rftn, write_rftn

RFCK_MAGIC = b"RFCK"
RFCK_VERSION = 1
# byte range of the timestamp field, for "modulo timestamp" comparisons
TIMESTAMP_SPAN = (8, 16)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_echo: str
    timestamp: int


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_echo: str,
                    timestamp: int | None = None) -> None:
    buf = io.BytesIO()
    buf.write(RFCK_MAGIC)
    buf.write(struct.pack("<I", RFCK_VERSION))
    buf.write(struct.pack("<Q", int(time.time()) if timestamp is None else int(timestamp)))
    echo = config_echo.encode("utf-8")
    buf.write(struct.pack("<I", len(echo)))
    buf.write(echo)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        write_rftn(buf, tensors[name])
    payload = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if len(raw) < 24 or raw[:4] != RFCK_MAGIC:
        raise CheckpointError(f"{p}: not an RFCK checkpoint")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise CheckpointError(f"{p}: CRC mismatch (corrupt checkpoint)")
    fh = io.BytesIO(raw[:-4])
    fh.seek(4)
    (version,) = struct.unpack("<I", fh.read(4))
    if version != RFCK_VERSION:
        raise CheckpointError(f"{p}: unsupported RFCK version {version}")
    (timestamp,) = struct.unpack("<Q", fh.read(8))
    (echo_len,) = struct.unpack("<I", fh.read(4))
    echo = fh.read(echo_len).decode("utf-8")
    (count,) = struct.unpack("<I", fh.read(4))
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tensors[name] = read_rftn(fh)
    except (struct.error, IOError) as e:
        raise CheckpointError(f"{p}: truncated checkpoint ({e})") from e
    return Checkpoint(tensors=tensors, config_echo=echo, timestamp=timestamp)


def bytes_modulo_timestamp(path) -> bytes:
    """File bytes with the timestamp field and CRC zeroed, for comparisons."""
    raw = bytearray(Path(path).read_bytes())
    lo, hi = TIMESTAMP_SPAN
    raw[lo:hi] = b"\x00" * (hi - lo)
    raw[-4:] = b"\x00\x00\x00\x00"
    return bytes(raw)
