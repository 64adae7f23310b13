"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic "FGCK"
    u32 format version
    u32 config length | config block (utf-8 "key = value" lines)
    u32 array count
    per array: u32 name length | name utf-8
               u32 ndim | u64 * ndim dims
               float64 little-endian payload
    u32 CRC32 of every preceding byte

Any structural violation (bad magic, truncation, overrun, checksum
mismatch) raises CorruptCheckpointError; an unknown version raises
UnsupportedVersionError. Arrays round-trip bit-identically.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import CorruptCheckpointError, UnsupportedVersionError

MAGIC = b"FGCK"
FORMAT_VERSION = 1


def encode_config(config):
    lines = [f"{key} = {config[key]}" for key in sorted(config)]
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def decode_config(blob):
    out = {}
    for lineno, line in enumerate(blob.decode("utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CorruptCheckpointError(f"config line {lineno} has no '='")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_container(path, config, arrays):
    """Serialize a config dict and named float64 arrays to ``path``."""
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = encode_config(config)
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.astype("<f8").tobytes())
    payload = b"".join(parts)
    blob = payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(f"truncated file while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def read_container(path):
    """Parse a container; returns (config dict, arrays dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 + 4:
        raise CorruptCheckpointError("file shorter than minimal header")
    payload, crc_bytes = blob[:-4], blob[-4:]
    expected = struct.unpack("<I", crc_bytes)[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != expected:
        raise CorruptCheckpointError("checksum mismatch")

    rd = _Reader(payload)
    if rd.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    version = rd.u32("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"checkpoint format version {version} not supported "
            f"(expected {FORMAT_VERSION})")
    cfg_len = rd.u32("config length")
    config = decode_config(rd.take(cfg_len, "config block"))
    n_arrays = rd.u32("array count")
    arrays = {}
    for _ in range(n_arrays):
        name_len = rd.u32("array name length")
        name = rd.take(name_len, "array name").decode("utf-8")
        ndim = rd.u32("array ndim")
        if ndim > 32:
            raise CorruptCheckpointError(f"implausible ndim {ndim} for '{name}'")
        dims = struct.unpack(f"<{ndim}Q", rd.take(8 * ndim, "array dims")) if ndim else ()
        count = 1
        for dim in dims:
            count *= dim
        payload_bytes = rd.take(8 * count, f"array '{name}' payload")
        arrays[name] = np.frombuffer(payload_bytes, dtype="<f8").reshape(dims).astype(
            np.float64)
    if rd.pos != len(payload):
        raise CorruptCheckpointError("trailing bytes after last array")
    return config, arrays
