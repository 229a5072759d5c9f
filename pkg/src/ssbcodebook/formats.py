"""Binary episode files (``SSBD``).

Little-endian layout::

    b"SSBD" | u32 version | 32-byte sha256 config digest | u32 episode count
    per episode:
        u32 index, t_start, U, T, N_R, N_T
        f4  channels, real/imag interleaved, [UE][t][rx][tx] row-major
        f4  gamma per UE
        u8  activity bits, [UE][t] row-major, packed little-endian, padded to a byte
"""
from __future__ import annotations

import io
import os
import struct

import numpy as np

from .channel import Episode

MAGIC = b"SSBD"
VERSION = 1
_HEAD = struct.Struct("<4sI32sI")
_BLOCK = struct.Struct("<6I")


class DatasetFormatError(ValueError):
    """Raised for malformed or unsupported episode files."""


def _digest_bytes(digest: str | bytes) -> bytes:
    raw = bytes.fromhex(digest) if isinstance(digest, str) else bytes(digest)
    if len(raw) != 32:
        raise ValueError("config digest must be 32 bytes (sha256)")
    return raw


def episodes_to_bytes(episodes, digest: str | bytes) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEAD.pack(MAGIC, VERSION, _digest_bytes(digest), len(episodes)))
    for ep in episodes:
        u, t, n_r, n_t = ep.channels.shape
        buf.write(_BLOCK.pack(ep.index, ep.t_start, u, t, n_r, n_t))
        inter = np.empty((u, t, n_r, n_t, 2), dtype="<f4")
        inter[..., 0] = ep.channels.real
        inter[..., 1] = ep.channels.imag
        buf.write(inter.tobytes())
        buf.write(np.asarray(ep.gammas, dtype="<f4").tobytes())
        buf.write(np.packbits(np.asarray(ep.active, dtype=bool).ravel(), bitorder="little").tobytes())
    return buf.getvalue()


def episodes_from_bytes(data: bytes, dt: float = 0.005):
    """``(episodes, digest_hex)`` parsed from an ``SSBD`` byte string."""
    if len(data) < _HEAD.size:
        raise DatasetFormatError("truncated header")
    magic, version, digest, count = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (this reader knows {VERSION})")
    pos = _HEAD.size
    episodes = []
    for _ in range(count):
        if pos + _BLOCK.size > len(data):
            raise DatasetFormatError("truncated episode header")
        index, t_start, u, t, n_r, n_t = _BLOCK.unpack_from(data, pos)
        pos += _BLOCK.size
        n_ch = u * t * n_r * n_t * 2 * 4
        n_bits = (u * t + 7) // 8
        if pos + n_ch + 4 * u + n_bits > len(data):
            raise DatasetFormatError(f"truncated data for episode {index}")
        inter = np.frombuffer(data, "<f4", u * t * n_r * n_t * 2, pos).reshape(u, t, n_r, n_t, 2)
        pos += n_ch
        gammas = np.frombuffer(data, "<f4", u, pos).astype(np.float32)
        pos += 4 * u
        bits = np.frombuffer(data, np.uint8, n_bits, pos)
        pos += n_bits
        active = np.unpackbits(bits, count=u * t, bitorder="little").astype(bool).reshape(u, t)
        channels = (inter[..., 0] + 1j * inter[..., 1]).astype(np.complex64)
        episodes.append(Episode(index, channels, gammas, active, t_start, dt))
    if pos != len(data):
        raise DatasetFormatError(f"{len(data) - pos} trailing bytes after the last episode")
    return episodes, digest.hex()


def file_size(episode_shapes) -> int:
    """Expected file size for episodes of the given ``(U, T, N_R, N_T)`` shapes."""
    size = _HEAD.size
    for u, t, n_r, n_t in episode_shapes:
        size += _BLOCK.size + u * t * n_r * n_t * 8 + 4 * u + (u * t + 7) // 8
    return size


def write_episodes(path, episodes, digest: str | bytes) -> None:
    """Write atomically: the file appears only once it is complete."""
    data = episodes_to_bytes(episodes, digest)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_episodes(path, dt: float = 0.005):
    with open(path, "rb") as fh:
        return episodes_from_bytes(fh.read(), dt)
