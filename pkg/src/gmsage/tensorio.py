"""Binary channel-tensor files.

Layout (little-endian)::

    offset  size  field
    0       4     magic  b"GMCT"
    4       4     version (uint32, currently 1)
    8       4     M (uint32)
    12      4     N (uint32)
    16      4     P (uint32)
    20      8     sub-bandwidth f_s in Hz (float64)
    28      8     SNR in dB (float64, +inf for noiseless)
    36      ...   M*N*P interleaved (real, imag) float64 pairs, m-major, then n, then p

An optional ``<file>.meta.txt`` sidecar carries ``key = value`` lines.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .channel import ChannelTensor

MAGIC = b"GMCT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIdd")


class TensorFormatError(ValueError):
    """Malformed or inconsistent tensor file."""


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.txt")


def write_tensor(path, tensor: ChannelTensor, sidecar: bool = True) -> None:
    path = Path(path)
    m, n, p = tensor.dims
    header = _HEADER.pack(MAGIC, VERSION, m, n, p, float(tensor.sub_bandwidth), float(tensor.snr_db))
    body = np.ascontiguousarray(tensor.values, dtype="<c16").tobytes()
    path.write_bytes(header + body)
    if sidecar:
        lines = [f"literal_index = {str(bool(tensor.literal_index)).lower()}"]
        for key in sorted(tensor.meta):
            lines.append(f"{key} = {tensor.meta[key]}")
        sidecar_path(path).write_text("\n".join(lines) + "\n")


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_tensor(path, expected_dims=None) -> ChannelTensor:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, m, n, p, f_s, snr = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if expected_dims is not None and tuple(expected_dims) != (m, n, p):
        raise TensorFormatError(f"{path}: expected dims {tuple(expected_dims)}, found {(m, n, p)}")
    need = _HEADER.size + m * n * p * 16
    if len(raw) != need:
        raise TensorFormatError(f"{path}: payload has {len(raw)} bytes, expected {need}")
    values = np.frombuffer(raw, dtype="<c16", offset=_HEADER.size).reshape(m, n, p).astype(np.complex128)
    meta = {}
    literal = False
    side = sidecar_path(path)
    if side.exists():
        for line in side.read_text().splitlines():
            if "=" not in line:
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "literal_index":
                literal = _parse_value(value) is True
            else:
                meta[key] = _parse_value(value)
    return ChannelTensor(values, f_s, snr, literal, meta)
