"""Binary serialization of single tile models.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"TEMF"
    4       2     format version (u16)
    6       1     kind: 1 = gaussian, 2 = knn (u8)
    7       1     reserved, 0
    8       32    feature fingerprint (sha256 digest)
    40      4     cell_size (u32)
    44      4     orientation_bins (u32)
    48      4     channels (u32)
    52      8     scalar parameter (f64): epsilon or coreset ratio
    60      4     tensor count (u32)
    then per tensor:
            2     name length (u16), followed by UTF-8 name
            1     ndim (u8), followed by ndim u64 dims
            ...   float64 little-endian data, C order
    end-4   4     CRC-32 of every preceding byte (u32)
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .features import FeatureConfig
from .scorers import GaussianPatchModel, MemoryBankModel

MAGIC = b"TEMF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHBB32sIIIdI")
_KINDS = {"gaussian": 1, "knn": 2}


class ModelFormatError(Exception):
    """Base class for model file problems."""


class CorruptModelError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class FingerprintMismatchError(ModelFormatError):
    pass


def dumps(model) -> bytes:
    cfg = model.feature_config
    if cfg is None:
        raise ModelFormatError("model has no feature config and cannot be serialized")
    if model.kind == "gaussian":
        tensors = {"mean": model.mean, "cov": model.cov}
        param = model.epsilon
    elif model.kind == "knn":
        tensors = {"bank": model.bank}
        param = model.ratio
    else:
        raise ModelFormatError(f"cannot serialize model kind {model.kind!r}")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, _KINDS[model.kind], 0, cfg.fingerprint(),
                          cfg.cell_size, cfg.orientation_bins, cfg.channels, param, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads(data: bytes, expected_fingerprint: bytes | None = None):
    if len(data) < _HEADER.size + 4:
        raise CorruptModelError("model file is truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if body[:4] != MAGIC:
        raise CorruptModelError("bad magic; not a tile model file")
    (_, version, kind, _, fp, cell, bins, channels, param, count) = _HEADER.unpack_from(body)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"model format version {version}, expected {FORMAT_VERSION}")
    if zlib.crc32(body) != crc:
        raise CorruptModelError("checksum mismatch; file is truncated or damaged")
    try:
        cfg = FeatureConfig(cell, bins, channels)
    except ValueError as exc:
        raise CorruptModelError(str(exc)) from exc
    if fp != cfg.fingerprint():
        raise FingerprintMismatchError("stored fingerprint does not match this feature extractor version")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatchError("model was trained with a different feature configuration")

    tensors = {}
    pos = _HEADER.size
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", body, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(body):
                raise CorruptModelError("tensor data runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptModelError(f"malformed tensor table: {exc}") from exc
    if pos != len(body):
        raise CorruptModelError("trailing bytes after tensor table")

    try:
        if kind == 1:
            return GaussianPatchModel(tensors["mean"], tensors["cov"], param, cfg)
        if kind == 2:
            return MemoryBankModel(tensors["bank"], param, cfg)
    except KeyError as exc:
        raise CorruptModelError(f"missing tensor {exc}") from exc
    raise CorruptModelError(f"unknown model kind code {kind}")


def save_model(model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path, expected_fingerprint: bytes | None = None):
    return loads(Path(path).read_bytes(), expected_fingerprint)
