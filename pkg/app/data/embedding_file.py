"""Binary container for embedding sequences.

Layout, all integers u32 little-endian:

    b"CAME" | version | dim | count | (length | length*dim f32 LE) * count | crc32

The CRC covers every byte between the magic and the checksum itself.
"""
import logging
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from core.errors import BadMagicError, ChecksumError, DimensionMismatchError, StorageError, TruncatedFileError, VersionMismatchError
from .dataset import Dataset

logger = logging.getLogger(__name__)

MAGIC = b"CAME"
VERSION = 1
_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<III")
_F32 = np.dtype("<f4")


def encode_embeddings(sequences, dim: int | None = None) -> bytes:
    sequences = list(sequences)
    if dim is None:
        dim = int(sequences[0].shape[-1]) if sequences else 0
    parts = [_HEADER.pack(VERSION, dim, len(sequences))]
    for seq in sequences:
        array = np.asarray(torch.as_tensor(seq).detach().cpu().float().numpy(), dtype=_F32)
        if array.ndim != 2 or array.shape[1] != dim:
            raise DimensionMismatchError("embedding sequence", dim, array.shape[-1] if array.ndim else None)
        parts.append(_U32.pack(array.shape[0]))
        parts.append(np.ascontiguousarray(array).tobytes())
    payload = b"".join(parts)
    return MAGIC + payload + _U32.pack(zlib.crc32(payload))


def write_embeddings(path, dataset, dim: int | None = None) -> Path:
    """Write a Dataset (or any iterable of (length, dim) tensors)."""
    sequences = dataset.sequences if isinstance(dataset, Dataset) else list(dataset)
    if dim is None and isinstance(dataset, Dataset):
        dim = dataset.dim
    blob = encode_embeddings(sequences, dim)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    logger.info("wrote %d sequences to %s (%d bytes)", len(sequences), path, len(blob))
    return path


def _take(blob, offset, size, path):
    end = offset + size
    # the trailing checksum must still fit after any field
    if end + _U32.size > len(blob):
        raise TruncatedFileError(path, offset, end + _U32.size - len(blob))
    return blob[offset:end]


def decode_embeddings(blob: bytes, path="<bytes>") -> Dataset:
    if len(blob) < len(MAGIC):
        raise TruncatedFileError(path, 0, len(MAGIC) - len(blob))
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(path, MAGIC, bytes(blob[:len(MAGIC)]))
    offset = len(MAGIC)
    version, dim, count = _HEADER.unpack(_take(blob, offset, _HEADER.size, path))
    if version != VERSION:
        raise VersionMismatchError(path, VERSION, version)
    offset += _HEADER.size

    sequences = []
    for _ in range(count):
        (length,) = _U32.unpack(_take(blob, offset, _U32.size, path))
        offset += _U32.size
        size = length * dim * _F32.itemsize
        data = np.frombuffer(_take(blob, offset, size, path), dtype=_F32).reshape(length, dim)
        sequences.append(torch.from_numpy(data.astype(np.float32)))
        offset += size

    if len(blob) != offset + _U32.size:
        raise StorageError(f"{path}: {len(blob) - offset - _U32.size} unexpected bytes after the last sequence")
    (stored,) = _U32.unpack(blob[offset:])
    computed = zlib.crc32(blob[len(MAGIC):offset])
    if stored != computed:
        raise ChecksumError(path, offset, stored, computed)
    return Dataset(sequences, provenance=str(path), embedding_dim=dim)


def read_embeddings(path) -> Dataset:
    path = Path(path)
    dataset = decode_embeddings(path.read_bytes(), path)
    logger.info("read %d sequences of dim %d from %s", len(dataset), dataset.dim, path)
    return dataset
