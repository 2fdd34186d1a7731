"""
UNCK checkpoint container shared by the U-Net and the patch baseline.

Layout (little-endian):
    magic "UNCK" | version u32 | config blob (u32 length + UTF-8 key=value text)
    | step u64 | parameters | buffers | Adam first moments | Adam second moments

Each array section is a u32 array count followed by, per array, a u64 element
count and that many float32 values. Shapes are not stored; they follow from the
config blob, and the loader checks every count against the rebuilt model.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from errors import BadMagicError, ConfigMismatchError, TruncatedPayloadError, VersionMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UNCK"
CHECKPOINT_VERSION = 1


@dataclass
class Container:
    blob: str
    step: int
    params: List[np.ndarray]
    buffers: List[np.ndarray]
    moment1: List[np.ndarray]
    moment2: List[np.ndarray]


def _arrays_to_bytes(arrays: Sequence[np.ndarray]) -> bytes:
    chunks = [np.array([len(arrays)], "<u4").tobytes()]
    for a in arrays:
        chunks.append(np.array([a.size], "<u8").tobytes())
        chunks.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_container(path: Union[str, Path], container: Container) -> None:
    blob = container.blob.encode("utf-8")
    payload = b"".join([
        CHECKPOINT_MAGIC,
        np.array([CHECKPOINT_VERSION, len(blob)], "<u4").tobytes(),
        blob,
        np.array([container.step], "<u8").tobytes(),
        _arrays_to_bytes(container.params),
        _arrays_to_bytes(container.buffers),
        _arrays_to_bytes(container.moment1),
        _arrays_to_bytes(container.moment2),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    logger.info("checkpoint written: %s (step %d)", path, container.step)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedPayloadError(f"{self.source} ends early (needed {n} bytes at offset {self.pos})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def scalar(self, dtype: str) -> int:
        size = np.dtype(dtype).itemsize
        return int(np.frombuffer(self.take(size), dtype)[0])

    def arrays(self) -> List[np.ndarray]:
        out = []
        for _ in range(self.scalar("<u4")):
            count = self.scalar("<u8")
            out.append(np.frombuffer(self.take(4 * count), "<f4").astype(np.float32))
        return out


def read_container(path: Union[str, Path]) -> Container:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path} is not a UNCK checkpoint")
    reader = _Reader(raw, str(path))
    reader.take(4)
    version = reader.scalar("<u4")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    blob = reader.take(reader.scalar("<u4")).decode("utf-8")
    step = reader.scalar("<u8")
    container = Container(blob, step, reader.arrays(), reader.arrays(), reader.arrays(), reader.arrays())
    if reader.pos != len(raw):
        raise TruncatedPayloadError(f"{path} has {len(raw) - reader.pos} trailing bytes")
    return container


def restore_arrays(targets: Sequence[np.ndarray], stored: Sequence[np.ndarray], what: str) -> None:
    """Copy flat stored arrays into the model's arrays, checking counts."""
    if len(targets) != len(stored):
        raise ConfigMismatchError(f"checkpoint holds {len(stored)} {what} arrays, model has {len(targets)}")
    for target, flat in zip(targets, stored):
        if target.size != flat.size:
            raise ConfigMismatchError(f"{what} array of {flat.size} values does not fit shape {target.shape}")
        target[...] = flat.reshape(target.shape)


def checkpoint_kind(path: Union[str, Path]) -> str:
    """``unet`` or ``patch``, read from the config blob."""
    for line in read_container(path).blob.splitlines():
        key, _, value = line.partition("=")
        if key.strip() == "kind":
            return value.strip()
    return ""
