"""
Tensor helpers for voxsynth.

Tensors are plain ``numpy.ndarray`` objects in N, C, D, H, W layout (row-major,
W fastest). The helpers here check shapes and always return fresh storage so a
caller mutating an output never reaches back into an input.
"""

from typing import Optional, Tuple

import numpy as np

from errors import NonFiniteError, ShapeError, ValueRangeError
from volume_io import Volume

Tensor = np.ndarray


def check_tensor(t: Tensor, name: str = "tensor") -> Tensor:
    if not isinstance(t, np.ndarray) or t.ndim != 5:
        raise ShapeError(f"{name} must be a 5-axis (N, C, D, H, W) array, got {getattr(t, 'shape', type(t))}")
    if min(t.shape) < 1:
        raise ShapeError(f"{name} has an empty axis: {t.shape}")
    return t


def from_volume(volume: Volume, dtype=np.float32) -> Tensor:
    """Volume of dims (D, H, W) -> tensor of shape (1, 1, D, H, W)."""
    return np.array(volume.data, dtype=dtype)[np.newaxis, np.newaxis]


def to_volume(t: Tensor, spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Volume:
    check_tensor(t)
    if t.shape[0] != 1 or t.shape[1] != 1:
        raise ShapeError(f"to_volume needs shape (1, 1, D, H, W), got {t.shape}")
    return Volume(t[0, 0], spacing)


def stack_volumes(volumes, dtype=np.float32) -> Tensor:
    """Batch of single-channel volumes -> tensor of shape (N, 1, D, H, W)."""
    return np.stack([np.asarray(v.data, dtype=dtype) for v in volumes])[:, np.newaxis]


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate channels of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(t: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    """Inverse of ``concat_channels``: channels [0, at) and [at, C)."""
    check_tensor(t)
    if not 0 < at < t.shape[1]:
        raise ValueRangeError(f"split index {at} must lie strictly inside (0, {t.shape[1]})")
    return t[:, :at].copy(), t[:, at:].copy()


def assert_finite(t: Tensor, what: Optional[str] = None) -> Tensor:
    if not np.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what or 'tensor'}")
    return t
