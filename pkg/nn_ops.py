"""
Layer kernels for voxsynth: forward maps and their exact gradients.

Every forward returns ``(y, cache)`` and the matching backward consumes that cache.
Kernels are dtype-preserving, so the same code trains at float32 and is gradient
checked at float64.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np
from scipy.special import expit

from errors import ShapeError, ValueRangeError
from tensor_core import Tensor, check_tensor

logger = logging.getLogger(__name__)

_STRICT = False


def set_strict(flag: bool) -> None:
    """Single-schedule kernels: contractions run through ``einsum`` without BLAS."""
    global _STRICT
    _STRICT = bool(flag)
    logger.debug("strict kernels %s", "on" if _STRICT else "off")


def is_strict() -> bool:
    return _STRICT


def _contract(subscripts: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum(subscripts, a, b, optimize=not _STRICT)


@dataclass
class ConvParams:
    weights: np.ndarray  # (Cout, Cin, k, k, k)
    bias: np.ndarray     # (Cout,)
    stride: int = 1
    padding: int = 0

    @property
    def kernel(self) -> int:
        return int(self.weights.shape[2])

    @property
    def in_channels(self) -> int:
        return int(self.weights.shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.weights.shape[0])

    def arrays(self) -> List[np.ndarray]:
        return [self.weights, self.bias]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, momentum: float = 0.1,
                 epsilon: float = 1e-5) -> "BatchNormParams":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype), momentum, epsilon)

    def arrays(self) -> List[np.ndarray]:
        return [self.gamma, self.beta]

    def buffers(self) -> List[np.ndarray]:
        return [self.running_mean, self.running_var]


@dataclass
class LayerCache:
    """Values one forward call saves for its backward call."""
    op: str
    saved: Dict[str, Any] = field(default_factory=dict)

    def expect(self, op: str) -> "LayerCache":
        if self.op != op:
            raise ShapeError(f"cache from {self.op} passed to {op} backward")
        return self


def init_conv(rng: np.random.Generator, cin: int, cout: int, kernel: int = 3,
              padding: int = 0, dtype=np.float32) -> ConvParams:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)), zero bias."""
    volume = kernel ** 3
    limit = np.sqrt(6.0 / ((cin + cout) * volume))
    weights = rng.uniform(-limit, limit, size=(cout, cin, kernel, kernel, kernel)).astype(dtype)
    return ConvParams(weights, np.zeros(cout, dtype), 1, padding)


def _channel(v: np.ndarray) -> np.ndarray:
    return v.reshape(1, -1, 1, 1, 1)


# Convolution

def _conv_output_dims(shape: Tuple[int, ...], p: ConvParams) -> Tuple[int, int, int]:
    dims = []
    for size in shape[2:]:
        span = size + 2 * p.padding - p.kernel
        if span < 0 or span % p.stride:
            raise ShapeError(f"input size {size} with kernel {p.kernel}, padding {p.padding}, "
                             f"stride {p.stride} gives a non-integral output size")
        dims.append(span // p.stride + 1)
    return tuple(dims)


def _window(xp: np.ndarray, offset: Tuple[int, int, int], out: Tuple[int, int, int], stride: int):
    return tuple([slice(None), slice(None)] + [
        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out)
    ])


def conv3d_forward(x: Tensor, p: ConvParams) -> Tuple[Tensor, LayerCache]:
    """3D cross-correlation with symmetric zero padding."""
    check_tensor(x, "x")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {p.in_channels}")
    out = _conv_output_dims(x.shape, p)
    pad = p.padding
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x

    acc = np.zeros((x.shape[0], p.out_channels) + out, dtype=np.result_type(x, p.weights))
    for offset in itertools.product(range(p.kernel), repeat=3):
        tap = p.weights[(slice(None), slice(None)) + offset]
        acc += _contract("oc,ncdhw->nodhw", tap, xp[_window(xp, offset, out, p.stride)])
    acc += _channel(p.bias)
    return acc, LayerCache("conv3d", {"xp": xp, "x_shape": x.shape, "params": p, "out": out})


def conv3d_backward(dy: Tensor, cache: LayerCache) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    saved = cache.expect("conv3d").saved
    xp, p, out = saved["xp"], saved["params"], saved["out"]
    n = saved["x_shape"][0]
    if dy.shape != (n, p.out_channels) + out:
        raise ShapeError(f"upstream gradient {dy.shape} does not match conv output {(n, p.out_channels) + out}")

    db = dy.sum(axis=(0, 2, 3, 4))
    dw = np.zeros_like(p.weights)
    dxp = np.zeros_like(xp)
    for offset in itertools.product(range(p.kernel), repeat=3):
        window = _window(xp, offset, out, p.stride)
        dw[(slice(None), slice(None)) + offset] = _contract("nodhw,ncdhw->oc", dy, xp[window])
        dxp[window] += _contract("oc,nodhw->ncdhw", p.weights[(slice(None), slice(None)) + offset], dy)

    pad = p.padding
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(dxp), dw, db


# Pooling and upsampling

def maxpool3d_forward(x: Tensor) -> Tuple[Tensor, LayerCache]:
    """2x2x2 max pooling, stride 2. Ties resolve to the lowest flat index in the block."""
    check_tensor(x, "x")
    n, c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {x.shape[2:]}")
    blocks = (x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
               .transpose(0, 1, 2, 4, 6, 3, 5, 7)
               .reshape(n, c, d // 2, h // 2, w // 2, 8))
    argmax = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, argmax[..., np.newaxis], axis=-1)[..., 0]
    # argmax is the index inside the block, ordered (dz, dy, dx)
    return y, LayerCache("maxpool3d", {"argmax": argmax, "x_shape": x.shape})


def maxpool3d_backward(dy: Tensor, cache: LayerCache) -> Tensor:
    saved = cache.expect("maxpool3d").saved
    argmax, (n, c, d, h, w) = saved["argmax"], saved["x_shape"]
    if dy.shape != argmax.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match pooled shape {argmax.shape}")
    blocks = np.zeros(argmax.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(blocks, argmax[..., np.newaxis], dy[..., np.newaxis], axis=-1)
    return (blocks.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
                  .transpose(0, 1, 2, 5, 3, 6, 4, 7)
                  .reshape(n, c, d, h, w))


def upsample_nearest2x_forward(x: Tensor) -> Tensor:
    check_tensor(x, "x")
    return x.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)


def upsample_nearest2x_backward(dy: Tensor) -> Tensor:
    check_tensor(dy, "dy")
    n, c, d, h, w = dy.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"upsampling gradient needs even spatial dims, got {dy.shape[2:]}")
    return dy.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(3, 5, 7))


# Batch normalization

_BN_AXES = (0, 2, 3, 4)


def batchnorm3d_forward(x: Tensor, p: BatchNormParams, mode: str = "train") -> Tuple[Tensor, LayerCache]:
    check_tensor(x, "x")
    if x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(f"input has {x.shape[1]} channels, batch norm has {p.gamma.shape[0]}")
    if mode == "train":
        count = x.size // x.shape[1]
        if count < 2:
            raise ValueRangeError("train-mode batch norm needs at least two values per channel")
        mean = x.mean(axis=_BN_AXES)
        var = x.var(axis=_BN_AXES)
        p.running_mean[...] = (1 - p.momentum) * p.running_mean + p.momentum * mean
        p.running_var[...] = (1 - p.momentum) * p.running_var + p.momentum * var
    elif mode == "eval":
        mean, var = p.running_mean, p.running_var
    else:
        raise ValueRangeError(f"batch norm mode must be 'train' or 'eval', got {mode!r}")

    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - _channel(mean)) * _channel(inv_std)
    y = _channel(p.gamma) * xhat + _channel(p.beta)
    return y, LayerCache("batchnorm3d", {"xhat": xhat, "inv_std": inv_std, "params": p, "mode": mode})


def batchnorm3d_backward(dy: Tensor, cache: LayerCache) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    saved = cache.expect("batchnorm3d").saved
    xhat, inv_std, p = saved["xhat"], saved["inv_std"], saved["params"]
    if dy.shape != xhat.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match batch norm output {xhat.shape}")
    dbeta = dy.sum(axis=_BN_AXES)
    dgamma = (dy * xhat).sum(axis=_BN_AXES)
    dxhat = dy * _channel(p.gamma)
    if saved["mode"] == "eval":
        return dxhat * _channel(inv_std), dgamma, dbeta
    count = dy.size // dy.shape[1]
    dx = _channel(inv_std / count) * (
        count * dxhat
        - _channel(dxhat.sum(axis=_BN_AXES))
        - xhat * _channel((dxhat * xhat).sum(axis=_BN_AXES))
    )
    return dx, dgamma, dbeta


# Activations

def relu(x: Tensor) -> Tuple[Tensor, LayerCache]:
    positive = x > 0
    return np.where(positive, x, 0).astype(x.dtype, copy=False), LayerCache("relu", {"positive": positive})


def relu_backward(dy: Tensor, cache: LayerCache) -> Tensor:
    positive = cache.expect("relu").saved["positive"]
    if dy.shape != positive.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match relu output {positive.shape}")
    return np.where(positive, dy, 0).astype(dy.dtype, copy=False)


def sigmoid(x: Tensor) -> Tuple[Tensor, LayerCache]:
    """Logistic function, kept strictly inside (0, 1) at the input dtype."""
    y = expit(x)
    low = np.nextafter(y.dtype.type(0), y.dtype.type(1))
    high = np.nextafter(y.dtype.type(1), y.dtype.type(0))
    np.clip(y, low, high, out=y)
    return y, LayerCache("sigmoid", {"y": y})


def sigmoid_backward(dy: Tensor, cache: LayerCache) -> Tensor:
    y = cache.expect("sigmoid").saved["y"]
    if dy.shape != y.shape:
        raise ShapeError(f"upstream gradient {dy.shape} does not match sigmoid output {y.shape}")
    return dy * y * (1 - y)
