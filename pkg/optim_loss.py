"""
Losses, the Adam update and a finite-difference gradient checker.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from errors import NonFiniteError, ShapeError, ValueRangeError

logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


def _reduce(values: np.ndarray, reduction: str) -> Tuple[float, float]:
    """Returns (loss, scale applied to per-voxel gradients)."""
    if reduction == "mean":
        return float(values.sum() / values.size), 1.0 / values.size
    if reduction == "sum":
        return float(values.sum()), 1.0
    raise ValueRangeError(f"reduction must be 'mean' or 'sum', got {reduction!r}")


def _check_pair(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ in shape")


def bce_loss(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    """
    Two-term binary cross-entropy for targets in [0, 1].

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; the gradient is
    taken at the clamped values.
    """
    _check_pair(pred, target)
    p = np.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    per_voxel = -(target * np.log(p) + (1 - target) * np.log1p(-p))
    loss, scale = _reduce(per_voxel, reduction)
    dpred = (p - target) / (p * (1 - p)) * scale
    return loss, dpred.astype(pred.dtype, copy=False)


def mse_loss(pred: np.ndarray, target: np.ndarray, reduction: str = "mean") -> Tuple[float, np.ndarray]:
    _check_pair(pred, target)
    diff = pred - target
    loss, scale = _reduce(diff * diff, reduction)
    return loss, (2 * scale) * diff


LOSSES = {"bce": bce_loss, "mse": mse_loss}


def get_loss(name: str) -> Callable:
    try:
        return LOSSES[name]
    except KeyError:
        raise ValueRangeError(f"unknown loss {name!r}; choose from {sorted(LOSSES)}") from None


@dataclass
class AdamState:
    """First/second moments per parameter plus the shared step count."""
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    lr: float = 0.008
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> bool:
    """
    One bias-corrected Adam update, applied to ``params`` in place.

    Returns False (and leaves params and state untouched) when any gradient is
    non-finite.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("params, grads and optimizer state hold different numbers of arrays")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape}, gradient {g.shape} and moment {m.shape} disagree")
    if not all(np.isfinite(g).all() for g in grads):
        logger.warning("non-finite gradient at step %d; Adam step skipped", state.t + 1)
        return False

    state.t += 1
    correction1 = 1 - state.beta1 ** state.t
    correction2 = 1 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
    return True


def grad_check(f: Callable[..., Tuple[float, Sequence[np.ndarray]]],
               inputs: Sequence[np.ndarray],
               eps: float = 1e-6,
               max_coords: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               floor: float = 1e-8) -> float:
    """
    Largest relative error between analytic and central-difference gradients.

    ``f(*inputs)`` returns ``(value, grads)`` with one gradient per input. Inputs are
    perturbed in place and restored. ``max_coords`` samples that many coordinates
    across all inputs instead of visiting every one. ``floor`` bounds the
    denominator of the relative error from below, for gradients that are exactly zero.
    """
    if not all(x.flags.c_contiguous for x in inputs):
        raise ValueRangeError("grad_check perturbs inputs in place; pass contiguous arrays")
    value, analytic = f(*inputs)
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    if not np.isfinite(value):
        raise NonFiniteError("function value is not finite at the check point")

    coords = [(i, j) for i, x in enumerate(inputs) for j in range(x.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = rng or np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    for i, j in coords:
        flat = inputs[i].reshape(-1)
        original = flat[j]
        flat[j] = original + eps
        plus = f(*inputs)[0]
        flat[j] = original - eps
        minus = f(*inputs)[0]
        flat[j] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteError(f"function value is not finite near coordinate {j} of input {i}")
        numeric = (plus - minus) / (2 * eps)
        exact = analytic[i].reshape(-1)[j]
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    return worst
