"""
Local patch baseline for voxsynth.

A small fully valid 3D CNN maps a 15x15x15 input patch to the 3x3x3 target patch
around the same center. Whole volumes are predicted patch by patch and the
overlapping 3x3x3 outputs are averaged. Each output voxel sees input voxels at
Chebyshev distance 6 or less, which is the locality this method is compared on.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoint import Container, read_container, restore_arrays, write_container
from errors import ConfigMismatchError, NonFiniteError, ShapeError, ValueRangeError
from nn_ops import ConvParams, conv3d_backward, conv3d_forward, init_conv, relu, relu_backward, sigmoid, sigmoid_backward
from optim_loss import AdamState, adam_step, get_loss
from run_config import parse_kv
from tensor_core import Tensor, check_tensor
from volume_io import Volume

logger = logging.getLogger(__name__)

INPUT_PATCH = 15
OUTPUT_PATCH = 3
HALF_INPUT = INPUT_PATCH // 2
HALF_OUTPUT = OUTPUT_PATCH // 2
RECEPTIVE_RADIUS = 6
MAX_STRIDE = OUTPUT_PATCH
CHANNELS = (1, 16, 32, 32, 32, 32, 1)


@dataclass
class PatchPair:
    input_patch: np.ndarray   # (15, 15, 15)
    target_patch: np.ndarray  # (3, 3, 3)
    center: Tuple[int, int, int]


def _centers(dims: Tuple[int, int, int], stride: int,
             close_edge: bool = False) -> List[Tuple[int, int, int]]:
    if stride < 1:
        raise ValueRangeError(f"stride must be >= 1, got {stride}")
    if min(dims) < INPUT_PATCH:
        raise ShapeError(f"volume {dims} is smaller than the {INPUT_PATCH}^3 patch")
    axes = [list(range(HALF_INPUT, d - HALF_INPUT, stride)) for d in dims]
    if close_edge:
        # the last valid center joins the grid so the far interior edge is reached
        for axis, d in zip(axes, dims):
            if axis[-1] != d - 1 - HALF_INPUT:
                axis.append(d - 1 - HALF_INPUT)
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


def _window(center: Tuple[int, int, int], half: int) -> Tuple[slice, slice, slice]:
    return tuple(slice(c - half, c + half + 1) for c in center)


def extract_patches(input_volume: Volume, target_volume: Volume, stride: int = 1) -> List[PatchPair]:
    """All patch pairs whose 15^3 window fits, centers on a ``stride`` grid starting at the corner."""
    if input_volume.dims != target_volume.dims:
        raise ShapeError(f"input {input_volume.dims} and target {target_volume.dims} differ in dims")
    return [
        PatchPair(input_volume.data[_window(c, HALF_INPUT)].copy(),
                  target_volume.data[_window(c, HALF_OUTPUT)].copy(), c)
        for c in _centers(input_volume.dims, stride)
    ]


class PatchModel:
    """Six valid 3x3x3 convolutions, relu between, sigmoid at the end."""

    def __init__(self, layers: List[ConvParams], optimizer: Optional[AdamState] = None):
        self.layers = layers
        self.optimizer = optimizer or AdamState.zeros_like(self.parameters())
        self.provenance = ""

    @property
    def step(self) -> int:
        return self.optimizer.t

    @property
    def dtype(self):
        return self.layers[0].weights.dtype

    def parameters(self) -> List[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]

    def buffers(self) -> List[np.ndarray]:
        return []

    def _forward(self, x: Tensor):
        check_tensor(x, "x")
        h = x.astype(self.dtype, copy=False)
        caches = []
        for index, layer in enumerate(self.layers):
            h, conv_cache = conv3d_forward(h, layer)
            if index < len(self.layers) - 1:
                h, act_cache = relu(h)
            else:
                h, act_cache = sigmoid(h)
            caches.append((conv_cache, act_cache))
        return h, caches

    def forward(self, x: Tensor) -> Tensor:
        return self._forward(x)[0]

    def loss_and_grads(self, x: Tensor, target: Tensor, loss: str = "bce") -> Tuple[float, List[np.ndarray]]:
        y, caches = self._forward(x)
        value, d = get_loss(loss)(y, target.astype(y.dtype, copy=False))
        if not np.isfinite(value):
            raise NonFiniteError(f"{loss} loss is not finite at step {self.step}")
        grads: List[np.ndarray] = []
        for index in reversed(range(len(self.layers))):
            conv_cache, act_cache = caches[index]
            if index == len(self.layers) - 1:
                d = sigmoid_backward(d, act_cache)
            else:
                d = relu_backward(d, act_cache)
            d, dw, db = conv3d_backward(d, conv_cache)
            grads = [dw, db] + grads
        return value, grads

    def train_step(self, x: Tensor, target: Tensor, loss: str = "bce") -> float:
        value, grads = self.loss_and_grads(x, target, loss)
        adam_step(self.parameters(), grads, self.optimizer)
        return value


def build_patch_cnn(seed: int, dtype=np.float32, lr: float = 0.008, beta1: float = 0.9,
                    beta2: float = 0.999, epsilon: float = 1e-8) -> PatchModel:
    rng = np.random.default_rng(seed)
    layers = [init_conv(rng, cin, cout, 3, 0, dtype) for cin, cout in zip(CHANNELS[:-1], CHANNELS[1:])]
    model = PatchModel(layers)
    model.optimizer = AdamState.zeros_like(model.parameters(), lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    return model


def _batch(patches: Sequence[np.ndarray], dtype) -> Tensor:
    return np.stack(patches).astype(dtype, copy=False)[:, np.newaxis]


def sample_epoch(pairs: Sequence[Tuple[Volume, Volume]], samples: int,
                 rng: np.random.Generator) -> Tuple[List[Tuple[int, Tuple[int, int, int]]], np.ndarray]:
    """Random (volume index, center) picks for one epoch and the order to visit them."""
    if not pairs:
        raise ShapeError("no training pairs")
    if samples < 1:
        raise ValueRangeError(f"samples per volume must be >= 1, got {samples}")
    picks = []
    for index, (source, _) in enumerate(pairs):
        dims = source.dims
        if min(dims) < INPUT_PATCH:
            raise ShapeError(f"volume {dims} is smaller than the {INPUT_PATCH}^3 patch")
        centers = rng.integers(np.full(3, HALF_INPUT), np.array(dims) - HALF_INPUT, size=(samples, 3))
        picks += [(index, tuple(int(v) for v in c)) for c in centers]
    return picks, rng.permutation(len(picks))


def train_patch_epoch(model: PatchModel,
                      pairs: Sequence[Tuple[Volume, Volume]],
                      samples: int,
                      batch_size: int,
                      rng: np.random.Generator,
                      loss: str = "bce") -> float:
    """One epoch over ``samples`` random patch centers per volume; returns the mean batch loss."""
    picks, order = sample_epoch(pairs, samples, rng)
    losses = []
    for start in range(0, len(order), batch_size):
        chosen = [picks[i] for i in order[start:start + batch_size]]
        x = _batch([pairs[i][0].data[_window(c, HALF_INPUT)] for i, c in chosen], model.dtype)
        t = _batch([pairs[i][1].data[_window(c, HALF_OUTPUT)] for i, c in chosen], model.dtype)
        losses.append(model.train_step(x, t, loss))
    mean = float(np.mean(losses))
    logger.info("patch epoch done: %d batches, step %d, mean loss %.6f", len(losses), model.step, mean)
    return mean


def evaluate_patch_loss(model: PatchModel, pairs: Sequence[Tuple[Volume, Volume]], stride: int = 3,
                        loss: str = "bce") -> float:
    """Mean loss over a fixed patch grid; used as the validation figure."""
    values = []
    for source, target in pairs:
        patches = extract_patches(source, target, stride)
        x = _batch([p.input_patch for p in patches], model.dtype)
        t = _batch([p.target_patch for p in patches], model.dtype)
        values.append(get_loss(loss)(model.forward(x), t)[0])
    return float(np.mean(values)) if values else float("nan")


def reconstruct(model: PatchModel, volume: Volume, stride: int = 1, batch_size: int = 256,
                workers: int = 1) -> Tuple[Volume, np.ndarray]:
    """
    Predict a whole volume by averaging overlapping 3x3x3 outputs.

    Returns the prediction and its coverage mask. Voxels no patch reaches stay 0
    and are False in the mask.
    """
    if stride > MAX_STRIDE:
        raise ValueRangeError(f"stride {stride} leaves gaps between {OUTPUT_PATCH}^3 outputs; use <= {MAX_STRIDE}")
    centers = _centers(volume.dims, stride, close_edge=True)
    chunks = [centers[i:i + batch_size] for i in range(0, len(centers), batch_size)]

    def run(chunk):
        x = _batch([volume.data[_window(c, HALF_INPUT)] for c in chunk], model.dtype)
        return model.forward(x)[:, 0]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(run, chunks))
    else:
        outputs = [run(chunk) for chunk in chunks]

    total = np.zeros(volume.dims, np.float64)
    count = np.zeros(volume.dims, np.int64)
    # accumulation stays in center order so results do not depend on the schedule
    for chunk, out in zip(chunks, outputs):
        for center, patch in zip(chunk, out):
            window = _window(center, HALF_OUTPUT)
            total[window] += patch
            count[window] += 1
    covered = count > 0
    prediction = np.zeros(volume.dims, np.float64)
    prediction[covered] = total[covered] / count[covered]
    return Volume(prediction, volume.spacing), covered


# Checkpoints

def _blob(model: PatchModel) -> str:
    values = {
        "kind": "patch",
        "channels": ",".join(str(c) for c in CHANNELS),
        "lr": repr(model.optimizer.lr),
        "beta1": repr(model.optimizer.beta1),
        "beta2": repr(model.optimizer.beta2),
        "adam_eps": repr(model.optimizer.epsilon),
    }
    lines = [f"{k}={v}" for k, v in sorted(values.items())]
    lines += [f"run_{line}" for line in model.provenance.splitlines() if line]
    return "\n".join(lines) + "\n"


def save_checkpoint(model: PatchModel, path: Union[str, Path]) -> None:
    write_container(path, Container(_blob(model), model.step, model.parameters(), [],
                                    model.optimizer.m, model.optimizer.v))


def load_checkpoint(path: Union[str, Path]) -> PatchModel:
    container = read_container(path)
    values = parse_kv(container.blob)
    if values.get("kind") != "patch":
        raise ConfigMismatchError(f"checkpoint holds a {values.get('kind')!r} model, not the patch baseline")
    if values.get("channels") != ",".join(str(c) for c in CHANNELS):
        raise ConfigMismatchError(f"patch checkpoint channel plan {values.get('channels')} is not supported")
    model = build_patch_cnn(0, np.float32, float(values["lr"]), float(values["beta1"]),
                            float(values["beta2"]), float(values["adam_eps"]))
    restore_arrays(model.parameters(), container.params, "parameter")
    restore_arrays(model.buffers(), container.buffers, "buffer")
    restore_arrays(model.optimizer.m, container.moment1, "first-moment")
    restore_arrays(model.optimizer.v, container.moment2, "second-moment")
    model.optimizer.t = container.step
    model.provenance = "\n".join(f"{k[4:]}={v}" for k, v in sorted(values.items()) if k.startswith("run_"))
    return model
