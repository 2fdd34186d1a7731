"""
3D regression U-Net for voxsynth.

Encoder levels run [conv3 + relu] x2 then 2x2x2 max pooling; the bottleneck runs
[conv3 + relu] x2; each decoder level upsamples 2x, concatenates the encoder
features of the same resolution and runs [conv3 + batch norm + relu] x2; a
1x1x1 convolution with sigmoid produces the output volume.

Backpropagation is written out by hand on top of ``nn_ops``.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoint import Container, read_container, restore_arrays, write_container
from errors import ConfigError, ConfigMismatchError, NonFiniteError, ShapeError
from nn_ops import (
    BatchNormParams,
    ConvParams,
    batchnorm3d_backward,
    batchnorm3d_forward,
    conv3d_backward,
    conv3d_forward,
    init_conv,
    maxpool3d_backward,
    maxpool3d_forward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    upsample_nearest2x_backward,
    upsample_nearest2x_forward,
)
from optim_loss import AdamState, adam_step, get_loss
from run_config import parse_kv
from tensor_core import Tensor, check_tensor, concat_channels, split_channels, stack_volumes
from volume_io import Volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_channels: int = 32
    in_channels: int = 1
    out_channels: int = 1
    bn_momentum: float = 0.1

    def validate(self) -> "UNetConfig":
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if not 0 < self.bn_momentum < 1:
            raise ConfigError(f"batch norm momentum must lie in (0, 1), got {self.bn_momentum}")
        return self

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * 2 ** level for level in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.depth

    def check_input(self, shape: Tuple[int, ...]) -> None:
        step = 2 ** self.depth
        if len(shape) != 5 or shape[1] != self.in_channels:
            raise ShapeError(f"expected input (N, {self.in_channels}, D, H, W), got {shape}")
        if any(s % step for s in shape[2:]):
            raise ShapeError(f"spatial dims {shape[2:]} must be divisible by 2^depth = {step}")

    def to_blob(self) -> Dict[str, str]:
        return {
            "kind": "unet",
            "depth": str(self.depth),
            "base_channels": str(self.base_channels),
            "in_channels": str(self.in_channels),
            "out_channels": str(self.out_channels),
            "bn_momentum": repr(self.bn_momentum),
        }

    @classmethod
    def from_blob(cls, values: Dict[str, str]) -> "UNetConfig":
        if values.get("kind") != "unet":
            raise ConfigMismatchError(f"checkpoint holds a {values.get('kind')!r} model, not a U-Net")
        return cls(int(values["depth"]), int(values["base_channels"]), int(values["in_channels"]),
                   int(values["out_channels"]), float(values["bn_momentum"])).validate()


class UNetModel:
    """Parameters, batch-norm buffers and Adam state of one U-Net."""

    def __init__(self, config: UNetConfig, encoder: List[List[ConvParams]], bottleneck: List[ConvParams],
                 decoder: List[List[Tuple[ConvParams, BatchNormParams]]], head: ConvParams,
                 optimizer: Optional[AdamState] = None):
        self.config = config
        self.encoder = encoder
        self.bottleneck = bottleneck
        self.decoder = decoder  # deepest level first
        self.head = head
        self.optimizer = optimizer or AdamState.zeros_like(self.parameters())
        self.provenance = ""

    @property
    def step(self) -> int:
        return self.optimizer.t

    @property
    def dtype(self):
        return self.head.weights.dtype

    def parameters(self) -> List[np.ndarray]:
        """All trainable arrays in topology order."""
        params = []
        for level in self.encoder:
            for conv in level:
                params += conv.arrays()
        for conv in self.bottleneck:
            params += conv.arrays()
        for level in self.decoder:
            for conv, bn in level:
                params += conv.arrays() + bn.arrays()
        return params + self.head.arrays()

    def buffers(self) -> List[np.ndarray]:
        return [b for level in self.decoder for _, bn in level for b in bn.buffers()]

    # Forward

    def _forward(self, x: Tensor, mode: str):
        check_tensor(x, "x")
        self.config.check_input(x.shape)
        h = x.astype(self.dtype, copy=False)
        skips, encoder_caches = [], []
        for level in self.encoder:
            caches = []
            for conv in level:
                h, conv_cache = conv3d_forward(h, conv)
                h, relu_cache = relu(h)
                caches.append((conv_cache, relu_cache))
            skips.append(h)
            h, pool_cache = maxpool3d_forward(h)
            encoder_caches.append((caches, pool_cache))

        bottleneck_caches = []
        for conv in self.bottleneck:
            h, conv_cache = conv3d_forward(h, conv)
            h, relu_cache = relu(h)
            bottleneck_caches.append((conv_cache, relu_cache))

        decoder_caches = []
        for index, level in enumerate(self.decoder):
            up = upsample_nearest2x_forward(h)
            h = concat_channels(up, skips[-1 - index])
            caches = []
            for conv, bn in level:
                h, conv_cache = conv3d_forward(h, conv)
                h, bn_cache = batchnorm3d_forward(h, bn, mode)
                h, relu_cache = relu(h)
                caches.append((conv_cache, bn_cache, relu_cache))
            decoder_caches.append((up.shape[1], caches))

        h, head_cache = conv3d_forward(h, self.head)
        y, sigmoid_cache = sigmoid(h)
        return y, (encoder_caches, bottleneck_caches, decoder_caches, head_cache, sigmoid_cache)

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        return self._forward(x, mode)[0]

    def predict(self, volume: Volume) -> Volume:
        x = volume.data.astype(self.dtype)[np.newaxis, np.newaxis]
        return Volume(self.forward(x, "eval")[0, 0], volume.spacing)

    # Backward

    def _backward(self, dy: Tensor, caches) -> List[np.ndarray]:
        encoder_caches, bottleneck_caches, decoder_caches, head_cache, sigmoid_cache = caches
        d = sigmoid_backward(dy, sigmoid_cache)
        d, dw, db = conv3d_backward(d, head_cache)
        head_grads = [dw, db]

        decoder_grads: List[List[np.ndarray]] = []
        skip_grads: List[Tensor] = []  # ends up ordered by encoder level
        for split_at, caches_ in reversed(decoder_caches):
            level_grads: List[np.ndarray] = []
            for conv_cache, bn_cache, relu_cache in reversed(caches_):
                d = relu_backward(d, relu_cache)
                d, dgamma, dbeta = batchnorm3d_backward(d, bn_cache)
                d, dw, db = conv3d_backward(d, conv_cache)
                level_grads = [dw, db, dgamma, dbeta] + level_grads
            d_up, d_skip = split_channels(d, split_at)
            skip_grads.append(d_skip)
            d = upsample_nearest2x_backward(d_up)
            decoder_grads.insert(0, level_grads)

        bottleneck_grads: List[np.ndarray] = []
        for conv_cache, relu_cache in reversed(bottleneck_caches):
            d = relu_backward(d, relu_cache)
            d, dw, db = conv3d_backward(d, conv_cache)
            bottleneck_grads = [dw, db] + bottleneck_grads

        encoder_grads: List[List[np.ndarray]] = []
        for level in reversed(range(len(encoder_caches))):
            caches_, pool_cache = encoder_caches[level]
            d = maxpool3d_backward(d, pool_cache) + skip_grads[level]
            level_grads = []
            for conv_cache, relu_cache in reversed(caches_):
                d = relu_backward(d, relu_cache)
                d, dw, db = conv3d_backward(d, conv_cache)
                level_grads = [dw, db] + level_grads
            encoder_grads.insert(0, level_grads)

        grads = [g for level in encoder_grads for g in level] + bottleneck_grads
        grads += [g for level in decoder_grads for g in level]
        return grads + head_grads

    def loss_and_grads(self, x: Tensor, target: Tensor, loss: str = "bce",
                       mode: str = "train") -> Tuple[float, List[np.ndarray]]:
        """Loss at the current parameters and its gradient for every parameter."""
        y, caches = self._forward(x, mode)
        value, dy = get_loss(loss)(y, target.astype(y.dtype, copy=False))
        if not np.isfinite(value):
            raise NonFiniteError(f"{loss} loss is not finite at step {self.step}")
        return value, self._backward(dy, caches)

    def train_step(self, x: Tensor, target: Tensor, loss: str = "bce") -> float:
        """Forward, backward and one Adam update; returns the pre-update loss.

        A rejected step leaves parameters, running statistics and the optimizer as they were.
        """
        saved = [b.copy() for b in self.buffers()]
        try:
            value, grads = self.loss_and_grads(x, target, loss, "train")
        except NonFiniteError:
            for buffer, before in zip(self.buffers(), saved):
                buffer[...] = before
            raise
        adam_step(self.parameters(), grads, self.optimizer)
        return value

    def evaluate_loss(self, x: Tensor, target: Tensor, loss: str = "bce") -> float:
        y = self.forward(x, "eval")
        return get_loss(loss)(y, target.astype(y.dtype, copy=False))[0]


def build_unet(config: UNetConfig, seed: int, dtype=np.float32, lr: float = 0.008,
               beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> UNetModel:
    """Deterministic initialization: one generator walks the layers in topology order."""
    config.validate()
    rng = np.random.default_rng(seed)
    channels = config.level_channels

    encoder = []
    cin = config.in_channels
    for c in channels:
        encoder.append([init_conv(rng, cin, c, 3, 1, dtype), init_conv(rng, c, c, 3, 1, dtype)])
        cin = c
    b = config.bottleneck_channels
    bottleneck = [init_conv(rng, cin, b, 3, 1, dtype), init_conv(rng, b, b, 3, 1, dtype)]

    decoder = []
    below = b
    for c in reversed(channels):
        decoder.append([
            (init_conv(rng, below + c, c, 3, 1, dtype), BatchNormParams.identity(c, dtype, config.bn_momentum)),
            (init_conv(rng, c, c, 3, 1, dtype), BatchNormParams.identity(c, dtype, config.bn_momentum)),
        ])
        below = c
    head = init_conv(rng, channels[0], config.out_channels, 1, 0, dtype)

    model = UNetModel(config, encoder, bottleneck, decoder, head)
    model.optimizer = AdamState.zeros_like(model.parameters(), lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
    logger.info("built U-Net depth=%d base=%d with %d parameters",
                config.depth, config.base_channels, count_params(model))
    return model


def count_params(model: UNetModel) -> int:
    return int(sum(p.size for p in model.parameters()))


def unet_param_count(config: UNetConfig) -> int:
    """Closed-form parameter count, no allocation."""
    def conv(cin, cout, k=3):
        return cout * cin * k ** 3 + cout

    total, cin = 0, config.in_channels
    for c in config.level_channels:
        total += conv(cin, c) + conv(c, c)
        cin = c
    b = config.bottleneck_channels
    total += conv(cin, b) + conv(b, b)
    below = b
    for c in reversed(config.level_channels):
        total += conv(below + c, c) + 2 * c + conv(c, c) + 2 * c
        below = c
    return total + conv(config.level_channels[0], config.out_channels, 1)


# Training loop

@dataclass
class EpochRecord:
    epoch: int
    step: int
    train_loss: float
    val_loss: float

    def to_line(self) -> str:
        return f"{self.epoch},{self.step},{self.train_loss!r},{self.val_loss!r}"


def train_unet_round(model: UNetModel,
                     train_pairs: Sequence[Tuple[Volume, Volume]],
                     val_pairs: Sequence[Tuple[Volume, Volume]],
                     epochs: int,
                     batch_size: int,
                     rng: np.random.Generator,
                     loss: str = "bce",
                     start_epoch: int = 0,
                     on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> List[EpochRecord]:
    """Shuffled mini-batch training; one record per epoch with mean train and validation loss."""
    if not train_pairs:
        raise ShapeError("no training pairs")
    history = []
    for epoch in range(start_epoch, epochs):
        order = rng.permutation(len(train_pairs))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = [train_pairs[i] for i in order[start:start + batch_size]]
            x = stack_volumes([p[0] for p in batch], model.dtype)
            t = stack_volumes([p[1] for p in batch], model.dtype)
            losses.append(model.train_step(x, t, loss))
        val = [model.evaluate_loss(stack_volumes([a], model.dtype), stack_volumes([b], model.dtype), loss)
               for a, b in val_pairs]
        record = EpochRecord(epoch, model.step, float(np.mean(losses)),
                             float(np.mean(val)) if val else float("nan"))
        logger.info("epoch %d step %d train %.6f val %.6f", record.epoch, record.step,
                    record.train_loss, record.val_loss)
        history.append(record)
        if on_epoch:
            on_epoch(record)
    return history


# Checkpoints

def _blob(model: UNetModel) -> str:
    values = model.config.to_blob()
    values.update({
        "lr": repr(model.optimizer.lr),
        "beta1": repr(model.optimizer.beta1),
        "beta2": repr(model.optimizer.beta2),
        "adam_eps": repr(model.optimizer.epsilon),
    })
    lines = [f"{k}={v}" for k, v in sorted(values.items())]
    if model.provenance:
        lines += [f"run_{line}" for line in model.provenance.splitlines() if line]
    return "\n".join(lines) + "\n"


def save_checkpoint(model: UNetModel, path: Union[str, Path]) -> None:
    write_container(path, Container(_blob(model), model.step, model.parameters(), model.buffers(),
                                    model.optimizer.m, model.optimizer.v))


def load_checkpoint(path: Union[str, Path], expected: Optional[UNetConfig] = None) -> UNetModel:
    """Rebuild a model from its checkpoint; ``expected`` guards against loading the wrong shape."""
    container = read_container(path)
    values = parse_kv(container.blob)
    config = UNetConfig.from_blob(values)
    if expected is not None and expected != config:
        raise ConfigMismatchError(f"checkpoint config {config} does not match expected {expected}")
    model = build_unet(config, 0, np.float32, float(values["lr"]), float(values["beta1"]),
                       float(values["beta2"]), float(values["adam_eps"]))
    restore_arrays(model.parameters(), container.params, "parameter")
    restore_arrays(model.buffers(), container.buffers, "buffer")
    restore_arrays(model.optimizer.m, container.moment1, "first-moment")
    restore_arrays(model.optimizer.v, container.moment2, "second-moment")
    model.optimizer.t = container.step
    model.provenance = "\n".join(f"{k[4:]}={v}" for k, v in sorted(values.items()) if k.startswith("run_"))
    return model
