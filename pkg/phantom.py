"""
Phantom generator for voxsynth.

Input volumes are Gaussian blobs inside an ellipsoid. Targets follow a known
map: 3x3x3 box smoothing, optionally modulated by the input at the voxel
mirrored across the axis-0 mid-plane, raised to the power 1.5. The mirror term
couples voxels far apart, which a local patch model cannot represent.

Class 1 subjects have a fixed subregion of the input dimmed by ``amplitude``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.ndimage import uniform_filter

from dataset import PairedDataset, Subject
from errors import ConfigError
from volume_io import Volume, normalize_minmax

logger = logging.getLogger(__name__)

SEMI_AXES = (0.42, 0.36, 0.40)  # fraction of the volume size
MIN_BLOBS, MAX_BLOBS = 8, 16
EXPONENT = 1.5


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    n: int = 72
    balance: str = "strict"
    seed: int = 0
    mode: str = "nonlocal"
    amplitude: float = 0.5

    def validate(self) -> "PhantomSpec":
        if self.size < 8:
            raise ConfigError(f"phantom size must be >= 8, got {self.size}")
        if self.n < 1:
            raise ConfigError(f"phantom needs at least one subject, got n={self.n}")
        if self.mode not in ("local", "nonlocal"):
            raise ConfigError(f"mode must be local or nonlocal, got {self.mode!r}")
        if self.balance not in ("strict", "loose"):
            raise ConfigError(f"balance must be strict or loose, got {self.balance!r}")
        if self.balance == "strict" and self.n % 2:
            raise ConfigError(f"strict class balance needs an even number of subjects, got n={self.n}")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ConfigError(f"amplitude must lie in [0, 1], got {self.amplitude}")
        return self


def mirror_index(index: Tuple[int, int, int], size: int) -> Tuple[int, int, int]:
    return (size - 1 - index[0], index[1], index[2])


def ellipsoid_mask(size: int) -> np.ndarray:
    center = (size - 1) / 2.0
    grid = np.indices((size, size, size), dtype=np.float64)
    radius = sum(((grid[a] - center) / (SEMI_AXES[a] * size)) ** 2 for a in range(3))
    return radius <= 1.0


def class_region(size: int) -> Tuple[slice, slice, slice]:
    """The subregion dimmed in class 1, off the mirror plane on the low side of axis 0."""
    return (slice(size // 4, size // 2 - 1), slice(3 * size // 8, 5 * size // 8),
            slice(3 * size // 8, 5 * size // 8))


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = ellipsoid_mask(size)
    grid = np.indices((size, size, size), dtype=np.float64)
    inside = np.argwhere(mask)
    total = np.zeros((size, size, size))
    for _ in range(int(rng.integers(MIN_BLOBS, MAX_BLOBS + 1))):
        center = inside[rng.integers(len(inside))]
        sigma = rng.uniform(size / 16.0, size / 6.0)
        weight = rng.uniform(0.5, 1.0)
        dist2 = sum((grid[a] - center[a]) ** 2 for a in range(3))
        total += weight * np.exp(-dist2 / (2.0 * sigma * sigma))
    return np.clip(total, 0.0, 1.0) * mask


def phantom_target(volume: Volume, mode: str = "nonlocal") -> Volume:
    """The generator map from an input volume to its target."""
    data = volume.data.astype(np.float64)
    smooth = uniform_filter(data, size=3, mode="constant")
    if mode == "nonlocal":
        smooth = smooth * (0.5 + 0.5 * data[::-1, :, :])
    elif mode != "local":
        raise ConfigError(f"mode must be local or nonlocal, got {mode!r}")
    return Volume(np.clip(np.clip(smooth, 0.0, None) ** EXPONENT, 0.0, 1.0), volume.spacing)


def gen_phantom_pair(seed: int, spec: PhantomSpec, label: int = 0) -> Tuple[Volume, Volume]:
    rng = np.random.default_rng(seed)
    source = normalize_minmax(Volume(_blobs(rng, spec.size)))
    if label == 1 and spec.amplitude > 0:
        data = np.array(source.data)
        data[class_region(spec.size)] *= 1.0 - spec.amplitude
        source = Volume(data, source.spacing)
    return source, phantom_target(source, spec.mode)


def phantom_labels(spec: PhantomSpec):
    return [i % 2 for i in range(spec.n)]


def gen_dataset(spec: PhantomSpec, workers: int = 1) -> PairedDataset:
    spec.validate()
    labels = phantom_labels(spec)

    def make(index: int) -> Subject:
        source, target = gen_phantom_pair(spec.seed + index, spec, labels[index])
        return Subject(f"sub{index:03d}", labels[index], source, target)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            subjects = list(pool.map(make, range(spec.n)))
    else:
        subjects = [make(i) for i in range(spec.n)]
    logger.info("generated %d %s phantom subjects of size %d^3", spec.n, spec.mode, spec.size)
    return PairedDataset(subjects)
