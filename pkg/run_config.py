"""
Run configuration and logging setup for voxsynth.

Settings resolve in this order, later layers winning:
    field defaults -> profile preset -> environment (VOXSYNTH_<KEY>, .env honoured)
    -> --config file (key=value lines) -> command-line flags
"""

import io
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from dotenv import dotenv_values, load_dotenv

from errors import ConfigError

load_dotenv()

ENV_PREFIX = "VOXSYNTH_"
LOG_FORMAT = "# %(asctime)s [%(levelname)s] %(name)s: %(message)s"

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {"size": 32, "depth": 3, "base_channels": 8},
    "paper": {"size": 64, "depth": 4, "base_channels": 32},
}


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    threads: int = 1
    strict: bool = False
    log_level: str = "INFO"
    # model
    depth: int = 3
    base_channels: int = 8
    size: int = 32
    bn_momentum: float = 0.1
    # optimizer and training
    lr: float = 0.008
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 1
    loss: str = "bce"
    # cross-validation
    folds: int = 9
    fold: str = "0"
    fold_seed: int = 0
    # patch baseline
    patch_samples: int = 10000
    patch_batch: int = 64
    patch_stride: int = 1
    # metrics
    max_intensity: float = 1.0
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    # classification
    feature_grid: int = 4
    lambda_grid: Tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
    # phantom
    n: int = 72
    mode: str = "nonlocal"
    amplitude: float = 0.5
    balance: str = "strict"

    def to_text(self) -> str:
        """Sorted ``key=value`` lines; the inverse of ``from_text``."""
        lines = []
        for key, value in sorted(asdict(self).items()):
            lines.append(f"{key}={_format(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls(**coerce(parse_kv(text)))

    def fold_rounds(self):
        """``fold`` as a list of round indices (``all`` -> every round)."""
        if self.fold == "all":
            return list(range(self.folds))
        return [int(self.fold)]

    def workers(self) -> int:
        return 1 if self.strict else max(1, self.threads)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str) -> Any:
    kind = _FIELD_TYPES[key]
    text = str(raw).strip()
    try:
        if kind is bool or kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
        if key == "lambda_grid":
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r}") from None


def parse_kv(text: str) -> Dict[str, str]:
    """Parse ``key=value`` text the way ``.env`` files are parsed."""
    return {k: v for k, v in dotenv_values(stream=io.StringIO(text)).items() if v is not None}


def coerce(values: Mapping[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, raw in values.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(raw, (tuple, list)):
            raw = ",".join(str(v) for v in raw)
        out[key] = _parse(key, str(raw))
    return out


def _env_layer(env: Mapping[str, str]) -> Dict[str, Any]:
    found = {}
    for name, value in env.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in _FIELD_TYPES:
                found[key] = value
    return coerce(found)


def _file_layer(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return coerce({k: v for k, v in dotenv_values(path).items() if v is not None})


def resolve_config(flags: Optional[Mapping[str, Any]] = None,
                   config_path: Optional[Union[str, Path]] = None,
                   env: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Merge every configuration layer into one RunConfig."""
    flags = coerce({k: v for k, v in (flags or {}).items() if v is not None})
    env_values = _env_layer(os.environ if env is None else env)
    file_values = _file_layer(config_path)

    profile = flags.get("profile") or file_values.get("profile") or env_values.get("profile") or "desk"
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")

    merged: Dict[str, Any] = {"profile": profile}
    for layer in (PROFILES[profile], env_values, file_values, flags):
        merged.update(layer)
    merged["profile"] = profile
    config = RunConfig(**merged)
    validate(config)
    return config


def validate(config: RunConfig) -> None:
    if config.fold != "all":
        try:
            index = int(config.fold)
        except ValueError:
            raise ConfigError(f"fold must be a round index or 'all', got {config.fold!r}") from None
        if not 0 <= index < config.folds:
            raise ConfigError(f"fold {index} outside [0, {config.folds})")
    if config.folds < 3:
        raise ConfigError("cross-validation needs at least 3 folds (test, validation, train)")
    if config.loss not in ("bce", "mse"):
        raise ConfigError(f"loss must be bce or mse, got {config.loss!r}")
    if config.mode not in ("local", "nonlocal"):
        raise ConfigError(f"phantom mode must be local or nonlocal, got {config.mode!r}")
    if config.balance not in ("strict", "loose"):
        raise ConfigError(f"balance must be strict or loose, got {config.balance!r}")
    if config.depth < 1 or config.base_channels < 1 or config.size < 1:
        raise ConfigError("depth, base_channels and size must be positive")
    if not config.lambda_grid:
        raise ConfigError("lambda_grid is empty")


def write_sidecar(config: RunConfig, directory: Union[str, Path]) -> Path:
    """Store the resolved configuration next to an output for provenance."""
    path = Path(directory) / "config.env"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.to_text(), encoding="utf-8")
    return path


def setup_logging(level: Optional[str] = None) -> None:
    level = (level or os.getenv(ENV_PREFIX + "LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    if not any(getattr(h, "_voxsynth", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._voxsynth = True
        root.addHandler(handler)
    root.setLevel(level)
