"""Flat ``key = value`` run configuration.

Resolution order is built-in defaults, then the config file, then CLI
overrides; later sources win. Every key is typed and validated, unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigTypeError, InvalidConfig, MissingFile, UnknownKey

PRESET_IMAGE_SIZE = {"micro": 32, "small": 64, "resnet50": 224}

_CHOICES = {
    "preset": ("micro", "small", "resnet50"),
    "dataset": ("synthetic", "folder"),
    "ema_schedule": ("linear", "cosine"),
    "target_bn_mode": ("train", "eval"),
    "probe_encoder": ("target", "context"),
}


@dataclass
class RunConfig:
    # encoder / predictor
    preset: str = "micro"
    image_size: int = 0  # 0 selects the preset's default resolution
    norm_epsilon: float = 1e-5
    predictor_blocks: int = 3
    predictor_kernel: int = 3
    mask_token_std: float = 0.02
    # masking
    num_blocks: int = 4
    mask_scale_min: float = 0.15
    mask_scale_max: float = 0.2
    mask_aspect_min: float = 0.75
    mask_aspect_max: float = 1.5
    mask_max_attempts: int = 100
    # augmentation
    crop_scale_min: float = 0.3
    crop_scale_max: float = 1.0
    crop_aspect_min: float = 0.75
    crop_aspect_max: float = 4 / 3
    norm_mean: tuple[float, ...] = ()  # empty: use dataset statistics
    norm_std: tuple[float, ...] = ()
    # optimisation
    epochs: int = 200
    batch_size: int = 128
    peak_lr: float = 0.01
    weight_decay: float = 0.01
    weight_decay_exclude: tuple[str, ...] = ()
    warmup_epochs: int = 10
    ema_start: float = 0.996
    ema_end: float = 1.0
    ema_schedule: str = "linear"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    target_bn_mode: str = "train"
    seed: int = 0
    deterministic: bool = False
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    synthetic_classes: int = 4
    synthetic_per_class: int = 200
    synthetic_seed: int = 0
    val_fraction: float = 0.25
    # probes
    probe_encoder: str = "target"
    probe_epochs: int = 90
    probe_lr: float = 0.1
    probe_momentum: float = 0.9
    probe_batch_size: int = 256
    knn_k: int = 20
    knn_temperature: float = 0.07
    # run directory
    out_dir: str = "runs/default"
    checkpoint_keep: int = 2

    @property
    def resolved_image_size(self) -> int:
        return self.image_size or PRESET_IMAGE_SIZE[self.preset]

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


_HINTS = typing.get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def _coerce(key: str, raw: str):
    kind = _HINTS[key]
    text = raw.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        item = typing.get_args(kind)[0]
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(item(p) for p in parts)
    except ValueError:
        raise ConfigTypeError(f"{key}: cannot parse {raw.strip()!r} as {getattr(kind, '__name__', kind)}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def parse_lines(text: str, source: str = "<config>") -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _HINTS:
            raise UnknownKey(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def parse_overrides(pairs) -> dict[str, object]:
    """Parse ``key=value`` strings, or a mapping whose string values are parsed
    and whose other values are taken as already typed."""
    if isinstance(pairs, dict):
        items = list(pairs.items())
    else:
        items = []
        for pair in pairs:
            if "=" not in pair:
                raise InvalidConfig(f"override {pair!r} needs the form key=value")
            items.append(tuple(pair.split("=", 1)))
    out = {}
    for key, raw in items:
        key = key.strip()
        if key not in _HINTS:
            raise UnknownKey(f"unknown key {key!r}")
        out[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return out


def validate(cfg: RunConfig) -> RunConfig:
    for key, choices in _CHOICES.items():
        if getattr(cfg, key) not in choices:
            raise InvalidConfig(f"{key}: {getattr(cfg, key)!r} is not one of {choices}")
    positive = ("epochs", "batch_size", "num_blocks", "mask_max_attempts", "predictor_blocks",
                "predictor_kernel", "synthetic_classes", "synthetic_per_class", "probe_batch_size",
                "knn_k", "checkpoint_keep")
    for key in positive:
        if getattr(cfg, key) < 1:
            raise InvalidConfig(f"{key} must be positive")
    if cfg.epochs < 0 or cfg.warmup_epochs < 0 or cfg.warmup_epochs > cfg.epochs:
        raise InvalidConfig("need 0 <= warmup_epochs <= epochs")
    if cfg.probe_epochs < 0:
        raise InvalidConfig("probe_epochs must be >= 0")
    if not 0.0 <= cfg.val_fraction < 1.0:
        raise InvalidConfig("val_fraction must lie in [0, 1)")
    if cfg.image_size < 0:
        raise InvalidConfig("image_size must be >= 0")
    if len(cfg.norm_mean) not in (0, 3) or len(cfg.norm_std) not in (0, 3):
        raise InvalidConfig("norm_mean and norm_std need 3 comma-separated values or none")
    if cfg.dataset == "folder" and not cfg.data_dir:
        raise InvalidConfig("dataset = folder needs data_dir")
    return cfg


def parse_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the file at ``path`` (if any), then ``overrides``."""
    values: dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(f"config file not found: {p}")
        values.update(parse_lines(p.read_text(encoding="utf-8"), str(p)))
    if overrides:
        values.update(parse_overrides(overrides))
    return validate(dataclasses.replace(RunConfig(), **values))


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_format(getattr(cfg, key))}\n" for key in KEYS)


def write_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
