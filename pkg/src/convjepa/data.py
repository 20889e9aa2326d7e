"""Datasets and image transforms.

Pretraining uses exactly two stochastic image transforms, random resized crop
and normalization; masking is applied later, inside the training step.
Evaluation uses a deterministic resize / center-crop / normalize chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch import Tensor

from .errors import EmptyDataset, UndecodableImage, ZeroStd

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp", ".ppm", ".pgm")
STATS_FILE = "stats.txt"
EVAL_RESIZE_RATIO = 1.14


@dataclass
class Dataset:
    """Labelled images. ``items`` holds ``(ref, label)`` where ``ref`` is either
    a decoded ``(3, H, W)`` tensor or a path decoded on access."""

    items: list[tuple[object, int]]
    class_names: list[str]
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if not self.items:
            raise EmptyDataset("dataset has no items")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> list[int]:
        return [label for _, label in self.items]

    def image(self, index: int) -> Tensor:
        ref = self.items[index][0]
        if isinstance(ref, Tensor):
            return ref
        return decode_image(ref)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.items[i] for i in indices], self.class_names, self.mean, self.std)


@dataclass(frozen=True)
class AugmentConfig:
    out_hw: tuple[int, int] = (32, 32)
    crop_scale_range: tuple[float, float] = (0.3, 1.0)
    crop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range must lie in (0, 1], got {self.crop_scale_range}")
        lo, hi = self.crop_aspect_range
        if not (0 < lo <= hi):
            raise ValueError(f"crop_aspect_range must be positive and ordered, got {self.crop_aspect_range}")


# -- decoding -----------------------------------------------------------------

def decode_image(path) -> Tensor:
    """Decode to a float32 ``(3, H, W)`` tensor in [0, 1]. Single-channel
    images are replicated to three channels; alpha is dropped."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("L", "LA", "I", "I;16", "F", "1"):
                arr = np.asarray(img.convert("L"), dtype=np.float32)[..., None].repeat(3, axis=2)
            else:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(f"cannot decode {path}: {exc}") from exc
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)) / 255.0).float()


def load_image_folder(root) -> Dataset:
    """Read ``root/<class_name>/<image>`` into a :class:`Dataset`.

    Class names are sorted by their UTF-8 bytes and mapped to 0..K-1; files
    are sorted the same way within each class. Undecodable files are skipped
    with a warning. Per-channel mean/std are computed once and cached in
    ``root/stats.txt``.
    """
    root = Path(root)
    if not root.is_dir():
        raise EmptyDataset(f"{root} is not a directory")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name.encode())
    items: list[tuple[object, int]] = []
    class_names: list[str] = []
    skipped = 0
    for class_dir in class_dirs:
        files = sorted((f for f in class_dir.iterdir()
                        if f.is_file() and f.suffix.lower() in IMAGE_EXTENSIONS),
                       key=lambda f: f.name.encode())
        decoded = []
        for f in files:
            try:
                decode_image(f)
            except UndecodableImage as exc:
                logger.warning("skipping %s", exc)
                skipped += 1
                continue
            decoded.append(f)
        if not decoded:
            continue
        label = len(class_names)
        class_names.append(class_dir.name)
        items.extend((f, label) for f in decoded)
    if not items:
        if skipped:
            raise UndecodableImage(f"all {skipped} image files under {root} failed to decode")
        raise EmptyDataset(f"no images found under {root}")
    ds = Dataset(items, class_names)
    ds.mean, ds.std = _folder_stats(ds, root)
    return ds


def _folder_stats(ds: Dataset, root: Path):
    cache = root / STATS_FILE
    if cache.exists():
        try:
            return read_stats(cache)
        except ValueError:
            logger.warning("ignoring malformed %s", cache)
    total = torch.zeros(3, dtype=torch.float64)
    total_sq = torch.zeros(3, dtype=torch.float64)
    count = 0
    for i in range(len(ds)):
        img = ds.image(i).double()
        total += img.sum(dim=(1, 2))
        total_sq += img.square().sum(dim=(1, 2))
        count += img.shape[1] * img.shape[2]
    mean = total / count
    std = (total_sq / count - mean.square()).clamp_min(0).sqrt()
    std = torch.where(std > 0, std, torch.ones_like(std))
    mean_t = tuple(float(v) for v in mean)
    std_t = tuple(float(v) for v in std)
    try:
        write_stats(cache, mean_t, std_t)
    except OSError:
        logger.warning("could not write stats cache %s", cache)
    return mean_t, std_t


def write_stats(path, mean, std) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("mean " + " ".join(repr(float(v)) for v in mean) + "\n")
        fh.write("std " + " ".join(repr(float(v)) for v in std) + "\n")


def read_stats(path):
    values = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if len(parts) == 4 and parts[0] in ("mean", "std"):
            values[parts[0]] = tuple(float(v) for v in parts[1:])
    if set(values) != {"mean", "std"}:
        raise ValueError(f"{path} needs 'mean r g b' and 'std r g b' lines")
    return values["mean"], values["std"]


# -- transforms ---------------------------------------------------------------

def _resize(image: Tensor, hw) -> Tensor:
    h, w = int(hw[0]), int(hw[1])
    if tuple(image.shape[-2:]) == (h, w):
        return image
    shrinking = h < image.shape[-2] or w < image.shape[-1]
    out = F.interpolate(image.unsqueeze(0), size=(h, w), mode="bilinear",
                        align_corners=False, antialias=shrinking)
    return out.squeeze(0)


def crop_params(height: int, width: int, scale, aspect, rng: np.random.Generator):
    """Top, left, h, w of a random crop; center-crop fallback after 10 draws."""
    area = height * width
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(10):
        target_area = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target_area * ratio)))
        h = int(round(math.sqrt(target_area / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    in_ratio = width / height
    if in_ratio < aspect[0]:
        w, h = width, max(1, int(round(width / aspect[0])))
    elif in_ratio > aspect[1]:
        h, w = height, max(1, int(round(height * aspect[1])))
    else:
        h, w = height, width
    return (height - h) // 2, (width - w) // 2, h, w


def random_resized_crop(image: Tensor, config: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Crop a random area fraction / log-uniform aspect region and resize it
    bilinearly to ``config.out_hw``."""
    height, width = image.shape[-2:]
    top, left, h, w = crop_params(height, width, config.crop_scale_range,
                                  config.crop_aspect_range, rng)
    return _resize(image[..., top:top + h, left:left + w], config.out_hw)


def normalize(image: Tensor, mean, std) -> Tensor:
    mean_t = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    std_t = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    if bool((std_t <= 0).any()):
        raise ZeroStd(f"std must be positive per channel, got {tuple(std)}")
    return (image - mean_t) / std_t


def denormalize(image: Tensor, mean, std) -> Tensor:
    mean_t = torch.as_tensor(mean, dtype=image.dtype).view(-1, 1, 1)
    std_t = torch.as_tensor(std, dtype=image.dtype).view(-1, 1, 1)
    return image * std_t + mean_t


def eval_transform(image: Tensor, out_hw, mean, std) -> Tensor:
    """Resize the short side to ``round(1.14 * out)``, center crop, normalize."""
    out_h, out_w = int(out_hw[0]), int(out_hw[1])
    height, width = image.shape[-2:]
    short_target = int(round(EVAL_RESIZE_RATIO * max(out_h, out_w)))
    short = min(height, width)
    if short != short_target:
        scale = short_target / short
        new_hw = (short_target, int(round(width * scale))) if height <= width else \
                 (int(round(height * scale)), short_target)
        image = _resize(image, new_hw)
        height, width = image.shape[-2:]
    top = int(round((height - out_h) / 2.0))
    left = int(round((width - out_w) / 2.0))
    image = image[..., top:top + out_h, left:left + out_w]
    return normalize(image, mean, std)


@dataclass(frozen=True)
class PretrainTransform:
    """The complete stochastic image pipeline used during pretraining."""

    config: AugmentConfig
    steps: tuple[str, ...] = field(default=("random_resized_crop", "normalize"))

    def __call__(self, image: Tensor, rng: np.random.Generator) -> Tensor:
        image = random_resized_crop(image, self.config, rng)
        return normalize(image, self.config.mean, self.config.std)


def item_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for a (seed, keys...) tuple, e.g. (seed, tag, epoch, index)."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def stratified_split(labels: Sequence[int], val_fraction: float, seed: int):
    """Deterministic per-class split into (train_indices, val_indices)."""
    labels = np.asarray(labels)
    train, val = [], []
    gen = item_rng(seed, 7)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[gen.permutation(len(idx))]
        n_val = int(round(len(idx) * val_fraction))
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return sorted(train), sorted(val)


# -- synthetic data -----------------------------------------------------------

SYNTH_AMPLITUDE = 0.3
SYNTH_NOISE = 0.2
SYNTH_ANGLE_STEP = math.radians(10.0)
SYNTH_ANGLE_JITTER = 0.05
SYNTH_CYCLES = (2.5, 5.5)
SYNTH_GAIN = (0.4, 1.0)


def synthetic_stats():
    """Analytic per-channel mean and std of :func:`synthetic_dataset` pixels.

    Pixels are ``0.5 + A * g * sin(. + phase) + u`` with the phase uniform on
    [0, 2pi), ``g ~ U(g0, g1)`` and ``u ~ U(-b, b)`` independent, so the mean
    is 0.5 and the variance ``A^2 E[g^2] / 2 + b^2 / 3`` at every pixel.
    """
    g0, g1 = SYNTH_GAIN
    mean_g2 = (g1 ** 3 - g0 ** 3) / (3 * (g1 - g0))
    var = SYNTH_AMPLITUDE ** 2 * mean_g2 / 2 + SYNTH_NOISE ** 2 / 3
    return (0.5, 0.5, 0.5), (math.sqrt(var),) * 3


def synthetic_image(label: int, hw, gen: np.random.Generator) -> Tensor:
    """One grating image. The class sets the stripe orientation; frequency,
    phase, per-channel contrast and pixel noise are drawn per image."""
    h, w = hw
    theta = SYNTH_ANGLE_STEP * label + gen.uniform(-SYNTH_ANGLE_JITTER, SYNTH_ANGLE_JITTER)
    cycles = gen.uniform(*SYNTH_CYCLES)
    phase = gen.uniform(0, 2 * math.pi)
    gains = gen.uniform(*SYNTH_GAIN, size=3)[:, None, None]
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    wave = np.sin(2 * math.pi * cycles * (xx * math.cos(theta) + yy * math.sin(theta)) / w + phase)
    noise = gen.uniform(-SYNTH_NOISE, SYNTH_NOISE, size=(3, h, w))
    img = 0.5 + SYNTH_AMPLITUDE * gains * wave[None] + noise
    return torch.from_numpy(img.astype(np.float32))


def synthetic_dataset(num_classes: int, per_class: int, image_hw=(32, 32), seed: int = 0) -> Dataset:
    """Procedural oriented-grating dataset, ``per_class`` images per class,
    deterministic in ``seed``. Pixel values stay inside [0, 1] without clipping."""
    if num_classes < 2:
        raise ValueError("synthetic_dataset needs at least 2 classes")
    if isinstance(image_hw, int):
        image_hw = (image_hw, image_hw)
    items = []
    for label in range(num_classes):
        for j in range(per_class):
            items.append((synthetic_image(label, image_hw, item_rng(seed, label, j)), label))
    mean, std = synthetic_stats()
    return Dataset(items, [f"class{k}" for k in range(num_classes)], mean, std)
