"""Patch-grid masks: shape derivation, multi-block sampling, rescaling and
pixel-level application.

A mask is a boolean tensor over the patch grid where ``True`` marks a hidden
cell. Single masks have shape ``(grid_h, grid_w)``; batched masks carry a
leading batch dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateMask, NonDivisible, ShapeMismatch


@dataclass(frozen=True)
class PatchSpec:
    patch_px: int
    image_h: int
    image_w: int


@dataclass(frozen=True)
class MaskSamplerParams:
    num_blocks: int = 4
    scale_range: tuple[float, float] = (0.15, 0.2)
    aspect_range: tuple[float, float] = (0.75, 1.5)
    max_resample_attempts: int = 100

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        lo, hi = self.aspect_range
        if not (0.0 < lo <= hi):
            raise ValueError(f"aspect_range must satisfy 0 < lo <= hi, got {self.aspect_range}")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.max_resample_attempts < 1:
            raise ValueError("max_resample_attempts must be >= 1")


def derive_grid_shape(spec: PatchSpec) -> tuple[int, int]:
    if spec.patch_px < 1:
        raise NonDivisible(f"patch_px must be positive, got {spec.patch_px}")
    if spec.image_h % spec.patch_px or spec.image_w % spec.patch_px:
        raise NonDivisible(
            f"image {spec.image_h}x{spec.image_w} is not a multiple of patch size {spec.patch_px}"
        )
    return spec.image_h // spec.patch_px, spec.image_w // spec.patch_px


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _sample_block(grid_h, grid_w, params, gen):
    scale = gen.uniform(*params.scale_range)
    aspect = gen.uniform(*params.aspect_range)
    area = scale * grid_h * grid_w
    # aspect is h / w
    h = int(round(math.sqrt(area * aspect)))
    w = int(round(math.sqrt(area / aspect)))
    h = min(max(h, 1), grid_h)
    w = min(max(w, 1), grid_w)
    top = int(gen.integers(0, grid_h - h + 1))
    left = int(gen.integers(0, grid_w - w + 1))
    return top, left, h, w


def sample_multiblock_mask(
    grid: tuple[int, int],
    params: MaskSamplerParams | None = None,
    rng: np.random.Generator | int | None = None,
) -> Tensor:
    """Sample the union of ``params.num_blocks`` rectangular blocks.

    Blocks are clipped to the grid. The union is redrawn only when it is
    empty or covers every cell; after ``max_resample_attempts`` such draws
    :class:`DegenerateMask` is raised.
    """
    params = params or MaskSamplerParams()
    grid_h, grid_w = grid
    if grid_h * grid_w < 2:
        raise DegenerateMask(f"grid {grid_h}x{grid_w} has fewer than 2 cells")
    gen = _as_generator(rng)
    cells = np.zeros((grid_h, grid_w), dtype=bool)
    for _ in range(params.max_resample_attempts):
        cells[:] = False
        for _ in range(params.num_blocks):
            top, left, h, w = _sample_block(grid_h, grid_w, params, gen)
            cells[top:top + h, left:left + w] = True
        n = int(cells.sum())
        if 0 < n < grid_h * grid_w:
            return torch.from_numpy(cells.copy())
    raise DegenerateMask(
        f"no non-degenerate mask on a {grid_h}x{grid_w} grid after "
        f"{params.max_resample_attempts} attempts"
    )


def sample_batch_masks(batch_size, grid, params=None, rng=None) -> Tensor:
    """One independent mask per image, stacked to ``(batch, grid_h, grid_w)``."""
    gen = _as_generator(rng)
    return torch.stack([sample_multiblock_mask(grid, params, gen) for _ in range(batch_size)])


def upsample_mask(mask: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour replication of every cell into a ``factor x factor`` block.

    Works on the trailing two dimensions, so batched masks are accepted.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return mask.clone()
    return mask.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def apply_mask_to_image(image: Tensor, mask: Tensor, spec: PatchSpec) -> Tensor:
    """Zero every pixel inside a masked patch.

    ``image`` is ``(C, H, W)`` with ``mask`` of shape ``(gh, gw)``, or batched
    ``(B, C, H, W)`` with ``(B, gh, gw)``.
    """
    grid = derive_grid_shape(spec)
    if tuple(mask.shape[-2:]) != grid:
        raise ShapeMismatch(f"mask grid {tuple(mask.shape[-2:])} != expected {grid}")
    if tuple(image.shape[-2:]) != (spec.image_h, spec.image_w):
        raise ShapeMismatch(
            f"image {tuple(image.shape[-2:])} != ({spec.image_h}, {spec.image_w})"
        )
    if image.dim() == 4 and (mask.dim() != 3 or mask.shape[0] != image.shape[0]):
        raise ShapeMismatch("batched images need a batched mask of equal batch size")
    if image.dim() == 3 and mask.dim() != 2:
        raise ShapeMismatch("single image needs a single (gh, gw) mask")
    pixel_mask = upsample_mask(mask.bool(), spec.patch_px).unsqueeze(-3)
    return image.masked_fill(pixel_mask, 0.0)


def masked_positions(mask: Tensor) -> list[tuple[int, int]]:
    """Row-major coordinates of masked cells."""
    rows, cols = torch.nonzero(mask.bool(), as_tuple=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]
