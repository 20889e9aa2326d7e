"""Mask-token infill and the depthwise-separable convolutional predictor."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import InvalidConfig, ShapeMismatch


@dataclass(frozen=True)
class PredictorConfig:
    channels: int
    blocks: int = 3
    kernel: int = 3

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1:
            raise InvalidConfig("predictor channels and blocks must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidConfig(f"predictor kernel must be a positive odd integer, got {self.kernel}")

    @property
    def padding(self) -> int:
        return self.kernel // 2


class SeparableBlock(nn.Module):
    """DepthwiseConv -> PointwiseConv -> BatchNorm -> ReLU."""

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, kernel, padding=kernel // 2,
                                   groups=channels, bias=True)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=True)
        self.bn = nn.BatchNorm2d(channels)
        self.relu = nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.relu(self.bn(self.pointwise(self.depthwise(x))))


class Predictor(nn.Module):
    def __init__(self, config: PredictorConfig):
        super().__init__()
        self.config = config
        self.blocks = nn.Sequential(*[SeparableBlock(config.channels, config.kernel)
                                      for _ in range(config.blocks)])

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.config.channels:
            raise ShapeMismatch(
                f"predictor expects (B, {self.config.channels}, h, w), got {tuple(x.shape)}"
            )
        return self.blocks(x)


def build_predictor(config: PredictorConfig, seed: int = 0) -> Predictor:
    predictor = Predictor(config)
    gen = torch.Generator().manual_seed(seed)
    for m in predictor.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return predictor


def init_mask_token(channels: int, seed: int = 0, std: float = 0.02) -> nn.Parameter:
    gen = torch.Generator().manual_seed(seed)
    return nn.Parameter(torch.randn(channels, generator=gen) * std)


def predictor_forward(features: Tensor, predictor: Predictor) -> Tensor:
    return predictor(features)


def infill_mask_token(features: Tensor, mask: Tensor, token: Tensor) -> Tensor:
    """Write ``token`` into every masked position of ``features``.

    ``features`` is ``(B, C, h, w)`` and ``mask`` is ``(B, h, w)`` (or an
    unbatched ``(h, w)`` mask shared by the batch).
    """
    if features.dim() != 4:
        raise ShapeMismatch(f"features must be rank 4, got {tuple(features.shape)}")
    if token.dim() != 1 or token.shape[0] != features.shape[1]:
        raise ShapeMismatch(f"token length {tuple(token.shape)} != channels {features.shape[1]}")
    m = mask.bool()
    if m.dim() == 2:
        m = m.expand(features.shape[0], *m.shape)
    if m.dim() != 3 or m.shape[0] != features.shape[0] or m.shape[-2:] != features.shape[-2:]:
        raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match features {tuple(features.shape)}")
    return torch.where(m.unsqueeze(1), token.view(1, -1, 1, 1).to(features.dtype), features)


def predictor_param_count(channels: int, kernel: int = 3, blocks: int = 3) -> int:
    """Depthwise weights + bias, pointwise weights + bias, BN affine, per block."""
    c, k = channels, kernel
    return blocks * (c * k * k + c + c * c + c + 2 * c)


def standard_conv_param_count(channels: int, kernel: int = 3, blocks: int = 3) -> int:
    """Same blocks built from one dense ``k x k`` conv (with bias) plus BN."""
    c, k = channels, kernel
    return blocks * (c * c * k * k + c + 2 * c)
