"""Mask-aware convolutional encoder.

The same module serves as context and target encoder. Given a patch-grid mask
it runs in context mode: the input image is zeroed inside masked patches and
every convolution, normalization and pooling output is re-zeroed at masked
positions (the mask is replicated to each layer's resolution). Normalization
statistics are then taken over visible positions only. Without a mask it is
an ordinary dense CNN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import InvalidConfig, NoVisiblePositions, ShapeMismatch
from .maskgrid import PatchSpec, apply_mask_to_image, upsample_mask

PRESETS = ("micro", "small", "resnet50")
RESNET50_BLOCKS = (3, 4, 6, 3)


@dataclass(frozen=True)
class StagePlan:
    stage_strides: tuple[int, ...]
    channels: tuple[int, ...]

    def __post_init__(self):
        if len(self.stage_strides) != len(self.channels) or not self.channels:
            raise InvalidConfig("stage_strides and channels must be non-empty and equally long")
        if any(s < 1 for s in self.stage_strides) or any(c < 1 for c in self.channels):
            raise InvalidConfig("strides and channel counts must be positive")

    @property
    def patch_px(self) -> int:
        return math.prod(self.stage_strides)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


@dataclass(frozen=True)
class EncoderConfig:
    preset: str = "micro"
    stage_plan: StagePlan = field(default_factory=lambda: StagePlan((2, 2), (8, 16)))
    input_channels: int = 3
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.input_channels < 1:
            raise InvalidConfig("input_channels must be positive")
        if not self.norm_epsilon > 0:
            raise InvalidConfig("norm_epsilon must be positive")
        if self.preset == "resnet50" and self.stage_plan != _PRESET_PLANS["resnet50"]:
            raise InvalidConfig("the resnet50 preset has a fixed stage plan")

    @classmethod
    def from_preset(cls, preset: str, **kwargs) -> "EncoderConfig":
        if preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {preset!r}; expected one of {PRESETS}")
        return cls(preset=preset, stage_plan=_PRESET_PLANS[preset], **kwargs)

    @property
    def patch_px(self) -> int:
        return self.stage_plan.patch_px

    @property
    def out_channels(self) -> int:
        return self.stage_plan.out_channels


_PRESET_PLANS = {
    "micro": StagePlan((2, 2), (8, 16)),
    "small": StagePlan((2, 2, 2, 2, 2), (16, 32, 64, 128, 256)),
    "resnet50": StagePlan((2, 2, 2, 2, 2), (64, 256, 512, 1024, 2048)),
}


class Visibility:
    """Patch-grid mask that can be read at any multiple of the grid resolution."""

    def __init__(self, mask: Tensor):
        if mask.dim() != 3:
            raise ShapeMismatch(f"expected a batched (B, gh, gw) mask, got {tuple(mask.shape)}")
        self.mask = mask.bool()
        self._cache: dict[tuple[int, int], Tensor] = {}

    def at(self, hw) -> Tensor:
        """Boolean ``(B, 1, h, w)`` tensor, True where hidden."""
        h, w = int(hw[0]), int(hw[1])
        key = (h, w)
        if key not in self._cache:
            gh, gw = self.mask.shape[-2:]
            if h % gh or w % gw or h // gh != w // gw:
                raise ShapeMismatch(f"activation {h}x{w} is not aligned with mask grid {gh}x{gw}")
            self._cache[key] = upsample_mask(self.mask, h // gh).unsqueeze(1)
        return self._cache[key]

    def zero(self, y: Tensor) -> Tensor:
        return y.masked_fill(self.at(y.shape[-2:]), 0.0)


def _out_mask_4d(out_mask: Tensor, y: Tensor) -> Tensor:
    m = out_mask.bool()
    if m.dim() == 2:
        m = m.expand(y.shape[0], *m.shape)
    if m.dim() == 3:
        m = m.unsqueeze(1)
    if m.shape[0] != y.shape[0] or tuple(m.shape[-2:]) != tuple(y.shape[-2:]):
        raise ShapeMismatch(f"out_mask {tuple(out_mask.shape)} does not match conv output {tuple(y.shape)}")
    return m


def sparse_conv_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1,
                        padding=0, out_mask: Tensor | None = None, groups: int = 1) -> Tensor:
    """Standard cross-correlation whose outputs at masked positions are set to 0.

    ``out_mask`` is True at hidden positions and must match the output
    spatial shape, either as ``(h, w)`` or ``(B, h, w)``.
    """
    y = F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)
    if out_mask is None:
        return y
    return y.masked_fill(_out_mask_4d(out_mask, y), 0.0)


def sparse_batchnorm(x: Tensor, mask: Tensor | None, weight: Tensor | None, bias: Tensor | None,
                     eps: float = 1e-5, training: bool = True, running_mean: Tensor | None = None,
                     running_var: Tensor | None = None, momentum: float = 0.1) -> Tensor:
    """Batch normalization over visible positions only.

    In training mode the per-channel mean and (biased) variance are reduced
    over the visible (batch, h, w) positions; running statistics, when given,
    are updated in place from those visible-only statistics with the usual
    unbiased variance correction. Masked positions come out as exactly 0.
    """
    if mask is None:
        return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)
    hidden = _out_mask_4d(mask, x)
    if not training:
        y = F.batch_norm(x, running_mean, running_var, weight, bias, False, momentum, eps)
        return y.masked_fill(hidden, 0.0)
    keep = (~hidden).to(x.dtype)
    count = int(keep.sum().item())  # visible positions per channel
    if count == 0:
        raise NoVisiblePositions("every position is masked; batch statistics are undefined")
    mean = (x * keep).sum(dim=(0, 2, 3)) / count
    centered = x - mean[None, :, None, None]
    var = (centered.square() * keep).sum(dim=(0, 2, 3)) / count
    y = centered * torch.rsqrt(var + eps)[None, :, None, None]
    if weight is not None:
        y = y * weight[None, :, None, None]
    if bias is not None:
        y = y + bias[None, :, None, None]
    if running_mean is not None and running_var is not None:
        with torch.no_grad():
            unbiased = var * (count / max(count - 1, 1))
            running_mean.mul_(1 - momentum).add_(mean.detach(), alpha=momentum)
            running_var.mul_(1 - momentum).add_(unbiased.detach(), alpha=momentum)
    return y.masked_fill(hidden, 0.0)


class SparseConv2d(nn.Conv2d):
    def forward(self, x: Tensor, vis: Visibility | None = None) -> Tensor:
        y = super().forward(x)
        return vis.zero(y) if vis is not None else y


class SparseBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm2d with visible-only statistics when given a :class:`Visibility`.

    ``freeze_stats`` makes training mode use batch statistics without touching
    the running buffers (used for the target encoder, whose buffers follow the
    context encoder through the moving average instead).
    """

    freeze_stats: bool = False

    def forward(self, x: Tensor, vis: Visibility | None = None) -> Tensor:
        track = self.training and not self.freeze_stats
        rm = self.running_mean if (track or not self.training) else None
        rv = self.running_var if (track or not self.training) else None
        mask = vis.at(x.shape[-2:]).squeeze(1) if vis is not None else None
        return sparse_batchnorm(x, mask, self.weight, self.bias, self.eps, self.training,
                                rm, rv, self.momentum)


class ConvBNReLU(nn.Module):
    def __init__(self, cin, cout, kernel, stride, eps, relu=True):
        super().__init__()
        self.conv = SparseConv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, bias=False)
        self.bn = SparseBatchNorm2d(cout, eps=eps)
        self.relu = relu

    def forward(self, x, vis=None):
        x = self.bn(self.conv(x, vis), vis)
        return F.relu(x) if self.relu else x


class PlainStage(nn.Module):
    """Strided 3x3 conv-BN-ReLU followed by a stride-1 3x3 conv-BN-ReLU."""

    def __init__(self, cin, cout, stride, eps):
        super().__init__()
        self.down = ConvBNReLU(cin, cout, 3, stride, eps)
        self.refine = ConvBNReLU(cout, cout, 3, 1, eps)

    def forward(self, x, vis=None):
        return self.refine(self.down(x, vis), vis)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride, eps):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = ConvBNReLU(cin, width, 1, 1, eps)
        self.conv2 = ConvBNReLU(width, width, 3, stride, eps)
        self.conv3 = ConvBNReLU(width, cout, 1, 1, eps, relu=False)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = ConvBNReLU(cin, cout, 1, stride, eps, relu=False)

    def forward(self, x, vis=None):
        identity = x if self.downsample is None else self.downsample(x, vis)
        out = self.conv3(self.conv2(self.conv1(x, vis), vis), vis)
        return F.relu(out + identity)


class ResNetStem(nn.Module):
    def __init__(self, cin, eps):
        super().__init__()
        self.conv = ConvBNReLU(cin, 64, 7, 2, eps)

    def forward(self, x, vis=None):
        return self.conv(x, vis)


class ResNetLayer(nn.Module):
    def __init__(self, cin, width, blocks, stride, eps, maxpool=False):
        super().__init__()
        self.maxpool = maxpool
        self.blocks = nn.ModuleList()
        for i in range(blocks):
            self.blocks.append(Bottleneck(cin, width, stride if i == 0 else 1, eps))
            cin = width * Bottleneck.expansion

    def forward(self, x, vis=None):
        if self.maxpool:
            x = F.max_pool2d(x, kernel_size=3, stride=2, padding=1)
            if vis is not None:
                x = vis.zero(x)
        for block in self.blocks:
            x = block(x, vis)
        return x


class SparseEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        plan = config.stage_plan
        eps = config.norm_epsilon
        self.stages = nn.ModuleList()
        if config.preset == "resnet50":
            self.stages.append(ResNetStem(config.input_channels, eps))
            cin = 64
            for i, (blocks, width) in enumerate(zip(RESNET50_BLOCKS, (64, 128, 256, 512))):
                # first bottleneck layer gets its downsampling from the max-pool
                self.stages.append(ResNetLayer(cin, width, blocks, 1 if i == 0 else 2, eps,
                                               maxpool=(i == 0)))
                cin = width * Bottleneck.expansion
        else:
            cin = config.input_channels
            for stride, cout in zip(plan.stage_strides, plan.channels):
                self.stages.append(PlainStage(cin, cout, stride, eps))
                cin = cout

    @property
    def patch_px(self) -> int:
        return self.config.patch_px

    @property
    def out_channels(self) -> int:
        return self.config.out_channels

    def _prepare(self, x: Tensor, mask: Tensor | None):
        if x.dim() != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeMismatch(f"expected (B, {self.config.input_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        p = self.patch_px
        if h % p or w % p:
            raise ShapeMismatch(f"input {h}x{w} is not a multiple of the total stride {p}")
        if mask is None:
            return x, None
        if mask.dim() == 2:
            mask = mask.expand(x.shape[0], *mask.shape)
        if tuple(mask.shape) != (x.shape[0], h // p, w // p):
            raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match grid {(x.shape[0], h // p, w // p)}")
        x = apply_mask_to_image(x, mask, PatchSpec(p, h, w))
        return x, Visibility(mask)

    def forward_stages(self, x: Tensor, mask: Tensor | None = None) -> list[Tensor]:
        """Output of every stage, in order."""
        x, vis = self._prepare(x, mask)
        outs = []
        for stage in self.stages:
            x = stage(x, vis)
            outs.append(x)
        return outs

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        x, vis = self._prepare(x, mask)
        for stage in self.stages:
            x = stage(x, vis)
        return x

    def set_bn_mode(self, mode: str) -> "SparseEncoder":
        """``train`` (batch stats, update buffers), ``batch`` (batch stats, buffers
        untouched) or ``eval`` (running stats)."""
        if mode not in ("train", "batch", "eval"):
            raise ValueError(f"unknown bn mode {mode!r}")
        self.train(mode != "eval")
        for m in self.modules():
            if isinstance(m, SparseBatchNorm2d):
                m.freeze_stats = mode == "batch"
        return self


def encode_context(image: Tensor, mask: Tensor, encoder: SparseEncoder) -> Tensor:
    return encoder(image, mask)


def encode_target(image: Tensor, encoder: SparseEncoder) -> Tensor:
    return encoder(image, None)


def build_encoder(config: EncoderConfig, seed: int = 0) -> SparseEncoder:
    """Construct and initialize an encoder deterministically from ``seed``.

    Conv weights use He-normal fan-in scaling; BN has gamma=1, beta=0.
    """
    encoder = SparseEncoder(config)
    gen = torch.Generator().manual_seed(seed)
    for m in encoder.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return encoder


def plain_encoder_param_count(plan: StagePlan, input_channels: int = 3) -> int:
    """Closed-form parameter count of a plain (micro/small) encoder."""
    total = 0
    cin = input_channels
    for cout in plan.channels:
        total += cin * cout * 9 + 2 * cout
        total += cout * cout * 9 + 2 * cout
        cin = cout
    return total
