"""Training engine: masked latent loss, EMA target, schedules, AdamW and the
pretraining loop."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import AugmentConfig, Dataset, PretrainTransform, item_rng
from .encoder import EncoderConfig, SparseEncoder, build_encoder
from .errors import EmptyMask, InvalidConfig, NonFiniteGradient, ShapeMismatch
from .maskgrid import MaskSamplerParams, sample_batch_masks
from .predictor import Predictor, PredictorConfig, build_predictor, infill_mask_token, init_mask_token

METRICS_HEADER = ("step", "epoch", "loss", "lr", "ema_momentum", "wall_time_s")

# keys mixed into per-purpose generators so streams never collide
RNG_PERMUTATION, RNG_AUGMENT, RNG_MASK = 1, 2, 3


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    peak_lr: float = 0.01
    weight_decay: float = 0.01
    warmup_epochs: int = 10
    ema_start: float = 0.996
    ema_end: float = 1.0
    ema_schedule: str = "linear"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    target_bn_mode: str = "train"
    weight_decay_exclude: tuple[str, ...] = ()
    mask_token_std: float = 0.02
    deterministic: bool = True

    def __post_init__(self):
        if not (0.0 <= self.ema_start <= self.ema_end <= 1.0):
            raise InvalidConfig("need 0 <= ema_start <= ema_end <= 1")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise InvalidConfig("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be positive")
        if self.ema_schedule not in ("linear", "cosine"):
            raise InvalidConfig(f"ema_schedule must be linear or cosine, got {self.ema_schedule!r}")
        if self.target_bn_mode not in ("train", "eval"):
            raise InvalidConfig(f"target_bn_mode must be train or eval, got {self.target_bn_mode!r}")
        unknown = set(self.weight_decay_exclude) - {"bias", "bn", "mask_token"}
        if unknown:
            raise InvalidConfig(f"unknown weight_decay_exclude entries {sorted(unknown)}")


@dataclass
class ModelState:
    context: SparseEncoder
    target: SparseEncoder
    predictor: Predictor
    mask_token: nn.Parameter
    moments: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)
    step: int = 0

    def learnable(self) -> list[tuple[str, Tensor]]:
        named = [(f"context.{n}", p) for n, p in self.context.named_parameters()]
        named += [(f"predictor.{n}", p) for n, p in self.predictor.named_parameters()]
        named.append(("mask_token", self.mask_token))
        return named

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every float tensor that makes up the state, in a fixed order."""
        out = []
        for prefix, module in (("context", self.context), ("target", self.target),
                               ("predictor", self.predictor)):
            out += [(f"{prefix}.{n}", t) for n, t in module.state_dict(keep_vars=True).items()
                    if t.is_floating_point()]
        out.append(("mask_token", self.mask_token))
        for name, _ in self.learnable():
            m, v = self.moments[name]
            out.append((f"adam_m.{name}", m))
            out.append((f"adam_v.{name}", v))
        return out

    def to(self, dtype: torch.dtype) -> "ModelState":
        self.context.to(dtype)
        self.target.to(dtype)
        self.predictor.to(dtype)
        with torch.no_grad():
            self.mask_token.data = self.mask_token.data.to(dtype)
        self.moments = {k: (m.to(dtype), v.to(dtype)) for k, (m, v) in self.moments.items()}
        return self


def init_state(encoder_config: EncoderConfig, predictor_config: PredictorConfig | None = None,
               seed: int = 0, mask_token_std: float = 0.02) -> ModelState:
    """Fresh state; the target encoder starts as an exact copy of the context encoder."""
    predictor_config = predictor_config or PredictorConfig(channels=encoder_config.out_channels)
    if predictor_config.channels != encoder_config.out_channels:
        raise InvalidConfig("predictor channels must equal the encoder output channels")
    context = build_encoder(encoder_config, seed)
    target = copy.deepcopy(context)
    for p in target.parameters():
        p.requires_grad_(False)
    state = ModelState(context, target, build_predictor(predictor_config, seed + 1),
                       init_mask_token(encoder_config.out_channels, seed + 2, mask_token_std))
    state.moments = {name: (torch.zeros_like(p), torch.zeros_like(p)) for name, p in state.learnable()}
    return state


# -- loss ---------------------------------------------------------------------

def masked_l2_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Mean of ``(pred - target)**2`` over every (batch, channel, masked position)
    element. Unmasked positions do not enter the value or the gradient."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} != target {tuple(target.shape)}")
    m = mask.bool()
    if m.dim() == 2:
        m = m.expand(pred.shape[0], *m.shape)
    if tuple(m.shape) != (pred.shape[0], *pred.shape[-2:]):
        raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match features {tuple(pred.shape)}")
    if not bool(m.any()):
        raise EmptyMask("masked_l2_loss needs at least one masked position")
    diff = (pred - target).permute(0, 2, 3, 1)[m]
    return diff.square().mean()


# -- EMA ----------------------------------------------------------------------

def _ema_pairs(target: nn.Module, context: nn.Module):
    t_state = target.state_dict(keep_vars=True)
    c_state = context.state_dict(keep_vars=True)
    if t_state.keys() != c_state.keys():
        raise ShapeMismatch("target and context modules have different tensors")
    pairs = []
    for name, t in t_state.items():
        c = c_state[name]
        if t.shape != c.shape:
            raise ShapeMismatch(f"{name}: target {tuple(t.shape)} vs context {tuple(c.shape)}")
        if t.is_floating_point():
            pairs.append((t, c))
    return pairs


@torch.no_grad()
def ema_update(target: nn.Module, context: nn.Module, momentum: float) -> nn.Module:
    """``t <- m * t + (1 - m) * c`` for every parameter and float buffer."""
    for t, c in _ema_pairs(target, context):
        t.mul_(momentum).add_(c.detach(), alpha=1.0 - momentum)
    return target


# -- schedules ----------------------------------------------------------------

def momentum_schedule(step: int, total_steps: int, ema_start: float = 0.996,
                      ema_end: float = 1.0, shape: str = "linear") -> float:
    if total_steps <= 0:
        return ema_end
    progress = min(max(step / total_steps, 0.0), 1.0)
    if shape == "cosine":
        return ema_end - (ema_end - ema_start) * (1.0 + math.cos(math.pi * progress)) / 2.0
    return ema_start + (ema_end - ema_start) * progress


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float = 0.01) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then half-cosine decay to 0."""
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer ----------------------------------------------------------------

@torch.no_grad()
def adamw_step(params: Sequence[Tensor], grads: Sequence[Tensor],
               moments: Sequence[tuple[Tensor, Tensor]], lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8, weight_decay=0.01, step: int = 1):
    """One in-place AdamW update (decoupled weight decay, bias-corrected moments).

    ``weight_decay`` may be a scalar or a per-parameter sequence. ``step`` is
    the 1-based update count used for bias correction.
    """
    if step < 1:
        raise ValueError("adamw_step needs step >= 1")
    if not (len(params) == len(grads) == len(moments)):
        raise ShapeMismatch("params, grads and moments must have equal length")
    for g in grads:
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient("non-finite gradient; training diverged")
    decays = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for p, g, (m, v), wd in zip(params, grads, moments, decays):
        if p.shape != g.shape or p.shape != m.shape or p.shape != v.shape:
            raise ShapeMismatch(f"parameter {tuple(p.shape)} vs grad/moments mismatch")
        if wd:
            p.mul_(1.0 - lr * wd)
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, moments


def _decay_for(name: str, exclude: Iterable[str], base: float) -> float:
    exclude = set(exclude)
    if "mask_token" in exclude and name == "mask_token":
        return 0.0
    if "bias" in exclude and name.endswith(".bias") and ".bn." not in name:
        return 0.0
    if "bn" in exclude and ".bn." in name:
        return 0.0
    return base


# -- training -----------------------------------------------------------------

def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


def jepa_loss(state: ModelState, images: Tensor, masks: Tensor) -> Tensor:
    """Forward pass of the whole objective. The target branch carries no graph."""
    with torch.no_grad():
        target = state.target(images)
    context = state.context(images, masks)
    pred = state.predictor(infill_mask_token(context, masks, state.mask_token))
    return masked_l2_loss(pred, target, masks)


def _set_modes(state: ModelState, config: TrainConfig) -> None:
    state.context.set_bn_mode("train")
    state.predictor.train()
    state.target.set_bn_mode("batch" if config.target_bn_mode == "train" else "eval")


def train_step(images: Tensor, state: ModelState, config: TrainConfig, rng: np.random.Generator,
               total_steps: int, warmup_steps: int,
               mask_params: MaskSamplerParams | None = None, lr: float | None = None) -> dict:
    """One optimisation step; mutates ``state`` and returns ``{loss, lr, m}``.

    ``lr`` overrides the schedule when given.
    """
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    p = state.context.patch_px
    grid = (images.shape[-2] // p, images.shape[-1] // p)
    masks = sample_batch_masks(images.shape[0], grid, mask_params, rng)
    _set_modes(state, config)
    loss = jepa_loss(state, images, masks)
    named = state.learnable()
    params = [t for _, t in named]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(params, grads)]
    step_lr = lr_schedule(state.step, warmup_steps, total_steps, config.peak_lr) if lr is None else lr
    decays = [_decay_for(n, config.weight_decay_exclude, config.weight_decay) for n, _ in named]
    adamw_step(params, grads, [state.moments[n] for n, _ in named], step_lr, config.adam_beta1,
               config.adam_beta2, config.adam_eps, decays, state.step + 1)
    m = momentum_schedule(state.step, total_steps, config.ema_start, config.ema_end, config.ema_schedule)
    ema_update(state.target, state.context, m)
    state.step += 1
    return {"loss": float(loss.detach()), "lr": step_lr, "m": m}


@dataclass
class PretrainResult:
    state: ModelState
    rows: list[dict]


def pretrain(config: TrainConfig, dataset: Dataset, encoder_config: EncoderConfig,
             predictor_config: PredictorConfig | None = None,
             mask_params: MaskSamplerParams | None = None,
             augment: AugmentConfig | None = None,
             state: ModelState | None = None,
             on_step: Callable[[dict], None] | None = None,
             on_epoch_end: Callable[[ModelState, int, float], None] | None = None) -> PretrainResult:
    """Run (or resume, when ``state`` is given) the pretraining loop.

    All randomness is drawn from generators keyed on (seed, purpose, epoch or
    step, item), so a run resumed from any saved state replays the remaining
    steps exactly.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.deterministic:
        set_deterministic(True)
    augment = augment or AugmentConfig(mean=dataset.mean, std=dataset.std)
    transform = PretrainTransform(augment)
    if state is None:
        state = init_state(encoder_config, predictor_config, config.seed, config.mask_token_std)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    rows: list[dict] = []
    start = time.perf_counter()
    epoch = state.step // steps_per_epoch
    while epoch < config.epochs:
        perm = item_rng(config.seed, RNG_PERMUTATION, epoch).permutation(n)
        losses = []
        for b in range(state.step - epoch * steps_per_epoch, steps_per_epoch):
            idx = perm[b * config.batch_size:(b + 1) * config.batch_size]
            images = torch.stack([
                transform(dataset.image(int(i)), item_rng(config.seed, RNG_AUGMENT, epoch, int(i)))
                for i in idx
            ]).to(state.mask_token.dtype)
            step = state.step
            metrics = train_step(images, state, config, item_rng(config.seed, RNG_MASK, step),
                                 total_steps, warmup_steps, mask_params)
            row = {"step": step, "epoch": epoch, "loss": metrics["loss"], "lr": metrics["lr"],
                   "ema_momentum": metrics["m"], "wall_time_s": time.perf_counter() - start}
            rows.append(row)
            losses.append(metrics["loss"])
            if on_step is not None:
                on_step(row)
        if on_epoch_end is not None:
            on_epoch_end(state, epoch, float(np.mean(losses)) if losses else float("nan"))
        epoch += 1
    return PretrainResult(state, rows)
