"""Invariant suites run by ``convjepa verify``.

Each suite returns ``(passed, detail)``; :func:`run_all` times them and
collects the rows for the CLI table.
"""

from __future__ import annotations

import time
from typing import Callable

import numpy as np
import torch

from .core import init_state, lr_schedule, masked_l2_loss, momentum_schedule
from .encoder import EncoderConfig, build_encoder
from .maskgrid import (MaskSamplerParams, PatchSpec, derive_grid_shape, sample_batch_masks,
                       sample_multiblock_mask, upsample_mask)
from .predictor import (Predictor, PredictorConfig, build_predictor, infill_mask_token,
                        predictor_param_count, standard_conv_param_count)


def count_params(module: torch.nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- finite-difference oracle -------------------------------------------------

def central_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of the scalar ``fn()`` w.r.t. every element of ``tensor``."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            plus = fn().item()
            flat[i] = orig - step
            minus = fn().item()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-4) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over one tensor.

    The floor matters for biases feeding a batch-statistics BN: their exact
    gradient is zero and central differences only return roundoff (~1e-11),
    so for them the ratio degrades to a scaled absolute error.
    """
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
    return (analytic - numeric).abs().max().item() / scale


def pipeline_gradient_errors(seed: int = 0, image_size: int = 16, batch: int = 2,
                             step: float = 1e-5) -> dict[str, float]:
    """Float64 masked-prediction loss on the micro preset: autograd vs central
    differences for every learnable tensor."""
    torch.manual_seed(seed)
    config = EncoderConfig.from_preset("micro")
    state = init_state(config, seed=seed).to(torch.float64)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        # move the target away from the context so the loss is not trivially small
        for p in state.target.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        state.mask_token.normal_(0.0, 0.5, generator=gen)
    images = torch.randn(batch, 3, image_size, image_size, generator=gen, dtype=torch.float64)
    grid = image_size // config.patch_px
    masks = sample_batch_masks(batch, (grid, grid), MaskSamplerParams(), np.random.default_rng(seed))
    state.context.set_bn_mode("batch")
    state.target.set_bn_mode("batch")
    state.predictor.train()
    # predictor BN would update running stats on every call; they do not affect train-mode output
    with torch.no_grad():
        target = state.target(images)

    def loss_fn():
        ctx = state.context(images, masks)
        pred = state.predictor(infill_mask_token(ctx, masks, state.mask_token))
        return masked_l2_loss(pred, target, masks)

    named = state.learnable()
    grads = torch.autograd.grad(loss_fn(), [t for _, t in named])
    return {name: relative_error(g, central_difference(loss_fn, t, step))
            for (name, t), g in zip(named, grads)}


def predictor_gradient_errors(channels: int = 4, kernel: int = 3, seed: int = 0,
                              step: float = 1e-5) -> dict[str, float]:
    gen = torch.Generator().manual_seed(seed)
    pred = build_predictor(PredictorConfig(channels, 3, kernel), seed).double().train()
    x = torch.randn(2, channels, 5, 5, generator=gen, dtype=torch.float64)
    w = torch.randn(2, channels, 5, 5, generator=gen, dtype=torch.float64)

    def loss_fn():
        return (pred(x) * w).mean()

    params = list(pred.named_parameters())
    grads = torch.autograd.grad(loss_fn(), [p for _, p in params])
    return {n: relative_error(g, central_difference(loss_fn, p, step)) for (n, p), g in zip(params, grads)}


# -- suites -------------------------------------------------------------------

def suite_mask_algebra(seeds: int = 10_000):
    if derive_grid_shape(PatchSpec(32, 224, 224)) != (7, 7):
        return False, "224px / 32px grid is not 7x7"
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = torch.from_numpy(rng.random((3, 4)) < 0.4)
        for a in (1, 2, 3):
            for b in (1, 2, 4):
                if not torch.equal(upsample_mask(m, a * b), upsample_mask(upsample_mask(m, a), b)):
                    return False, f"upsample composition fails for factors {a}, {b}"
    params = MaskSamplerParams()
    lo, hi = 49, 0
    for s in range(seeds):
        n = int(sample_multiblock_mask((7, 7), params, s).sum())
        lo, hi = min(lo, n), max(hi, n)
        if not 0 < n < 49:
            return False, f"seed {s}: degenerate mask with {n} cells"
    return True, f"{seeds} masks on 7x7, masked cells in [{lo}, {hi}]"


def _random_case(config: EncoderConfig, gen: torch.Generator, rng: np.random.Generator, size: int, batch: int = 2):
    images = torch.randn(batch, 3, size, size, generator=gen)
    grid = size // config.patch_px
    return images, sample_batch_masks(batch, (grid, grid), MaskSamplerParams(), rng)


def suite_sparsity(cases: int = 50):
    gen = torch.Generator().manual_seed(1)
    rng = np.random.default_rng(1)
    for preset, size in (("micro", 32), ("small", 64)):
        config = EncoderConfig.from_preset(preset)
        enc = build_encoder(config, seed=1).train()
        n = cases if preset == "micro" else max(cases // 5, 1)
        for _ in range(n):
            images, masks = _random_case(config, gen, rng, size)
            with torch.no_grad():
                outs = enc.forward_stages(images, masks)
            for i, out in enumerate(outs):
                factor = out.shape[-1] // masks.shape[-1]
                hidden = upsample_mask(masks, factor).unsqueeze(1).expand_as(out)
                if bool((out[hidden] != 0).any()):
                    return False, f"{preset} stage {i}: non-zero activation at a masked position"
    return True, f"{cases} micro + {max(cases // 5, 1)} small cases, every stage exact zero"


def suite_dense_equivalence(cases: int = 20):
    gen = torch.Generator().manual_seed(2)
    worst = 0.0
    for preset, size in (("micro", 32), ("small", 64)):
        config = EncoderConfig.from_preset(preset)
        enc = build_encoder(config, seed=2).eval()
        grid = size // config.patch_px
        for _ in range(cases):
            images = torch.randn(2, 3, size, size, generator=gen)
            empty = torch.zeros(2, grid, grid, dtype=torch.bool)
            with torch.no_grad():
                diff = (enc(images, empty) - enc(images)).abs().max().item()
            worst = max(worst, diff)
    return worst == 0.0, f"max |context - target| = {worst}"


def suite_gradient_check(tol: float = 1e-5):
    errors = pipeline_gradient_errors()
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    return worst < tol, f"{len(errors)} tensors, max rel err {worst:.2e} ({name})"


def suite_parameter_count():
    for c, k, b, expected in ((2048, 3, 3, 12_662_784), (4, 3, 3, 204), (1, 1, 1, 6)):
        if predictor_param_count(c, k, b) != expected:
            return False, f"formula mismatch for C={c}"
    if count_params(Predictor(PredictorConfig(2048, 3, 3))) != 12_662_784:
        return False, "enumerated predictor parameters differ from formula"
    if standard_conv_param_count(2048, 3, 3) != 113_264_640:
        return False, "standard-conv count differs"
    enc = count_params(build_encoder(EncoderConfig.from_preset("resnet50")))
    ok = predictor_param_count(2048) < enc < standard_conv_param_count(2048)
    return ok, f"separable 12,662,784 < resnet50 encoder {enc:,} < standard 113,264,640"


def suite_schedule_endpoints(tol: float = 1e-12):
    total, warm = 1000, 100
    checks = [
        abs(momentum_schedule(0, total) - 0.996),
        abs(momentum_schedule(total, total) - 1.0),
        abs(lr_schedule(0, warm, total, 0.01) - 0.0),
        abs(lr_schedule(warm, warm, total, 0.01) - 0.01),
        abs(lr_schedule(total, warm, total, 0.01) - 0.0),
    ]
    worst = max(checks)
    return worst <= tol, f"max endpoint deviation {worst:.1e}"


SUITES = {
    "mask-algebra": suite_mask_algebra,
    "sparsity": suite_sparsity,
    "dense-equivalence": suite_dense_equivalence,
    "gradient-check": suite_gradient_check,
    "parameter-count": suite_parameter_count,
    "schedule-endpoints": suite_schedule_endpoints,
}


def run_all(names=None) -> list[tuple[str, bool, str, float]]:
    rows = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name]()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append((name, ok, detail, time.perf_counter() - t0))
    return rows
