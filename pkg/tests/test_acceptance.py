"""Acceptance criteria 1-12, one test per criterion, each printing a PASS/FAIL
line (collected again in the terminal summary)."""

import copy
import shutil
import time

import numpy as np
import pytest
import torch

from convjepa.checkpoint import load_checkpoint, save_checkpoint
from convjepa.config import RunConfig, validate
from convjepa.core import (init_state, lr_schedule, masked_l2_loss, momentum_schedule, ema_update,
                           train_step, TrainConfig)
from convjepa.encoder import EncoderConfig, build_encoder, encode_context, encode_target
from convjepa.maskgrid import (MaskSamplerParams, PatchSpec, derive_grid_shape, sample_batch_masks,
                               sample_multiblock_mask, upsample_mask)
from convjepa.predictor import Predictor, PredictorConfig, predictor_param_count, standard_conv_param_count
from convjepa.runner import read_metrics, run_pretrain, run_probe
from convjepa.verify import count_params, pipeline_gradient_errors

MICRO = EncoderConfig.from_preset("micro")
SMALL = EncoderConfig.from_preset("small")


def test_c01_mask_algebra(criterion):
    t0 = time.perf_counter()
    grid = derive_grid_shape(PatchSpec(32, 224, 224))
    rng = np.random.default_rng(0)
    composition = True
    for _ in range(50):
        m = torch.from_numpy(rng.random((int(rng.integers(1, 8)), int(rng.integers(1, 8)))) < 0.5)
        for a in (1, 2, 3):
            for b in (1, 2, 4):
                composition &= torch.equal(upsample_mask(upsample_mask(m, a), b), upsample_mask(m, a * b))
    counts = [int(sample_multiblock_mask((7, 7), MaskSamplerParams(), s).sum()) for s in range(10_000)]
    non_degenerate = 0 < min(counts) and max(counts) < 49
    elapsed = time.perf_counter() - t0
    ok = grid == (7, 7) and composition and non_degenerate and elapsed < 10
    criterion(1, ok, f"grid {grid}, composition {composition}, masked cells [{min(counts)}, {max(counts)}] "
                     f"over 10k seeds, {elapsed:.2f}s < 10s")
    assert ok


def test_c02_dense_equivalence(criterion):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    worst = 0.0
    for config, size in ((MICRO, 32), (SMALL, 64)):
        enc = build_encoder(config, seed=0).eval()
        g = size // config.patch_px
        for _ in range(20):
            x = torch.randn(2, 3, size, size, generator=gen)
            with torch.no_grad():
                diff = encode_context(x, torch.zeros(2, g, g, dtype=torch.bool), enc) - encode_target(x, enc)
            worst = max(worst, diff.abs().max().item())
    elapsed = time.perf_counter() - t0
    ok = worst == 0.0 and elapsed < 30
    criterion(2, ok, f"max |context - target| = {worst} (micro + small, 20 inputs each), {elapsed:.2f}s < 30s")
    assert ok


def test_c03_content_invariance(criterion):
    t0 = time.perf_counter()
    gen = torch.Generator().manual_seed(1)
    rng = np.random.default_rng(1)
    enc = build_encoder(MICRO, seed=1)
    worst = 0.0
    for case in range(50):
        # alternate batch-statistics and running-statistics BN
        enc.set_bn_mode("batch" if case % 2 == 0 else "eval")
        x = torch.randn(2, 3, 32, 32, generator=gen)
        masks = sample_batch_masks(2, (8, 8), None, rng)
        hidden = upsample_mask(masks, 4).unsqueeze(1).expand_as(x)
        y = torch.where(hidden, 50 * torch.randn(x.shape, generator=gen), x)
        with torch.no_grad():
            worst = max(worst, (encode_context(x, masks, enc) - encode_context(y, masks, enc)).abs().max().item())
    elapsed = time.perf_counter() - t0
    ok = worst == 0.0 and elapsed < 30
    criterion(3, ok, f"max output change {worst} over 50 (image, mask) pairs, {elapsed:.2f}s < 30s")
    assert ok


def test_c04_sparsity(criterion):
    gen = torch.Generator().manual_seed(2)
    rng = np.random.default_rng(2)
    enc = build_encoder(MICRO, seed=2).train()
    nonzero = 0
    stages = 0
    for _ in range(50):
        x = torch.randn(2, 3, 32, 32, generator=gen)
        masks = sample_batch_masks(2, (8, 8), None, rng)
        with torch.no_grad():
            outs = enc.forward_stages(x, masks)
        for out in outs:
            hidden = upsample_mask(masks, out.shape[-1] // 8).unsqueeze(1).expand_as(out)
            nonzero += int(torch.count_nonzero(out[hidden]))
            stages += 1
    ok = nonzero == 0
    criterion(4, ok, f"{nonzero} non-zero masked activations across {stages} stage outputs (50 cases)")
    assert ok


def test_c05_gradient_oracle(criterion):
    t0 = time.perf_counter()
    errors = pipeline_gradient_errors(seed=0, step=1e-5)
    elapsed = time.perf_counter() - t0
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    ok = worst < 1e-5 and elapsed < 300 and len(errors) == 31
    criterion(5, ok, f"{len(errors)} learnable tensors, max rel err {worst:.2e} ({name}), {elapsed:.1f}s < 300s")
    assert ok


def test_c06_loss_masking(criterion):
    state = init_state(MICRO, seed=0)
    x = torch.randn(4, 3, 32, 32)
    masks = sample_batch_masks(4, (8, 8), None, np.random.default_rng(0))
    with torch.no_grad():
        target = state.target(x)
        pred = state.predictor(state.context(x, masks)).detach()
    pred.requires_grad_(True)
    masked_l2_loss(pred, target, masks).backward()
    visible = (~masks).unsqueeze(1).expand_as(pred)
    grad_nonzero = int(torch.count_nonzero(pred.grad[visible]))
    base = masked_l2_loss(pred.detach(), target, masks).item()
    identical = True
    gen = torch.Generator().manual_seed(0)
    for _ in range(20):
        noise = torch.where(visible, 1e3 * torch.randn(pred.shape, generator=gen), 0.0)
        identical &= masked_l2_loss(pred.detach() + noise, target, masks).item() == base
    ok = grad_nonzero == 0 and identical
    criterion(6, ok, f"{grad_nonzero} non-zero grads at unmasked positions, loss bit-identical under 20 perturbations: {identical}")
    assert ok


def test_c07_parameter_counts(criterion):
    sep = predictor_param_count(2048, 3, 3)
    std = standard_conv_param_count(2048, 3, 3)
    sep_enum = count_params(Predictor(PredictorConfig(2048, 3, 3)))
    std_enum = count_params(torch.nn.Sequential(*[
        torch.nn.Sequential(torch.nn.Conv2d(2048, 2048, 3, padding=1), torch.nn.BatchNorm2d(2048))
        for _ in range(3)]))
    encoder = count_params(build_encoder(EncoderConfig.from_preset("resnet50")))
    with_head = encoder + 2048 * 1000 + 1000
    ok = (sep == sep_enum == 12_662_784 and std == std_enum == 113_264_640
          and abs(with_head - 25.6e6) < 0.1e6 and sep < encoder < std)
    criterion(7, ok, f"separable {sep:,} (enum {sep_enum:,}), standard {std:,} (enum {std_enum:,}); "
                     f"resnet50 backbone {encoder:,}, with 1000-way head {with_head:,}")
    assert ok


def test_c08_schedule_endpoints(criterion):
    warm, total = 10 * 38, 30 * 38
    devs = {
        "m(0)": abs(momentum_schedule(0, total) - 0.996),
        "m(T)": abs(momentum_schedule(total, total) - 1.0),
        "lr(0)": abs(lr_schedule(0, warm, total, 0.01)),
        "lr(warm)": abs(lr_schedule(warm, warm, total, 0.01) - 0.01),
        "lr(T)": abs(lr_schedule(total, warm, total, 0.01)),
    }
    ok = max(devs.values()) <= 1e-12
    criterion(8, ok, "deviations " + ", ".join(f"{k}={v:.1e}" for k, v in devs.items()) + " (tol 1e-12)")
    assert ok


def test_c09_ema_laws(criterion):
    ctx = build_encoder(MICRO, seed=1).double()
    tgt = build_encoder(MICRO, seed=2).double()
    with torch.no_grad():
        for b in list(ctx.buffers()) + list(tgt.buffers()):
            if b.is_floating_point():
                b.uniform_(0.5, 1.5)
    t1 = copy.deepcopy(tgt)
    ema_update(t1, ctx, 1.0)
    fixed = all(torch.equal(a, b) for a, b in zip(t1.state_dict().values(), tgt.state_dict().values()))
    t0 = copy.deepcopy(tgt)
    ema_update(t0, ctx, 0.0)
    copied = all(torch.equal(a, b) for a, b in zip(t0.state_dict().values(), ctx.state_dict().values()))

    def dist(t):
        return torch.cat([(a - b).flatten() for a, b in zip(t.state_dict().values(), ctx.state_dict().values())
                          if a.is_floating_point()]).norm().item()

    m = 0.95
    worst = 0.0
    d_prev = dist(tgt)
    for _ in range(100):
        ema_update(tgt, ctx, m)
        d = dist(tgt)
        worst = max(worst, abs(d / d_prev - m))
        d_prev = d
    ok = fixed and copied and worst < 1e-9
    criterion(9, ok, f"m=1 fixes target: {fixed}, m=0 copies context: {copied}, "
                     f"per-step contraction |ratio - {m}| <= {worst:.1e} over 100 steps")
    assert ok


# -- training criteria --------------------------------------------------------

def acceptance_config(out_dir) -> RunConfig:
    """Desk-scale run: synthetic 4 x 200 at 32 px, micro preset, 30 epochs."""
    return validate(RunConfig(preset="micro", epochs=30, batch_size=16, deterministic=True,
                              dataset="synthetic", synthetic_classes=4, synthetic_per_class=200,
                              image_size=32, seed=0, out_dir=str(out_dir), checkpoint_keep=30))


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "run_a"
    t0 = time.perf_counter()
    cfg = acceptance_config(out)
    run_pretrain(cfg)
    t_pre = time.perf_counter() - t0
    linear = run_probe(cfg, out / "final.cjep", "linear", baseline=True)
    knn = run_probe(cfg, out / "final.cjep", "knn", baseline=True)
    return {"dir": out, "cfg": cfg, "linear": linear, "knn": knn, "pretrain_s": t_pre,
            "total_s": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def run_b(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept") / "run_b"
    run_pretrain(acceptance_config(out))
    return out


def test_c10_desk_scale_training(run_a, criterion):
    rows = read_metrics(run_a["dir"] / "metrics.csv")
    initial = rows[0]["loss"]
    last_epoch = max(r["epoch"] for r in rows)
    final = float(np.mean([r["loss"] for r in rows if r["epoch"] == last_epoch]))
    lin, lin_base = run_a["linear"]["linear"].top1, run_a["linear"]["linear_baseline"].top1
    knn, knn_base = run_a["knn"]["knn"].top1, run_a["knn"]["knn_baseline"].top1
    chance = 0.25
    a = final < 0.5 * initial
    b = lin > chance and lin >= lin_base + 0.05
    c = knn >= chance + 0.05
    fast = run_a["total_s"] < 30 * 60
    ok = a and b and c and fast
    criterion(10, ok, f"(a) loss {initial:.4f} -> {final:.4f} (ratio {final / initial:.3f} < 0.5) {a}; "
                      f"(b) linear {lin:.3f} vs baseline {lin_base:.3f} (need >= +0.05) {b}; "
                      f"(c) kNN {knn:.3f} (baseline {knn_base:.3f}, need >= 0.30) {c}; "
                      f"{run_a['total_s']:.0f}s < 1800s")
    assert ok


def test_c11_determinism(run_a, run_b, criterion):
    files = ["metrics.csv", "final.cjep", "best.cjep"] + [f"epoch_{e:04d}.cjep" for e in range(1, 31)]
    same = [(run_a["dir"] / f).read_bytes() == (run_b / f).read_bytes() for f in files]
    ok = all(same)
    criterion(11, ok, f"{sum(same)}/{len(files)} files byte-identical (metrics.csv and every checkpoint)")
    assert ok


def test_c12_checkpoint_round_trip_and_resume(run_a, tmp_path, criterion):
    cfg = run_a["cfg"]
    # save -> load -> save
    src = run_a["dir"] / "epoch_0015.cjep"
    state = init_state(MICRO, seed=123)
    load_checkpoint(src, state)
    resaved = save_checkpoint(state, tmp_path / "resaved.cjep")
    round_trip = resaved.read_bytes() == src.read_bytes()
    # resume from the mid-run checkpoint in a fresh run directory
    resume_dir = tmp_path / "resumed"
    resume_dir.mkdir()
    shutil.copy(src, resume_dir / "start.cjep")
    resumed_cfg = copy.copy(cfg)
    resumed_cfg.out_dir = str(resume_dir)
    run_pretrain(resumed_cfg, resume=resume_dir / "start.cjep")
    full = read_metrics(run_a["dir"] / "metrics.csv")
    tail = read_metrics(resume_dir / "metrics.csv")
    start = state.step
    metrics_match = tail == [r for r in full if r["step"] >= start] and len(tail) > 0
    final_match = (resume_dir / "final.cjep").read_bytes() == (run_a["dir"] / "final.cjep").read_bytes()
    ok = round_trip and metrics_match and final_match
    criterion(12, ok, f"save/load/save identical {round_trip}; resumed at step {start}: "
                      f"{len(tail)} metric rows identical {metrics_match}, final checkpoint identical {final_match}")
    assert ok
