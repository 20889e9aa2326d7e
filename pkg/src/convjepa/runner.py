"""Run-directory orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

from .checkpoint import SUFFIX, load_checkpoint, save_checkpoint
from .config import RunConfig, write_config
from .core import METRICS_HEADER, ModelState, PretrainResult, TrainConfig, init_state, pretrain
from .data import AugmentConfig, Dataset, load_image_folder, stratified_split, synthetic_dataset
from .encoder import EncoderConfig, build_encoder
from .errors import ConvJepaError, InvalidConfig
from .maskgrid import MaskSamplerParams, PatchSpec, derive_grid_shape
from .predictor import PredictorConfig
from .probes import ProbeReport, config_digest, extract_features, knn_probe, train_linear_probe

logger = logging.getLogger(__name__)

LOCK_FILE = "run.lock"
METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
RESOLVED_FILE = "config.resolved"
BEST_FILE = "best.txt"


class RunLocked(ConvJepaError, RuntimeError):
    pass


@dataclass
class Components:
    encoder: EncoderConfig
    predictor: PredictorConfig
    masking: MaskSamplerParams
    augment: AugmentConfig
    train: TrainConfig
    image_size: int


def components(cfg: RunConfig, dataset: Dataset | None = None) -> Components:
    encoder = EncoderConfig.from_preset(cfg.preset, norm_epsilon=cfg.norm_epsilon)
    size = cfg.resolved_image_size
    grid = derive_grid_shape(PatchSpec(encoder.patch_px, size, size))
    if grid[0] * grid[1] < 2:
        raise InvalidConfig(f"image_size {size} gives a {grid} patch grid; masking needs >= 2 cells")
    mean = cfg.norm_mean or (dataset.mean if dataset is not None else (0.5, 0.5, 0.5))
    std = cfg.norm_std or (dataset.std if dataset is not None else (0.25, 0.25, 0.25))
    return Components(
        encoder=encoder,
        predictor=PredictorConfig(encoder.out_channels, cfg.predictor_blocks, cfg.predictor_kernel),
        masking=MaskSamplerParams(cfg.num_blocks, (cfg.mask_scale_min, cfg.mask_scale_max),
                                  (cfg.mask_aspect_min, cfg.mask_aspect_max), cfg.mask_max_attempts),
        augment=AugmentConfig((size, size), (cfg.crop_scale_min, cfg.crop_scale_max),
                              (cfg.crop_aspect_min, cfg.crop_aspect_max), tuple(mean), tuple(std)),
        train=TrainConfig(
            epochs=cfg.epochs, batch_size=cfg.batch_size, peak_lr=cfg.peak_lr,
            weight_decay=cfg.weight_decay, warmup_epochs=cfg.warmup_epochs,
            ema_start=cfg.ema_start, ema_end=cfg.ema_end, ema_schedule=cfg.ema_schedule,
            adam_beta1=cfg.adam_beta1, adam_beta2=cfg.adam_beta2, adam_eps=cfg.adam_eps,
            seed=cfg.seed, target_bn_mode=cfg.target_bn_mode,
            weight_decay_exclude=cfg.weight_decay_exclude, mask_token_std=cfg.mask_token_std,
            deterministic=cfg.deterministic),
        image_size=size,
    )


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset == "folder":
        return load_image_folder(cfg.data_dir)
    size = cfg.resolved_image_size
    return synthetic_dataset(cfg.synthetic_classes, cfg.synthetic_per_class, (size, size), cfg.synthetic_seed)


def split_dataset(cfg: RunConfig, dataset: Dataset) -> tuple[Dataset, Dataset | None]:
    """Pretraining and probe-training use the first part, probes are scored on the second."""
    train_idx, val_idx = stratified_split(dataset.labels, cfg.val_fraction, cfg.seed)
    return dataset.subset(train_idx), (dataset.subset(val_idx) if val_idx else None)


def new_state(cfg: RunConfig, dataset: Dataset | None = None) -> ModelState:
    comp = components(cfg, dataset)
    return init_state(comp.encoder, comp.predictor, cfg.seed, cfg.mask_token_std)


class RunDir:
    """Exclusive owner of one run directory for the lifetime of a command."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = self.path / LOCK_FILE

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            pid = self._lock.read_text().strip()
            if pid.isdigit() and _alive(int(pid)):
                raise RunLocked(f"{self.path} is in use by process {pid}") from None
            logger.warning("removing stale lock %s", self._lock)
            self._lock.unlink()
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self._lock.unlink(missing_ok=True)
        return False


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _format_row(row: dict) -> list[str]:
    return [str(row["step"]), str(row["epoch"]), repr(float(row["loss"])), repr(float(row["lr"])),
            repr(float(row["ema_momentum"])), repr(float(row["wall_time_s"]))]


def _rewrite_prefix(path: Path, header, keep_below_step: int) -> None:
    """Keep the header and every row whose step is below ``keep_below_step``."""
    rows = []
    if path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            rows = [r for r in reader if r and int(r[0]) < keep_below_step]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"step": int(r["step"]), "epoch": int(r["epoch"]), "loss": float(r["loss"]),
                 "lr": float(r["lr"]), "ema_momentum": float(r["ema_momentum"]),
                 "wall_time_s": float(r["wall_time_s"])} for r in csv.DictReader(fh)]


def checkpoint_name(epoch_count: int) -> str:
    return f"epoch_{epoch_count:04d}{SUFFIX}"


def run_pretrain(cfg: RunConfig, resume: str | Path | None = None) -> PretrainResult:
    """Pretrain into ``cfg.out_dir``.

    Writes ``config.resolved``, ``metrics.csv`` (one row per step),
    ``timing.csv``, a checkpoint after every epoch (the newest
    ``checkpoint_keep`` are kept), ``best.cjep`` for the lowest epoch-mean loss
    and ``final.cjep``. In deterministic mode the ``wall_time_s`` column of
    ``metrics.csv`` is written as 0.0 so reruns are byte-identical; real
    timings always go to ``timing.csv``.
    """
    out = Path(cfg.out_dir)
    with RunDir(out):
        dataset = load_dataset(cfg)
        train_set, _ = split_dataset(cfg, dataset)
        comp = components(cfg, train_set)
        state = init_state(comp.encoder, comp.predictor, cfg.seed, cfg.mask_token_std)
        if resume is not None:
            load_checkpoint(resume, state)
        write_config(cfg, out / RESOLVED_FILE)
        metrics_path, timing_path = out / METRICS_FILE, out / TIMING_FILE
        _rewrite_prefix(metrics_path, METRICS_HEADER, state.step)
        _rewrite_prefix(timing_path, ("step", "wall_time_s"), state.step)
        best_path = out / BEST_FILE
        best = float(best_path.read_text().split()[1]) if (resume and best_path.exists()) else float("inf")
        t0 = time.perf_counter()

        mfh = open(metrics_path, "a", newline="", encoding="utf-8")
        tfh = open(timing_path, "a", newline="", encoding="utf-8")
        mwriter = csv.writer(mfh, lineterminator="\n")
        twriter = csv.writer(tfh, lineterminator="\n")

        def on_step(row):
            wall = time.perf_counter() - t0
            twriter.writerow([row["step"], repr(wall)])
            logged = dict(row, wall_time_s=0.0 if cfg.deterministic else wall)
            mwriter.writerow(_format_row(logged))

        def on_epoch_end(st, epoch, mean_loss):
            nonlocal best
            mfh.flush()
            tfh.flush()
            save_checkpoint(st, out / checkpoint_name(epoch + 1))
            stale = out / checkpoint_name(epoch + 1 - cfg.checkpoint_keep)
            stale.unlink(missing_ok=True)
            if mean_loss < best:
                best = mean_loss
                save_checkpoint(st, out / f"best{SUFFIX}")
                best_path.write_text(f"{epoch + 1} {mean_loss!r}\n", encoding="utf-8")
            logger.info("epoch %d  loss %.5f", epoch + 1, mean_loss)

        try:
            result = pretrain(comp.train, train_set, comp.encoder, comp.predictor, comp.masking,
                              comp.augment, state=state, on_step=on_step, on_epoch_end=on_epoch_end)
        finally:
            mfh.close()
            tfh.close()
        save_checkpoint(result.state, out / f"final{SUFFIX}")
    return result


def _probe_settings(cfg: RunConfig, mode: str) -> dict:
    keys = ("preset", "probe_encoder", "val_fraction", "seed", "dataset", "synthetic_classes",
            "synthetic_per_class", "synthetic_seed", "data_dir")
    keys += ("probe_epochs", "probe_lr", "probe_momentum", "probe_batch_size") if mode == "linear" \
        else ("knn_k", "knn_temperature")
    return {k: getattr(cfg, k) for k in keys}


def probe_encoder(cfg: RunConfig, encoder, train_set: Dataset, val_set: Dataset, mode: str) -> ProbeReport:
    size = cfg.resolved_image_size
    ft = extract_features(encoder, train_set, (size, size))
    fv = extract_features(encoder, val_set, (size, size))
    digest = config_digest(_probe_settings(cfg, mode))
    if mode == "linear":
        return train_linear_probe(ft, fv, cfg.probe_epochs, cfg.probe_lr, cfg.probe_momentum,
                                  cfg.probe_batch_size, cfg.seed, digest)
    if mode == "knn":
        return knn_probe(ft, fv, cfg.knn_k, cfg.knn_temperature, digest)
    raise ValueError(f"unknown probe mode {mode!r}")


def run_probe(cfg: RunConfig, checkpoint=None, mode: str = "linear",
              baseline: bool = False) -> dict[str, ProbeReport]:
    """Probe the encoder stored in ``checkpoint`` (and, with ``baseline``, a
    freshly initialized encoder built from the same seed). Reports are written
    to ``probe_<mode>.json`` / ``probe_<mode>_baseline.json`` in ``cfg.out_dir``."""
    if checkpoint is None and not baseline:
        raise InvalidConfig("probe needs --checkpoint, --baseline, or both")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(cfg)
    train_set, val_set = split_dataset(cfg, dataset)
    if val_set is None:
        raise InvalidConfig("val_fraction = 0 leaves no held-out split to probe on")
    reports = {}
    if checkpoint is not None:
        state = new_state(cfg, train_set)
        load_checkpoint(checkpoint, state)
        encoder = state.target if cfg.probe_encoder == "target" else state.context
        reports[mode] = probe_encoder(cfg, encoder, train_set, val_set, mode)
    if baseline:
        comp = components(cfg, train_set)
        reports[f"{mode}_baseline"] = probe_encoder(cfg, build_encoder(comp.encoder, cfg.seed),
                                                    train_set, val_set, mode)
    for name, report in reports.items():
        (out / f"probe_{name}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return reports


def read_report(path) -> ProbeReport:
    return ProbeReport(**json.loads(Path(path).read_text(encoding="utf-8")))
