"""Masked joint-embedding predictive pretraining for convolutional encoders."""

from .core import ModelState, TrainConfig, init_state, masked_l2_loss, pretrain, train_step
from .encoder import EncoderConfig, SparseEncoder, build_encoder
from .maskgrid import MaskSamplerParams, PatchSpec, derive_grid_shape, sample_multiblock_mask
from .predictor import Predictor, PredictorConfig, build_predictor

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "MaskSamplerParams", "ModelState", "PatchSpec", "Predictor", "PredictorConfig",
    "SparseEncoder", "TrainConfig", "build_encoder", "build_predictor", "derive_grid_shape",
    "init_state", "masked_l2_loss", "pretrain", "sample_multiblock_mask", "train_step",
]
