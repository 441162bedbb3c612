"""Masked autoencoder with encoder memory slots and a multi-level cross-attention
decoder, trained on normal images only and scored by masked-patch MS-SSIM."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    DecoderConfig,
    EncoderConfig,
    EvalConfig,
    ModelConfig,
    MsSsimParams,
    RunConfig,
    ScoringConfig,
    SyntheticSpec,
    TrainConfig,
)
from .data import LabeledTestSet, NormalImageSet, generate_synthetic, load_folder_dataset
from .evaluation import EvalReport, evaluate, evaluate_scores
from .metrics import grouped_iou, iou, roc_auc
from .model import MemMCMAE, masked_mse_loss
from .patchgrid import MaskPartition, PatchGrid, patchify, sample_mask, unpatchify
from .scoring import AnomalyResult, localization_mask, ms_ssim, score_image, score_images
from .training import train

__version__ = "0.1.0"
