"""Minimal numpy NN stack: layers with hand-written backward passes, the
UNet++ autoencoder, losses, Adam, finite-difference checks and checkpoints."""
from .checkpoint import (CheckpointFormatError, CheckpointMagicError, CheckpointTruncatedError,
                         CheckpointVersionError, load_checkpoint, save_checkpoint)
from .gradcheck import GradCheckReport, grad_check
from .layers import Conv2d, Dense, Module, Param, ShapeError
from .losses import deep_supervision_loss, recon_loss
from .optim import Adam, AdamState, adam_step
from .unetpp import NetConfig, Skips, UNetPP, head_columns, node_list

__all__ = [
    "Adam", "AdamState", "CheckpointFormatError", "CheckpointMagicError", "CheckpointTruncatedError",
    "CheckpointVersionError", "Conv2d", "Dense", "GradCheckReport", "Module", "NetConfig", "Param",
    "ShapeError", "Skips", "UNetPP", "adam_step", "deep_supervision_loss", "grad_check",
    "head_columns", "load_checkpoint", "node_list", "recon_loss", "save_checkpoint",
]
