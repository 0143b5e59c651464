"""Swin-encoder U-shaped networks for 3D segmentation with masked-volume pre-training, on numpy."""

from .decoders import DecoderConfig, DecoderOutputs, UNetFormer
from .inference import SlidingWindowConfig, sliding_window_infer
from .losses import LossWeights, deep_supervision_loss, dice_ce_loss, masked_l1
from .metrics import EvalResult, dice_score, evaluate, hausdorff
from .pretrain import MaskedVolumeModel, MaskSpec, generate_mask
from .swin import EncoderConfig, SkipSet, SwinEncoder, TokenGrid
from .tensor import ConfigError, ContractError, NonFiniteError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DecoderConfig",
    "DecoderOutputs",
    "EncoderConfig",
    "EvalResult",
    "LossWeights",
    "MaskSpec",
    "MaskedVolumeModel",
    "NonFiniteError",
    "ShapeError",
    "SkipSet",
    "SlidingWindowConfig",
    "SwinEncoder",
    "Tensor",
    "TokenGrid",
    "UNetFormer",
    "deep_supervision_loss",
    "dice_ce_loss",
    "dice_score",
    "evaluate",
    "generate_mask",
    "hausdorff",
    "masked_l1",
    "no_grad",
    "sliding_window_infer",
]
