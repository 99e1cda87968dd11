from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ArchConfig, OOVCharacter, Vocab, preset
from .network import (
    MODALITY_MODES,
    AVModel,
    EncodeResult,
    MaskSpec,
    ModalityDropout,
    ModalityMode,
    ShapeMismatch,
    init_params,
    masked_ce_loss,
    masked_ce_with_grad,
    sample_mask,
    sample_modality,
)

__all__ = [
    "ArchConfig",
    "AVModel",
    "CheckpointError",
    "EncodeResult",
    "MaskSpec",
    "MODALITY_MODES",
    "ModalityDropout",
    "ModalityMode",
    "OOVCharacter",
    "ShapeMismatch",
    "Vocab",
    "init_params",
    "load_checkpoint",
    "masked_ce_loss",
    "masked_ce_with_grad",
    "preset",
    "sample_mask",
    "sample_modality",
    "save_checkpoint",
]
