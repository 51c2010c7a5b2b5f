from .batching import IGNORE, SeqBatch, assemble
from .checkpoint import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    LayoutError,
    TruncatedError,
    VersionError,
    load_checkpoint,
    save_checkpoint,
)
from .config import GROUP_VARIANTS, MTP_VARIANTS, VARIANTS, ModelConfig
from .decoder import DecoderModel

__all__ = [
    "IGNORE",
    "BadMagicError",
    "CheckpointError",
    "ChecksumError",
    "DecoderModel",
    "GROUP_VARIANTS",
    "LayoutError",
    "MTP_VARIANTS",
    "ModelConfig",
    "SeqBatch",
    "TruncatedError",
    "VARIANTS",
    "VersionError",
    "assemble",
    "load_checkpoint",
    "save_checkpoint",
]
