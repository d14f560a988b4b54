"""Masked diffusion tree search for few-shot offline black-box optimization."""

from mdts.core import (
    Design,
    EpisodeConfig,
    Invalid,
    MaskedDesign,
    OfflineDataset,
    Vocabulary,
    decode,
    encode,
    validate,
)
from mdts.errors import MDTSError

__all__ = [
    "Design",
    "EpisodeConfig",
    "Invalid",
    "MDTSError",
    "MaskedDesign",
    "OfflineDataset",
    "Vocabulary",
    "decode",
    "encode",
    "validate",
]

__version__ = "0.1.0"
