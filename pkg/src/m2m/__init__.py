"""Multimodal many-to-many prediction with missing-modality handling."""

from .datamodel import (
    ConfounderMatrix,
    ModalitySchema,
    MultimodalDataset,
    Study,
    SyntheticConfig,
    TargetMatrix,
    generate_synthetic,
    load_study,
)
from .errors import ContractError, LeakageDetected, M2MError

__version__ = "0.1.0"

__all__ = [
    "ConfounderMatrix",
    "ContractError",
    "LeakageDetected",
    "M2MError",
    "ModalitySchema",
    "MultimodalDataset",
    "Study",
    "SyntheticConfig",
    "TargetMatrix",
    "generate_synthetic",
    "load_study",
]
