"""Quantitative MRI: FLASH signal model, classical and neural property
estimation, and contrast synthesis on simulated phantoms."""

from .core import (
    PD_MIN,
    AcquisitionParams,
    ContrastStack,
    DomainError,
    MultiechoSession,
    PropertyMap,
    Protocol,
    TissueProperties,
    seeded_rng,
    validate,
)
from .flash import flash_jacobian, flash_signal, flash_signal_batch

__version__ = "0.1.0"

__all__ = [
    "PD_MIN", "AcquisitionParams", "ContrastStack", "DomainError", "MultiechoSession", "PropertyMap",
    "Protocol", "TissueProperties", "seeded_rng", "validate", "flash_jacobian", "flash_signal",
    "flash_signal_batch", "__version__",
]
