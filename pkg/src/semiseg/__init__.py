"""Semi-supervised semantic segmentation with confidence-gated pseudo-labels.

A pure-numpy training framework: a compact U-Net, soft-dice and boundary
losses, paired weak (geometric) / strong (photometric) augmentation, a
mean-confidence pseudo-label gate, and an experiment harness for
labeled-count and threshold sweeps.
"""

from .core import (
    Image,
    LabeledSample,
    MaskMap,
    PairingError,
    ProbMap,
    PseudoLabel,
    TrainConfig,
    UnlabeledSample,
    desk_config,
    load_config,
    save_config,
    validate_config,
)

__all__ = [
    "Image",
    "LabeledSample",
    "MaskMap",
    "PairingError",
    "ProbMap",
    "PseudoLabel",
    "TrainConfig",
    "UnlabeledSample",
    "desk_config",
    "load_config",
    "save_config",
    "validate_config",
]

__version__ = "0.1.0"
