"""Pseudo-label construction from a predicted class-distribution map.

The hard mask is the per-pixel argmax; the confidence score is the mean
over pixels of the per-pixel maximum probability; the gate accepts the
label when that score reaches the threshold tau (inclusive).
"""

from __future__ import annotations

import numpy as np

from .core import MaskMap, ProbMap, PseudoLabel


def max_confidence_map(probs: ProbMap) -> np.ndarray:
    """Per-pixel maximum class probability, shape (H, W), values in [1/L, 1]."""
    return probs.probs.max(axis=2)


def pseudo_mask(probs: ProbMap) -> MaskMap:
    """Per-pixel argmax class index; ties go to the lowest class index."""
    return MaskMap(probs.probs.argmax(axis=2).astype(np.int32),
                   num_classes=probs.num_classes)


def confidence_score(q: np.ndarray) -> float:
    """Arithmetic mean of a per-pixel confidence grid."""
    return float(np.asarray(q).mean())


def gate(confidence: float, tau: float) -> bool:
    return bool(confidence >= tau)


def make_pseudolabel(probs: ProbMap, tau: float) -> PseudoLabel:
    conf = confidence_score(max_confidence_map(probs))
    return PseudoLabel(
        label_mask=pseudo_mask(probs),
        confidence=conf,
        accepted=gate(conf, tau),
    )
