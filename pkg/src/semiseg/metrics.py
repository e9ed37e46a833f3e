"""Hard-prediction dice metric and the per-evaluation report record."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import MaskMap


def dice_score(pred: MaskMap, target: MaskMap, class_id: int) -> float:
    """2|P∩T| / (|P|+|T|) over the binary masks of one class.

    Defined as 1.0 when the class is absent from both masks: not predicting
    an absent structure is correct.
    """
    if pred.hw != target.hw:
        raise ValueError(f"prediction {pred.hw} vs target {target.hw}")
    if class_id >= pred.num_classes or class_id >= target.num_classes:
        raise ValueError(f"class_id {class_id} out of range")
    p = pred.labels == class_id
    t = target.labels == class_id
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


@dataclass(frozen=True)
class MetricsReport:
    """Per-class and mean dice over a sample set, plus the mean loss.

    ``mean_dice`` averages the per-class values; by convention the
    background class is excluded unless ``include_background`` is set,
    mirroring how segmentation benchmarks report DSC.
    """

    per_class_dice: tuple[float, ...]
    mean_dice: float
    mean_loss: float
    num_samples: int
    include_background: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_dice"] = list(self.per_class_dice)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class_dice"] = tuple(d["per_class_dice"])
        return cls(**d)


def build_report(per_sample_dice: np.ndarray, losses, num_samples: int,
                 include_background: bool = False) -> MetricsReport:
    """Aggregate an (N, L) per-sample-per-class dice array into a report."""
    per_class = per_sample_dice.mean(axis=0)
    classes = range(len(per_class)) if include_background \
        else range(1, len(per_class))
    mean_dice = float(np.mean([per_class[c] for c in classes]))
    return MetricsReport(
        per_class_dice=tuple(float(x) for x in per_class),
        mean_dice=mean_dice,
        mean_loss=float(np.mean(losses)),
        num_samples=num_samples,
        include_background=include_background,
    )
