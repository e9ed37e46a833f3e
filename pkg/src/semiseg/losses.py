"""Segmentation losses: soft dice, differentiable boundary-F1, and the
supervised / gated-unsupervised batch losses built from them.

Graph functions (``*_graph``) operate on autodiff tensors shaped
(N, L, H, W) and return a per-sample loss vector, so the training step can
backpropagate through them. The plain-float wrappers take domain types and
are what evaluation code and oracle tests call.

Conventions chosen here:
  * dice is averaged over all L classes (background included) by default;
    the epsilon in numerator and denominator makes empty classes score 1.
  * the boundary map of a class is relu(maxpool(1-x) - (1-x)) with kernel
    2*width+1; the tolerance-theta match uses a maxpool dilation with
    kernel 2*theta+1; per class, BF1 = 2PR/(P+R+eps).
  * classes whose target boundary is empty are excluded from the boundary
    average (a prediction cannot be scored against a missing boundary);
    if no class has a target boundary the boundary loss is 0.
  * rejected pseudo-labels are skipped outright, so they contribute
    exactly zero to the unsupervised loss and to its gradient.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import MaskMap, ProbMap, PseudoLabel, TrainConfig

BOUNDARY_EPS = 1e-6


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) int labels -> (N, L, H, W) float64 one-hot planes."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float64)
    n_idx = np.arange(labels.shape[0])[:, None, None]
    h_idx = np.arange(labels.shape[1])[None, :, None]
    w_idx = np.arange(labels.shape[2])[None, None, :]
    out[n_idx, labels, h_idx, w_idx] = 1.0
    return out


def _class_weights(num_classes: int, include_background: bool) -> np.ndarray:
    w = np.ones(num_classes)
    if not include_background:
        w[0] = 0.0
    return w


# -- graph losses ------------------------------------------------------------


def dice_loss_graph(pred: Tensor, target, epsilon: float,
                    include_background: bool = True) -> Tensor:
    """Per-sample soft dice loss, shape (N,).

    pred: (N, L, H, W) probabilities; target: same shape, one-hot (or soft).
    Per class: (2 * sum(pred*target) + eps) / (sum(pred) + sum(target) + eps),
    averaged over classes, subtracted from 1.
    """
    target = ad.as_tensor(target)
    inter = (pred * target).sum(axis=(2, 3))
    num = 2.0 * inter + epsilon
    den = pred.sum(axis=(2, 3)) + target.sum(axis=(2, 3)) + epsilon
    dice = num / den  # (N, L)
    w = _class_weights(pred.shape[1], include_background)
    mean = (dice * w).sum(axis=1) / w.sum()
    return 1.0 - mean


def boundary_map_graph(x: Tensor, width: int) -> Tensor:
    """Soft inner-boundary map per class plane: pixels of a region that have
    a complement pixel within Chebyshev distance `width`."""
    inv = 1.0 - x
    return ad.relu(ad.maxpool2d_same(inv, width) - inv)


def boundary_loss_graph(pred: Tensor, target, width: int, theta: int,
                        include_background: bool = True) -> Tensor:
    """Per-sample boundary loss 1 - mean-class BF1, shape (N,)."""
    target = ad.as_tensor(target)
    pb = boundary_map_graph(pred, width)
    tb = boundary_map_graph(target, width)
    ext_tb = ad.maxpool2d_same(tb, theta)
    ext_pb = ad.maxpool2d_same(pb, theta)
    precision = (pb * ext_tb).sum(axis=(2, 3)) / (pb.sum(axis=(2, 3)) + BOUNDARY_EPS)
    recall = (tb * ext_pb).sum(axis=(2, 3)) / (tb.sum(axis=(2, 3)) + BOUNDARY_EPS)
    bf1 = (2.0 * precision * recall) / (precision + recall + BOUNDARY_EPS)  # (N, L)
    # a class with no target boundary cannot be scored; mask it out of the mean
    tb_mass = tb.value.sum(axis=(2, 3))
    included = (tb_mass > 0).astype(pred.value.dtype)
    included *= _class_weights(pred.shape[1], include_background)
    counts = included.sum(axis=1)
    has_any = counts > 0
    safe_counts = np.where(has_any, counts, 1.0)
    mean_bf1 = (bf1 * included).sum(axis=1) / safe_counts
    return (1.0 - mean_bf1) * has_any.astype(pred.value.dtype)


def combined_loss_graph(pred: Tensor, target, cfg: TrainConfig) -> Tensor:
    """Per-sample DL + BL vector, shape (N,)."""
    return (dice_loss_graph(pred, target, cfg.dice_epsilon, cfg.include_background)
            + boundary_loss_graph(pred, target, cfg.boundary_width,
                                  cfg.boundary_tolerance, cfg.include_background))


# -- plain-float API over domain types ---------------------------------------


def _check_pair(pred: ProbMap, target: MaskMap) -> None:
    if pred.hw != target.hw:
        raise ValueError(f"prediction {pred.hw} vs target {target.hw}")
    if pred.num_classes != target.num_classes:
        raise ValueError(
            f"prediction has {pred.num_classes} classes, target {target.num_classes}")


def _as_batch(pred: ProbMap, target: MaskMap) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred.probs, dtype=np.float64).transpose(2, 0, 1)[None]
    t = one_hot(target.labels[None], target.num_classes)
    return p, t


def soft_dice_loss(pred: ProbMap, target: MaskMap, epsilon: float = 1e-6,
                   include_background: bool = True) -> float:
    """Soft dice loss between a probability map and a class-index mask."""
    _check_pair(pred, target)
    p, t = _as_batch(pred, target)
    with ad.no_grad():
        out = dice_loss_graph(Tensor(p), t, epsilon, include_background)
    return float(out.value[0])


def boundary_loss(pred: ProbMap, target: MaskMap, boundary_width: int = 1,
                  theta: int = 3, include_background: bool = True) -> float:
    """Boundary loss between a probability map and a class-index mask."""
    if boundary_width < 1 or theta < 1:
        raise ValueError("boundary_width and theta must be >= 1")
    _check_pair(pred, target)
    p, t = _as_batch(pred, target)
    with ad.no_grad():
        out = boundary_loss_graph(Tensor(p), t, boundary_width, theta,
                                  include_background)
    return float(out.value[0])


def _sample_loss(pred: ProbMap, target: MaskMap, cfg: TrainConfig) -> float:
    return (soft_dice_loss(pred, target, cfg.dice_epsilon, cfg.include_background)
            + boundary_loss(pred, target, cfg.boundary_width,
                            cfg.boundary_tolerance, cfg.include_background))


def supervised_loss(batch_preds: list[ProbMap], batch_targets: list[MaskMap],
                    cfg: TrainConfig) -> float:
    """Mean over the labeled batch of (dice + boundary) loss."""
    if not batch_preds:
        raise ValueError("supervised loss needs a nonempty batch")
    if len(batch_preds) != len(batch_targets):
        raise ValueError(
            f"batch length mismatch: {len(batch_preds)} predictions, "
            f"{len(batch_targets)} targets")
    total = 0.0
    for pred, target in zip(batch_preds, batch_targets):
        total += _sample_loss(pred, target, cfg)
    return total / len(batch_preds)


def unsupervised_loss(strong_preds: list[ProbMap],
                      pseudolabels: list[PseudoLabel],
                      cfg: TrainConfig) -> float:
    """Gated consistency loss: accepted samples contribute (dice + boundary)
    against their pseudo-label mask; rejected ones contribute exactly 0.
    Normalized by the full batch size mu*B, not the accepted count."""
    if not strong_preds:
        raise ValueError("unsupervised loss needs a nonempty batch")
    if len(strong_preds) != len(pseudolabels):
        raise ValueError(
            f"batch length mismatch: {len(strong_preds)} predictions, "
            f"{len(pseudolabels)} pseudo-labels")
    total = 0.0
    for pred, pl in zip(strong_preds, pseudolabels):
        if pl.accepted:
            total += _sample_loss(pred, pl.label_mask, cfg)
    return total / len(strong_preds)


def total_loss(l_s: float, l_u: float, lambda_u: float) -> float:
    """Total objective: supervised plus weighted unsupervised term."""
    return float(l_s + lambda_u * l_u)
