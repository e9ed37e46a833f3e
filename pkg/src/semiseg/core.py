"""Shared domain types: pixel grids, samples, pseudo-labels and the run config.

All types are immutable after construction (arrays are frozen with
``writeable=False``) so they can be shared freely across workers.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

PROB_SUM_TOL = 1e-5


class PairingError(ValueError):
    """An image and mask that must share a pixel grid do not."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Image:
    """Float pixel grid of shape (H, W, C), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise ValueError(f"image must be (H, W, C), got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1 or px.shape[2] < 1:
            raise ValueError(f"image dimensions must be positive, got {px.shape}")
        if not np.issubdtype(px.dtype, np.floating):
            px = px.astype(np.float32)
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(
                f"image values must lie in [0, 1], got [{px.min():.4g}, {px.max():.4g}]")
        object.__setattr__(self, "pixels", _freeze(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def hw(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class MaskMap:
    """Integer class-index grid of shape (H, W), values in {0, ..., L-1}."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValueError(f"mask must be (H, W), got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.array_equal(lab, lab.astype(np.int64)):
                raise ValueError("mask values must be integers")
        lab = lab.astype(np.int32)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(
                f"mask values must lie in [0, {self.num_classes - 1}], "
                f"got [{lab.min()}, {lab.max()}]")
        object.__setattr__(self, "labels", _freeze(lab))

    @property
    def hw(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class distribution of shape (H, W, L); rows sum to 1."""

    probs: np.ndarray
    num_classes: int = 0  # 0 means "infer from the last axis"

    def __post_init__(self):
        p = np.asarray(self.probs)
        if p.ndim != 3:
            raise ValueError(f"probability map must be (H, W, L), got shape {p.shape}")
        if not np.issubdtype(p.dtype, np.floating):
            p = p.astype(np.float64)
        num = self.num_classes or p.shape[2]
        if num != p.shape[2]:
            raise ValueError(
                f"num_classes={num} does not match last axis {p.shape[2]}")
        if num < 2:
            raise ValueError(f"need at least 2 classes, got {num}")
        if p.size and p.min() < 0.0:
            raise ValueError(f"probabilities must be nonnegative, min={p.min():.4g}")
        sums = p.sum(axis=2)
        if p.size and np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise ValueError(
                f"per-pixel class sums deviate from 1 by {np.abs(sums - 1.0).max():.3g}")
        object.__setattr__(self, "probs", _freeze(p))
        object.__setattr__(self, "num_classes", num)

    @property
    def hw(self) -> tuple[int, int]:
        return self.probs.shape[0], self.probs.shape[1]


@dataclass(frozen=True)
class LabeledSample:
    image: Image
    mask: MaskMap
    id: str

    def __post_init__(self):
        if self.image.hw != self.mask.hw:
            raise PairingError(
                f"sample {self.id!r}: image {self.image.hw} vs mask {self.mask.hw}")


@dataclass(frozen=True)
class UnlabeledSample:
    image: Image
    id: str


@dataclass(frozen=True)
class PseudoLabel:
    """Hard predicted mask, its mean-max confidence, and the gate verdict."""

    label_mask: MaskMap
    confidence: float
    accepted: bool


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of the training pipeline.

    Defaults follow the reference recipe: confidence threshold 0.90, Adam
    at lr 0.001, early-stopping patience 9, 320x320 inputs, rotations in
    [-20, 20] degrees. ``desk_config`` scales it down for fast CPU runs.
    """

    # data
    num_classes: int = 4
    resize_hw: tuple[int, int] = (320, 320)
    # batch composition
    labeled_per_batch: int = 1
    mu: int = 10
    # pseudo-label gate
    tau: float = 0.90
    # losses
    lambda_u: float = 1.0
    dice_epsilon: float = 1e-6
    boundary_width: int = 1
    boundary_tolerance: int = 3
    include_background: bool = True
    stop_gradient: bool = True
    # optimizer
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # schedule
    max_epochs: int = 200
    patience_epochs: int = 9
    # weak augmentation
    rotation_range_deg: tuple[float, float] = (-20.0, 20.0)
    elastic_alpha: float = 20.0
    elastic_sigma: float = 5.0
    # strong augmentation
    sharpness_range: tuple[float, float] = (0.5, 2.0)
    contrast_range: tuple[float, float] = (0.5, 1.5)
    blur_sigma_range: tuple[float, float] = (0.5, 2.0)
    # reproducibility
    seed: int = 0

    def __post_init__(self):
        for name in ("resize_hw", "rotation_range_deg", "sharpness_range",
                     "contrast_range", "blur_sigma_range"):
            val = getattr(self, name)
            if not isinstance(val, tuple):
                object.__setattr__(self, name, tuple(val))


def desk_config(**overrides) -> TrainConfig:
    """A scaled-down config for CPU-speed experiments (96x96, 3 classes)."""
    base = dict(
        num_classes=3,
        resize_hw=(96, 96),
        elastic_alpha=6.0,
        elastic_sigma=1.5,
        blur_sigma_range=(0.5, 1.5),
        max_epochs=20,
    )
    base.update(overrides)
    return TrainConfig(**base)


def validate_config(cfg: TrainConfig) -> list[str]:
    """Return one human-readable violation per broken invariant.

    An empty list means the config is valid. Violations are data, not
    exceptions: callers (e.g. a sweep over deliberately extreme taus)
    decide what to do with them.
    """
    v: list[str] = []

    def check(ok: bool, msg: str):
        if not ok:
            v.append(msg)

    check(cfg.num_classes >= 2, f"num_classes must be >= 2, got {cfg.num_classes}")
    check(len(cfg.resize_hw) == 2 and all(int(s) > 0 for s in cfg.resize_hw),
          f"resize_hw must be two positive ints, got {cfg.resize_hw}")
    check(cfg.labeled_per_batch >= 1,
          f"labeled_per_batch must be >= 1, got {cfg.labeled_per_batch}")
    check(cfg.mu >= 1, f"mu must be >= 1, got {cfg.mu}")
    check(0.0 <= cfg.tau <= 1.0, f"tau out of [0, 1]: {cfg.tau}")
    check(cfg.lambda_u >= 0.0, f"lambda_u must be >= 0, got {cfg.lambda_u}")
    check(cfg.dice_epsilon > 0.0, f"dice_epsilon must be > 0, got {cfg.dice_epsilon}")
    check(cfg.boundary_width >= 1,
          f"boundary_width must be >= 1, got {cfg.boundary_width}")
    check(cfg.boundary_tolerance >= 1,
          f"boundary_tolerance must be >= 1, got {cfg.boundary_tolerance}")
    check(cfg.learning_rate > 0.0,
          f"learning_rate must be > 0, got {cfg.learning_rate}")
    check(0.0 <= cfg.adam_beta1 < 1.0, f"adam_beta1 out of [0, 1): {cfg.adam_beta1}")
    check(0.0 <= cfg.adam_beta2 < 1.0, f"adam_beta2 out of [0, 1): {cfg.adam_beta2}")
    check(cfg.adam_epsilon > 0.0, f"adam_epsilon must be > 0, got {cfg.adam_epsilon}")
    check(cfg.max_epochs >= 1, f"max_epochs must be >= 1, got {cfg.max_epochs}")
    check(cfg.patience_epochs >= 1,
          f"patience_epochs must be >= 1, got {cfg.patience_epochs}")

    def check_range(name, lo_le_hi=True, nonneg=False):
        r = getattr(cfg, name)
        if len(r) != 2 or not all(np.isfinite(x) for x in r):
            v.append(f"{name} must be a finite (low, high) pair, got {r}")
            return
        if lo_le_hi and r[0] > r[1]:
            v.append(f"{name} low exceeds high: {r}")
        if nonneg and r[0] < 0:
            v.append(f"{name} must be nonnegative: {r}")

    check_range("rotation_range_deg")
    check_range("sharpness_range")
    check_range("contrast_range")
    check_range("blur_sigma_range", nonneg=True)
    check(cfg.elastic_alpha >= 0.0,
          f"elastic_alpha must be >= 0, got {cfg.elastic_alpha}")
    check(cfg.elastic_sigma > 0.0,
          f"elastic_sigma must be > 0, got {cfg.elastic_sigma}")
    return v


# -- config file round trip ----------------------------------------------
#
# The file groups the flat TrainConfig into named sections. Unknown
# sections or keys are an error so that a typo in a sweep file fails
# loudly instead of silently training with a default.

_CONFIG_SECTIONS: dict[str, tuple[str, ...]] = {
    "": ("seed",),
    "data": ("num_classes", "resize_hw"),
    "batch": ("labeled_per_batch", "mu"),
    "pseudolabel": ("tau",),
    "loss": ("lambda_u", "dice_epsilon", "boundary_width", "boundary_tolerance",
             "include_background", "stop_gradient"),
    "optim": ("learning_rate", "adam_beta1", "adam_beta2", "adam_epsilon"),
    "schedule": ("max_epochs", "patience_epochs"),
    "augment.weak": ("rotation_range_deg", "elastic_alpha", "elastic_sigma"),
    "augment.strong": ("sharpness_range", "contrast_range", "blur_sigma_range"),
}

# sections other subsystems may append to the same file
_FOREIGN_SECTIONS = ("model",)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v).__name__} to TOML")


def config_to_toml(cfg: TrainConfig, extra_sections: dict | None = None) -> str:
    """Render the config (plus optional foreign sections) as TOML text."""
    lines: list[str] = []
    for section, keys in _CONFIG_SECTIONS.items():
        if section:
            lines.append(f"\n[{section}]")
        for k in keys:
            lines.append(f"{k} = {_toml_value(getattr(cfg, k))}")
    for name, payload in (extra_sections or {}).items():
        lines.append(f"\n[{name}]")
        for k, v in payload.items():
            if v is not None:
                lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path, extra_sections: dict | None = None) -> None:
    Path(path).write_text(config_to_toml(cfg, extra_sections))


def _flatten_sections(doc: dict, prefix: str = "") -> dict[str, dict]:
    """Split a parsed TOML document into {dotted-section: flat key/value}."""
    out: dict[str, dict] = {prefix: {}}
    for k, v in doc.items():
        if isinstance(v, dict):
            sub = _flatten_sections(v, f"{prefix}.{k}".lstrip("."))
            for name, payload in sub.items():
                if payload:
                    out.setdefault(name, {}).update(payload)
        else:
            out[prefix][k] = v
    return out


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse a config file; returns (TrainConfig, foreign sections).

    Raises ValueError naming any unknown section or key.
    """
    with open(path, "rb") as fh:
        doc = _toml.load(fh)
    sections = _flatten_sections(doc)
    kwargs: dict = {}
    foreign: dict = {}
    known_fields = {f.name: f for f in fields(TrainConfig)}
    for name, payload in sections.items():
        if not payload:
            continue
        if name in _FOREIGN_SECTIONS:
            foreign[name] = payload
            continue
        if name not in _CONFIG_SECTIONS:
            raise ValueError(f"unknown config section [{name}] in {path}")
        allowed = _CONFIG_SECTIONS[name]
        for k, v in payload.items():
            if k not in allowed:
                where = f"[{name}] " if name else ""
                raise ValueError(f"unknown config key {where}{k!r} in {path}")
            fld = known_fields[k]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
    return TrainConfig(**kwargs), foreign


def config_replace(cfg: TrainConfig, **changes) -> TrainConfig:
    """Functional update; rejects unknown field names."""
    return replace(cfg, **changes)
