"""Datasets: directory ingestion, deterministic splits, the synthetic
shape corpus, and mixed labeled/unlabeled batch composition.

Directory layout (one dataset root):

    root/
      images/     paired image files
      masks/      same-stem single-channel index masks (labeled data)
      unlabeled/  image files without masks (optional)

Batches hold exactly B labeled and mu*B unlabeled samples. Both pools are
cycled through per-pass permutations derived from (seed, stream, pass), so
any position in the stream can be recomputed without replaying it; that is
what makes checkpoint resume exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core import Image, LabeledSample, MaskMap, TrainConfig, UnlabeledSample

_STREAM_SPLIT = 101
_STREAM_LABELED = 11
_STREAM_UNLABELED = 12
_STREAM_SUBSET = 707
_STREAM_HOLDOUT = 17


@dataclass(frozen=True)
class DataPools:
    """The four pools a training run consumes."""

    labeled: tuple[LabeledSample, ...]
    unlabeled: tuple[UnlabeledSample, ...]
    val: tuple[LabeledSample, ...]
    test: tuple[LabeledSample, ...]


@dataclass(frozen=True)
class MixedBatch:
    """B labeled plus mu*B unlabeled samples: the unit of one optimizer step."""

    labeled: tuple[LabeledSample, ...]
    unlabeled: tuple[UnlabeledSample, ...]


@dataclass(frozen=True)
class DatasetSpec:
    root: str
    num_classes: int
    channels: int = 1
    images_subdir: str = "images"
    masks_subdir: str = "masks"
    unlabeled_subdir: str = "unlabeled"
    file_pattern: str = "*.png"
    split_fractions: tuple[float, float, float] | None = None
    split_counts: tuple[int, int, int] | None = None
    split_manifests: dict | None = None  # {"train"/"val"/"test": id-list file}


# ingestion conventions for the four public medical benchmarks; data
# acquisition itself is manual (see README)
DATASET_PRESETS = {
    "camus": dict(num_classes=4, channels=1, split_counts=(1000, 400, 400)),
    "isic2017": dict(num_classes=2, channels=3, split_counts=(2000, 150, 600)),
    "refuge": dict(num_classes=3, channels=3, split_counts=(400, 400, 400)),
    "scr": dict(num_classes=4, channels=1, split_fractions=(0.6, 0.2, 0.2)),
}


def dataset_spec_for(preset: str, root: str) -> DatasetSpec:
    if preset not in DATASET_PRESETS:
        raise ValueError(f"unknown dataset preset {preset!r}; "
                         f"choose from {sorted(DATASET_PRESETS)}")
    return DatasetSpec(root=root, **DATASET_PRESETS[preset])


# -- file I/O ---------------------------------------------------------------


def _load_image_file(path: Path, channels: int, resize_hw) -> Image:
    with PILImage.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        if (im.height, im.width) != tuple(resize_hw):
            im = im.resize((resize_hw[1], resize_hw[0]), PILImage.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Image(arr)


def _load_mask_file(path: Path, num_classes: int, resize_hw) -> MaskMap:
    with PILImage.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16", "1"):
            raise ValueError(
                f"mask {path} has mode {im.mode}; expected a single-channel "
                f"index image")
        if (im.height, im.width) != tuple(resize_hw):
            im = im.resize((resize_hw[1], resize_hw[0]), PILImage.NEAREST)
        arr = np.asarray(im).astype(np.int32)
    if arr.ndim != 2:
        raise ValueError(f"mask {path} is not single-channel")
    if arr.size and arr.max() >= num_classes:
        raise ValueError(
            f"mask {path} holds value {arr.max()} >= num_classes {num_classes}")
    return MaskMap(arr, num_classes)


def split_ids(ids: list[str], spec: DatasetSpec, seed: int
              ) -> tuple[list[str], list[str], list[str]]:
    """Deterministic, disjoint train/val/test id partition."""
    if spec.split_manifests is not None:
        parts = []
        for key in ("train", "val", "test"):
            manifest = Path(spec.split_manifests[key])
            listed = [ln.strip() for ln in manifest.read_text().splitlines()
                      if ln.strip()]
            missing = set(listed) - set(ids)
            if missing:
                raise ValueError(f"{key} manifest names unknown ids: "
                                 f"{sorted(missing)[:5]}")
            parts.append(listed)
        return tuple(parts)

    order = list(np.array(ids)[np.random.default_rng(
        [seed, _STREAM_SPLIT]).permutation(len(ids))])
    if spec.split_counts is not None:
        n_train, n_val, n_test = spec.split_counts
    else:
        fr = spec.split_fractions or (0.7, 0.15, 0.15)
        n_train = int(round(fr[0] * len(ids)))
        n_val = int(round(fr[1] * len(ids)))
        n_test = len(ids) - n_train - n_val
    if n_train + n_val + n_test > len(ids):
        raise ValueError(
            f"split sizes {(n_train, n_val, n_test)} exceed pool of {len(ids)}")
    train = order[:n_train]
    val = order[n_train:n_train + n_val]
    test = order[n_train + n_val:n_train + n_val + n_test]
    return train, val, test


def load_dataset(spec: DatasetSpec, cfg: TrainConfig) -> DataPools:
    """Read a dataset directory into resized, [0, 1]-normalized pools."""
    root = Path(spec.root)
    images_dir = root / spec.images_subdir
    masks_dir = root / spec.masks_subdir
    if not images_dir.is_dir():
        raise ValueError(f"missing images directory {images_dir}")
    image_paths = {p.stem: p for p in sorted(images_dir.glob(spec.file_pattern))}
    if not image_paths:
        raise ValueError(f"no files matching {spec.file_pattern} in {images_dir}")
    mask_paths = {p.stem: p for p in sorted(masks_dir.glob("*"))} \
        if masks_dir.is_dir() else {}
    missing = sorted(set(image_paths) - set(mask_paths))
    if missing:
        raise ValueError(
            f"missing mask for labeled image(s): {missing[:5]}"
            + (" ..." if len(missing) > 5 else ""))

    def labeled_sample(stem: str) -> LabeledSample:
        return LabeledSample(
            image=_load_image_file(image_paths[stem], spec.channels, cfg.resize_hw),
            mask=_load_mask_file(mask_paths[stem], spec.num_classes, cfg.resize_hw),
            id=stem)

    train_ids, val_ids, test_ids = split_ids(sorted(image_paths), spec, cfg.seed)
    labeled = tuple(labeled_sample(s) for s in train_ids)
    val = tuple(labeled_sample(s) for s in val_ids)
    test = tuple(labeled_sample(s) for s in test_ids)

    unlabeled_dir = root / spec.unlabeled_subdir
    unlabeled = tuple(
        UnlabeledSample(
            image=_load_image_file(p, spec.channels, cfg.resize_hw), id=p.stem)
        for p in sorted(unlabeled_dir.glob(spec.file_pattern))
    ) if unlabeled_dir.is_dir() else ()
    return DataPools(labeled, unlabeled, val, test)


def write_split_manifests(out_dir, train_ids, val_ids, test_ids) -> dict:
    """Write the three line-oriented id lists; returns a mapping usable as
    DatasetSpec.split_manifests."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests = {}
    for name, ids in (("train", train_ids), ("val", val_ids), ("test", test_ids)):
        path = out_dir / f"{name}.txt"
        path.write_text("".join(f"{i}\n" for i in ids))
        manifests[name] = str(path)
    return manifests


def strip_labels(labeled) -> list[UnlabeledSample]:
    """Reuse labeled images as unlabeled data by dropping their masks;
    ids get a suffix so the two pools never collide."""
    return [UnlabeledSample(image=s.image, id=f"{s.id}::u") for s in labeled]


# -- synthetic corpus --------------------------------------------------------


def ellipse_mask(hw, center, axes) -> np.ndarray:
    """Pixel-center rasterization of an axis-aligned ellipse."""
    rows, cols = np.meshgrid(np.arange(hw[0]), np.arange(hw[1]), indexing="ij")
    return (((rows - center[0]) / axes[0]) ** 2
            + ((cols - center[1]) / axes[1]) ** 2) <= 1.0


def rectangle_mask(hw, center, half_sides) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(hw[0]), np.arange(hw[1]), indexing="ij")
    return (np.abs(rows - center[0]) <= half_sides[0]) \
        & (np.abs(cols - center[1]) <= half_sides[1])


def _synthetic_sample(rng: np.random.Generator, hw, num_classes,
                      noise_level: float) -> tuple[np.ndarray, np.ndarray]:
    from .augment import gaussian_blur

    h, w = hw
    labels = np.zeros((h, w), dtype=np.int32)
    base = float(rng.uniform(0.05, 0.22))
    if noise_level > 0:
        texture = gaussian_blur(rng.uniform(-1, 1, (h, w, 1)), sigma=h / 16)[:, :, 0]
        texture *= 2.0  # smoothing shrinks amplitude; restore some contrast
        white = rng.normal(0.0, 0.35, size=(h, w))
        img = base + noise_level * (texture + white)
    else:
        img = np.full((h, w), base)

    max_shapes = min(3, num_classes - 1)
    n_shapes = int(rng.integers(1, max_shapes + 1))
    classes = rng.choice(np.arange(1, num_classes), size=n_shapes, replace=False)
    for class_id in classes:
        placed = None
        for _ in range(25):
            cy = rng.uniform(0.2 * h, 0.8 * h)
            cx = rng.uniform(0.2 * w, 0.8 * w)
            ay, ax = rng.uniform(h / 9, h / 4, size=2)
            if rng.uniform() < 0.5:
                cand = ellipse_mask(hw, (cy, cx), (ay, ax))
            else:
                cand = rectangle_mask(hw, (cy, cx), (ay * 0.9, ax * 0.9))
            if not (cand & (labels > 0)).any():
                placed = cand
                break
        if placed is None:
            continue
        labels[placed] = class_id
        if num_classes > 2:
            anchor = 0.55 + 0.4 * (class_id - 1) / (num_classes - 2)
        else:
            anchor = 0.75
        jitter = float(rng.uniform(-0.05, 0.05)) * (1.0 if noise_level > 0 else 0.0)
        shape_vals = anchor + jitter
        if noise_level > 0:
            shape_vals = shape_vals + noise_level * rng.normal(
                0.0, 0.35, size=int(placed.sum()))
        img[placed] = shape_vals
    return np.clip(img, 0.0, 1.0)[:, :, None], labels


def make_synthetic_corpus(n: int, hw=(96, 96), num_classes: int = 3,
                          seed: int = 0, noise_level: float = 0.15
                          ) -> list[LabeledSample]:
    """Generate n images of 1-3 non-overlapping shapes with exact masks.

    Deterministic per (seed, index): regenerating any subset reproduces the
    same samples.
    """
    if num_classes not in (2, 3, 4):
        raise ValueError(f"num_classes must be 2, 3 or 4, got {num_classes}")
    if n < 1:
        raise ValueError("need n >= 1")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        pixels, labels = _synthetic_sample(rng, hw, num_classes, noise_level)
        samples.append(LabeledSample(
            image=Image(pixels.astype(np.float32)),
            mask=MaskMap(labels, num_classes),
            id=f"synth-{i:05d}"))
    return samples


def write_corpus(samples, root, unlabeled_fraction: float = 0.0,
                 seed: int = 0) -> None:
    """Write samples in the dataset directory layout; optionally divert a
    fraction into unlabeled/ (images only, masks dropped)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    n_unlabeled = int(round(unlabeled_fraction * len(samples)))
    unlabeled_ids = set()
    if n_unlabeled:
        (root / "unlabeled").mkdir(parents=True, exist_ok=True)
        order = np.random.default_rng([seed, _STREAM_HOLDOUT]).permutation(
            len(samples))
        unlabeled_ids = {samples[i].id for i in order[:n_unlabeled]}
    for s in samples:
        img = (np.asarray(s.image.pixels)[:, :, 0] * 255).round().astype(np.uint8)
        if s.id in unlabeled_ids:
            PILImage.fromarray(img, mode="L").save(root / "unlabeled" / f"{s.id}.png")
        else:
            PILImage.fromarray(img, mode="L").save(root / "images" / f"{s.id}.png")
            PILImage.fromarray(s.mask.labels.astype(np.uint8), mode="L").save(
                root / "masks" / f"{s.id}.png")


# -- subset selection and batch composition ----------------------------------


def select_labeled_subset(pool, count: int, seed: int) -> list[LabeledSample]:
    """Pick `count` samples at random (seeded), preferring early picks that
    cover classes not yet represented."""
    if count > len(pool):
        raise ValueError(f"asked for {count} labeled samples, pool has {len(pool)}")
    rng = np.random.default_rng([seed, _STREAM_SUBSET])
    order = list(rng.permutation(len(pool)))
    chosen: list[int] = []
    covered: set[int] = set()
    for idx in order:
        new = set(np.unique(pool[idx].mask.labels)) - covered
        if new:
            chosen.append(idx)
            covered.update(new)
        if len(chosen) == count:
            return [pool[i] for i in chosen]
    for idx in order:
        if idx not in chosen:
            chosen.append(idx)
            if len(chosen) == count:
                break
    return [pool[i] for i in chosen]


def steps_per_epoch(n_labeled: int, n_unlabeled: int, cfg: TrainConfig,
                    mode: str = "fixmatchseg") -> int:
    """One epoch visits the whole unlabeled pool (semi-supervised) or the
    whole labeled pool (supervised)."""
    if mode == "supervised":
        return math.ceil(n_labeled / cfg.labeled_per_batch)
    if n_unlabeled == 0:
        raise ValueError("fixmatchseg mode requires a nonempty unlabeled pool "
                         "(mu * labeled_per_batch > 0 unlabeled slots per batch)")
    return math.ceil(n_unlabeled / (cfg.mu * cfg.labeled_per_batch))


def _cycled_indices(pool_size: int, seed: int, stream: int, start: int,
                    count: int) -> list[int]:
    """Positions [start, start+count) of an endless stream of per-pass
    permutations of the pool; computable from any offset."""
    out: list[int] = []
    pos = start
    while len(out) < count:
        pass_idx, offset = divmod(pos, pool_size)
        perm = np.random.default_rng([seed, stream, pass_idx]).permutation(pool_size)
        take = min(count - len(out), pool_size - offset)
        out.extend(int(i) for i in perm[offset:offset + take])
        pos += take
    return out


def batch_for_step(labeled, unlabeled, cfg: TrainConfig, seed: int, step: int,
                   mode: str = "fixmatchseg") -> MixedBatch:
    """The batch consumed at global step `step`; pure function of its inputs."""
    b = cfg.labeled_per_batch
    lab_idx = _cycled_indices(len(labeled), seed, _STREAM_LABELED, step * b, b)
    batch_labeled = tuple(labeled[i] for i in lab_idx)
    if mode == "supervised":
        return MixedBatch(batch_labeled, ())
    ub = cfg.mu * b
    if not unlabeled:
        raise ValueError("fixmatchseg mode requires a nonempty unlabeled pool")
    unl_idx = _cycled_indices(len(unlabeled), seed, _STREAM_UNLABELED,
                              step * ub, ub)
    return MixedBatch(batch_labeled, tuple(unlabeled[i] for i in unl_idx))


def batch_stream(labeled, unlabeled, cfg: TrainConfig, seed: int,
                 start_step: int = 0, mode: str = "fixmatchseg"):
    """Endless iterator of MixedBatch starting at `start_step`."""
    if not labeled:
        raise ValueError("labeled pool must be nonempty")
    step = start_step
    while True:
        yield batch_for_step(labeled, unlabeled, cfg, seed, step, mode)
        step += 1
