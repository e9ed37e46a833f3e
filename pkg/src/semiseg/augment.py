"""Weak geometric and strong photometric augmentation.

The weak transform is a random rotation followed by an elastic distortion;
image and mask are warped with the *same* coordinate map (bilinear for the
image, nearest for the mask) so the label geometry stays paired. The
strong transform perturbs sharpness, contrast and blur of an already
weakly-augmented image; it never moves a pixel, so the weak-branch label
remains valid for the strong branch.

All sampling is a pure function of (config, rng state): pass either a seed
or a ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Image, MaskMap, PairingError, TrainConfig


def _rng(state) -> np.random.Generator:
    if isinstance(state, np.random.Generator):
        return state
    return np.random.default_rng(state)


@dataclass(frozen=True)
class GeomParams:
    """One draw of the weak transform: rotation angle plus a per-pixel
    displacement field of shape (H, W, 2) in (row, col) order."""

    rotation_deg: float
    displacement: np.ndarray

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0.0 and not self.displacement.any()


@dataclass(frozen=True)
class PhotoParams:
    """One draw of the strong transform."""

    sharpness_factor: float
    contrast_factor: float
    blur_sigma: float

    @property
    def is_identity(self) -> bool:
        return (self.sharpness_factor == 1.0 and self.contrast_factor == 1.0
                and self.blur_sigma == 0.0)


def identity_geom_params(hw: tuple[int, int]) -> GeomParams:
    return GeomParams(0.0, np.zeros((hw[0], hw[1], 2)))


# -- parameter sampling ----------------------------------------------------


def sample_geom_params(cfg: TrainConfig, rng_state) -> GeomParams:
    """Draw rotation uniformly from the configured range and build an
    elastic displacement field (Gaussian-smoothed uniform noise, scaled by
    ``elastic_alpha``, smoothness ``elastic_sigma``)."""
    rng = _rng(rng_state)
    lo, hi = cfg.rotation_range_deg
    rotation = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    h, w = cfg.resize_hw
    if cfg.elastic_alpha == 0.0:
        disp = np.zeros((h, w, 2))
    else:
        raw = rng.uniform(-1.0, 1.0, size=(h, w, 2))
        disp = np.empty_like(raw)
        for k in range(2):
            disp[:, :, k] = gaussian_blur(raw[:, :, k:k + 1],
                                          cfg.elastic_sigma)[:, :, 0]
        disp *= cfg.elastic_alpha
    return GeomParams(rotation, disp)


def sample_photo_params(cfg: TrainConfig, rng_state) -> PhotoParams:
    rng = _rng(rng_state)

    def draw(pair):
        lo, hi = pair
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    return PhotoParams(
        sharpness_factor=draw(cfg.sharpness_range),
        contrast_factor=draw(cfg.contrast_range),
        blur_sigma=draw(cfg.blur_sigma_range),
    )


# -- geometric warp ----------------------------------------------------------


def source_coords(params: GeomParams) -> np.ndarray:
    """Inverse coordinate map of the weak transform, shape (H, W, 2).

    For each output pixel, the (row, col) location in the input to sample:
    rotation about the image center composed with the elastic displacement,
    resolved in a single resampling step.
    """
    h, w = params.displacement.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    # elastic displacement is applied in output space, then the rotation
    # is inverted about the center
    rr = rows + params.displacement[:, :, 0] - cy
    cc = cols + params.displacement[:, :, 1] - cx
    theta = np.deg2rad(params.rotation_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src = np.empty((h, w, 2))
    src[:, :, 0] = cy + cos_t * rr - sin_t * cc
    src[:, :, 1] = cx + sin_t * rr + cos_t * cc
    return src


def remap_bilinear(arr: np.ndarray, src: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample (H, W, C) values at fractional source coordinates."""
    h, w = arr.shape[:2]
    sy, sx = src[:, :, 0], src[:, :, 1]
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    wy = (sy - y0)[:, :, None]
    wx = (sx - x0)[:, :, None]

    def corner(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = arr[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(valid[:, :, None], vals, fill)

    out = ((1 - wy) * (1 - wx) * corner(y0, x0)
           + (1 - wy) * wx * corner(y0, x0 + 1)
           + wy * (1 - wx) * corner(y0 + 1, x0)
           + wy * wx * corner(y0 + 1, x0 + 1))
    return out


def remap_nearest(arr: np.ndarray, src: np.ndarray, fill=0) -> np.ndarray:
    """Sample (H, W) or (H, W, C) values at the nearest source pixel."""
    h, w = arr.shape[:2]
    yn = np.floor(src[:, :, 0] + 0.5).astype(np.int64)
    xn = np.floor(src[:, :, 1] + 0.5).astype(np.int64)
    valid = (yn >= 0) & (yn < h) & (xn >= 0) & (xn < w)
    vals = arr[np.clip(yn, 0, h - 1), np.clip(xn, 0, w - 1)]
    if arr.ndim == 3:
        valid = valid[:, :, None]
    return np.where(valid, vals, fill)


def apply_weak(image: Image, mask: MaskMap | None,
               params: GeomParams) -> tuple[Image, MaskMap | None]:
    """Warp image (bilinear) and optional mask (nearest) with one map.

    Out-of-bounds pixels are filled with 0 (background). An identity
    transform returns the inputs untouched.
    """
    if params.displacement.shape[:2] != image.hw:
        raise PairingError(
            f"displacement field {params.displacement.shape[:2]} does not "
            f"match image {image.hw}")
    if mask is not None and mask.hw != image.hw:
        raise PairingError(f"image {image.hw} vs mask {mask.hw}")
    if params.is_identity:
        return image, mask
    src = source_coords(params)
    warped = np.clip(remap_bilinear(np.asarray(image.pixels, dtype=np.float64),
                                    src, fill=0.0), 0.0, 1.0)
    out_img = Image(warped.astype(image.pixels.dtype))
    out_mask = None
    if mask is not None:
        labels = remap_nearest(mask.labels, src, fill=0)
        out_mask = MaskMap(labels, num_classes=mask.num_classes)
    return out_img, out_mask


# -- photometric ops ---------------------------------------------------------


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Sampled Gaussian taps at integer offsets within radius ceil(3*sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _conv1d_reflect(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(kernel) - 1) // 2
    if arr.shape[axis] <= radius:
        raise ValueError(
            f"blur radius {radius} too large for axis of size {arr.shape[axis]}")
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="reflect")
    out = np.zeros_like(arr, dtype=np.float64)
    for i, tap in enumerate(kernel):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(i, i + arr.shape[axis])
        out += tap * padded[tuple(sl)]
    return out


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an (H, W, C) array, reflect padding."""
    if sigma <= 0.0:
        return np.asarray(arr, dtype=np.float64)
    k = gaussian_kernel1d(sigma)
    out = _conv1d_reflect(np.asarray(arr, dtype=np.float64), k, axis=0)
    return _conv1d_reflect(out, k, axis=1)


_SMOOTH3 = np.array([1.0, 2.0, 1.0]) / 4.0  # binomial, separable 3x3


def _local_smooth(arr: np.ndarray) -> np.ndarray:
    out = _conv1d_reflect(arr, _SMOOTH3, axis=0)
    return _conv1d_reflect(out, _SMOOTH3, axis=1)


def adjust_sharpness(arr: np.ndarray, factor: float) -> np.ndarray:
    """Blend between a 3x3-smoothed copy (factor 0) and an over-sharpened
    extrapolation (factor > 1); factor 1 is the identity."""
    smooth = _local_smooth(arr)
    return smooth + factor * (arr - smooth)

def adjust_contrast(arr: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from the per-channel mean; constants are fixed points."""
    mean = arr.mean(axis=(0, 1), keepdims=True)
    return mean + factor * (arr - mean)


def apply_strong(image: Image, params: PhotoParams) -> Image:
    """Sharpness, then contrast, then Gaussian blur; output clipped to [0, 1].

    Purely photometric: Pixel (i, j) of the output is computed from a fixed
    neighborhood of pixel (i, j) of the input, so object geometry (and thus
    any mask paired with the input) is untouched.
    """
    if params.is_identity:
        return image
    out = np.asarray(image.pixels, dtype=np.float64)
    if params.sharpness_factor != 1.0:
        out = adjust_sharpness(out, params.sharpness_factor)
    if params.contrast_factor != 1.0:
        out = adjust_contrast(out, params.contrast_factor)
    if params.blur_sigma > 0.0:
        out = gaussian_blur(out, params.blur_sigma)
    return Image(np.clip(out, 0.0, 1.0).astype(image.pixels.dtype))
