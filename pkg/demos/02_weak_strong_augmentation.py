"""Show the two augmentation branches on one sample.

Weak: a random rotation plus elastic distortion, applied with the same
coordinate map to image (bilinear) and mask (nearest), so the pair stays
geometrically consistent.

Strong: sharpness, contrast and Gaussian blur applied on top of the WEAKLY
augmented image. No pixel moves, which is why the weak branch's mask (and
pseudo-label) is still valid for the strong branch.

Run:  python3 demos/02_weak_strong_augmentation.py
"""

import pathlib

import numpy as np
from PIL import Image as PILImage

from semiseg.augment import (
    apply_strong,
    apply_weak,
    sample_geom_params,
    sample_photo_params,
)
from semiseg.core import desk_config
from semiseg.data import make_synthetic_corpus

OUT = pathlib.Path(__file__).parent / "_out"
OUT.mkdir(exist_ok=True)


def to_u8(arr):
    return (np.asarray(arr) * 255).round().astype(np.uint8)


def main():
    cfg = desk_config()
    sample = make_synthetic_corpus(1, hw=(96, 96), num_classes=3, seed=3,
                                   noise_level=0.06)[0]

    panels = [("original", sample.image, sample.mask)]
    for seed in (0, 1):
        geom = sample_geom_params(cfg, seed)
        photo = sample_photo_params(cfg, seed)
        weak_img, weak_mask = apply_weak(sample.image, sample.mask, geom)
        strong_img = apply_strong(weak_img, photo)
        print(f"draw {seed}: rotation {geom.rotation_deg:+.1f} deg, "
              f"sharpness {photo.sharpness_factor:.2f}, "
              f"contrast {photo.contrast_factor:.2f}, "
              f"blur sigma {photo.blur_sigma:.2f}")
        panels.append((f"weak[{seed}]", weak_img, weak_mask))
        panels.append((f"strong[{seed}]", strong_img, weak_mask))

    cell = 96
    sheet = PILImage.new("L", (cell * len(panels), cell * 2))
    for i, (name, img, mask) in enumerate(panels):
        sheet.paste(PILImage.fromarray(to_u8(img.pixels[:, :, 0])), (i * cell, 0))
        sheet.paste(PILImage.fromarray(to_u8(mask.labels / 2.0)), (i * cell, cell))
    path = OUT / "augmentation_panels.png"
    sheet.save(path)
    print(f"panels (top: images, bottom: masks) -> {path}")
    print("note how each strong panel shares its weak panel's mask row:")
    print("strong augmentation is purely photometric.")


if __name__ == "__main__":
    main()
