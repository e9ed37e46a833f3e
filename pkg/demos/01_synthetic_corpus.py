"""Generate a small synthetic shape corpus and render a contact sheet.

Each sample is a textured background with 1-3 non-overlapping ellipses or
rectangles, one foreground class per shape, plus the exact analytic mask.
The corpus stands in for a real segmentation dataset in every demo and in
the fast experiment suite: it is generated on the fly, deterministic per
(seed, index), and hard enough that a model trained on 8 labels does not
saturate.

Run:  python3 demos/01_synthetic_corpus.py
"""

import pathlib

import numpy as np
from PIL import Image as PILImage

from semiseg.data import make_synthetic_corpus, write_corpus

OUT = pathlib.Path(__file__).parent / "_out"
OUT.mkdir(exist_ok=True)


def to_u8(arr):
    return (np.asarray(arr) * 255).round().astype(np.uint8)


def main():
    samples = make_synthetic_corpus(8, hw=(96, 96), num_classes=3, seed=7,
                                    noise_level=0.06)
    print(f"generated {len(samples)} samples, 96x96, 3 classes")
    for s in samples[:3]:
        present = sorted(int(c) for c in np.unique(s.mask.labels))
        print(f"  {s.id}: classes present {present}, "
              f"foreground pixels {(s.mask.labels > 0).sum()}")

    # contact sheet: top row images, bottom row masks (scaled to visible gray)
    cell = 96
    sheet = PILImage.new("L", (cell * len(samples), cell * 2))
    for i, s in enumerate(samples):
        sheet.paste(PILImage.fromarray(to_u8(s.image.pixels[:, :, 0])), (i * cell, 0))
        sheet.paste(PILImage.fromarray(to_u8(s.mask.labels / 2.0)), (i * cell, cell))
    path = OUT / "corpus_contact_sheet.png"
    sheet.save(path)
    print(f"contact sheet -> {path}")

    # the same corpus can be written in the on-disk dataset layout
    write_corpus(samples, OUT / "demo_dataset", unlabeled_fraction=0.25, seed=7)
    print(f"dataset layout -> {OUT / 'demo_dataset'} "
          f"(images/, masks/, unlabeled/)")


if __name__ == "__main__":
    main()
