"""The pseudo-label gate: mean max-probability against the threshold tau.

A prediction is sharpened by a temperature parameter; as the per-pixel
distributions peak, the mean of the per-pixel maxima (the confidence
score) rises, and the gate flips from rejecting to accepting the
pseudo-label. Only accepted pseudo-labels ever contribute to training.

Run:  python3 demos/04_pseudolabel_gate.py
"""

import numpy as np

from semiseg.core import ProbMap
from semiseg.data import make_synthetic_corpus
from semiseg.pseudolabel import make_pseudolabel


def sharpened(logits, temperature):
    z = logits / temperature
    e = np.exp(z - z.max(axis=2, keepdims=True))
    return ProbMap(e / e.sum(axis=2, keepdims=True))


def main():
    sample = make_synthetic_corpus(1, hw=(48, 48), num_classes=3, seed=11)[0]
    # fake "model logits": the true one-hot plus noise, so argmax is mostly right
    rng = np.random.default_rng(0)
    logits = np.eye(3)[sample.mask.labels] * 2.0 + rng.normal(0, 0.8, (48, 48, 3))

    tau = 0.90
    print(f"gate threshold tau = {tau}")
    print(f"{'temperature':>12} {'confidence':>11} {'accepted':>9}")
    for temperature in (4.0, 2.0, 1.0, 0.5, 0.25, 0.1):
        pl = make_pseudolabel(sharpened(logits, temperature), tau)
        print(f"{temperature:>12.2f} {pl.confidence:>11.4f} {str(pl.accepted):>9}")
    print()
    print("sharper predictions -> higher mean max-probability -> gate opens.")
    print("during training this happens as the model converges; early, diffident")
    print("predictions are kept out of the unsupervised loss entirely.")


if __name__ == "__main__":
    main()
