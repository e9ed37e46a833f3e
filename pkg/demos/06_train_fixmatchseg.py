"""The full semi-supervised loop on a small corpus, with gate telemetry.

Watch the `accepted` column: early on, the model's mean max-probability on
weakly augmented unlabeled images sits below tau and the unsupervised term
is inert (the run is then step-identical to supervised training). As
confidence crosses tau, pseudo-labels start flowing into the strong branch
and l_u becomes nonzero.

Run:  python3 demos/06_train_fixmatchseg.py
"""

from semiseg.core import desk_config
from semiseg.data import (
    DataPools,
    make_synthetic_corpus,
    select_labeled_subset,
    strip_labels,
)
from semiseg.model import ModelSpec, build_model
from semiseg.trainer import evaluate, fit


def main():
    corpus = make_synthetic_corpus(80, hw=(32, 32), num_classes=3, seed=5,
                                   noise_level=0.06)
    train, val, test = corpus[:60], corpus[60:70], corpus[70:]
    labeled = select_labeled_subset(train, 6, seed=0)
    unlabeled = strip_labels(train)  # every training image, labels dropped

    pools = DataPools(tuple(labeled), tuple(unlabeled), tuple(val), tuple(test))
    cfg = desk_config(resize_hw=(32, 32), mu=5, tau=0.85, lambda_u=1.0,
                      max_epochs=14, elastic_alpha=2.0, elastic_sigma=1.0,
                      boundary_tolerance=2)
    model = build_model(ModelSpec(num_classes=3, depth=2, base_channels=8), seed=0)
    print(f"semi-supervised: {len(labeled)} labeled + {len(unlabeled)} unlabeled, "
          f"mu={cfg.mu}, tau={cfg.tau}")
    result = fit(model, pools, cfg, mode="fixmatchseg", log=print)

    model.load_param_arrays(result.best_params)
    report = evaluate(model, pools.test, cfg)
    opened = next((e.epoch for e in result.epochs if e.accepted_fraction > 0), None)
    print(f"\ngate first opened at epoch {opened}")
    print(f"test mean dice: {report.mean_dice:.4f}")


if __name__ == "__main__":
    main()
