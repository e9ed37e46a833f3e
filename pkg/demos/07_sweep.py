"""A miniature labeled-count sweep: baseline vs semi-supervised.

Produces the two text tables the full experiment harness emits: mean test
dice per (model variant, labeled count) and per (labeled count, tau). At
this toy scale the numbers are noisy; the point is the machinery, which is
identical to what `semiseg sweep` runs on real datasets.

Run:  python3 demos/07_sweep.py        (about two minutes on a laptop CPU)
"""

from semiseg.core import desk_config
from semiseg.data import DataPools, make_synthetic_corpus
from semiseg.experiments import (
    SweepSpec,
    format_labeled_table,
    format_tau_table,
    run_sweep,
)
from semiseg.model import ModelSpec


def main():
    corpus = make_synthetic_corpus(80, hw=(32, 32), num_classes=3, seed=9,
                                   noise_level=0.06)
    pools = DataPools(tuple(corpus[:60]), (), tuple(corpus[60:70]),
                      tuple(corpus[70:]))
    cfg = desk_config(resize_hw=(32, 32), max_epochs=999, elastic_alpha=2.0,
                      elastic_sigma=1.0, boundary_tolerance=2)
    sweep = SweepSpec(labeled_counts=(6, 12), mu_values=(5,),
                      tau_values=(0.85,), seeds=(0,),
                      unlabeled_cap=40, target_steps=60)
    records = run_sweep(sweep, cfg, ModelSpec(num_classes=3, depth=2,
                                              base_channels=8),
                        pools, log=print)
    print()
    print(format_labeled_table(records))
    print()
    print(format_tau_table(records))


if __name__ == "__main__":
    main()
