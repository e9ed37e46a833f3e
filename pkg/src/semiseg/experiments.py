"""Sweep orchestration over labeled counts, unlabeled ratios and gate
thresholds, plus prediction export.

Every cell of a sweep trains from the same split and seed as its siblings
(the labeled subset for a given (count, seed) is shared by the baseline
and every semi-supervised variant), so differences in the resulting test
dice are attributable to the training mode alone.

When ``target_steps`` is set, each cell's epoch budget is derived from it
(max_epochs = ceil(target_steps / steps_per_epoch)), equalizing optimizer
steps across cells whose epoch lengths differ (e.g. mu=1 vs mu=10).
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .core import TrainConfig, config_replace
from .data import DataPools, select_labeled_subset, steps_per_epoch, strip_labels
from .model import ModelSpec, build_model
from .pseudolabel import pseudo_mask
from .trainer import evaluate, fit

_STREAM_UNLABELED_CAP = 31


@dataclass(frozen=True)
class SweepSpec:
    labeled_counts: tuple[int, ...]
    mu_values: tuple[int, ...] = (10,)
    tau_values: tuple[float, ...] = (0.90,)
    seeds: tuple[int, ...] = (0,)
    include_baseline: bool = True
    unlabeled_cap: int | None = None
    target_steps: int | None = None

    def __post_init__(self):
        for name in ("labeled_counts", "mu_values", "tau_values", "seeds"):
            val = getattr(self, name)
            if not isinstance(val, tuple):
                object.__setattr__(self, name, tuple(val))
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")


def sweep_spec_from_file(path) -> SweepSpec:
    """Parse a [sweep] section; unknown keys are an error."""
    with open(path, "rb") as fh:
        doc = _toml.load(fh)
    payload = doc.get("sweep", doc)
    allowed = {f.name for f in fields(SweepSpec)}
    unknown = set(payload) - allowed
    if unknown:
        raise ValueError(f"unknown sweep keys in {path}: {sorted(unknown)}")
    return SweepSpec(**payload)


def _capped_unlabeled(train_pool, cap: int | None, seed: int):
    """Unlabeled pool for a cell: the (optionally capped) training pool with
    labels stripped; the cap subset is seeded, not positional."""
    pool = list(train_pool)
    if cap is not None and cap < len(pool):
        order = np.random.default_rng([seed, _STREAM_UNLABELED_CAP]).permutation(
            len(pool))
        pool = [pool[i] for i in order[:cap]]
    return tuple(strip_labels(pool))


def _cell_epochs(cfg: TrainConfig, n_labeled: int, n_unlabeled: int,
                 mode: str, target_steps: int | None) -> int:
    if target_steps is None:
        return cfg.max_epochs
    spe = steps_per_epoch(n_labeled, n_unlabeled, cfg, mode)
    return max(1, math.ceil(target_steps / spe))


def run_cell(mode: str, cell_pools: DataPools, cfg: TrainConfig,
             model_spec: ModelSpec, target_steps: int | None = None,
             log=None) -> dict:
    """Train one sweep cell and evaluate its best checkpoint on the test set."""
    epochs = _cell_epochs(cfg, len(cell_pools.labeled), len(cell_pools.unlabeled),
                          mode, target_steps)
    cell_cfg = config_replace(cfg, max_epochs=epochs)
    model = build_model(model_spec, seed=cfg.seed)
    result = fit(model, cell_pools, cell_cfg, mode=mode, log=log)
    if result.best_params is not None:
        model.load_param_arrays(result.best_params)
    report = evaluate(model, cell_pools.test, cfg)
    return {
        "test_mean_dice": report.mean_dice,
        "test_per_class_dice": list(report.per_class_dice),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": result.stopped_after_epoch,
        "steps_run": len(result.steps),
    }


def run_sweep(sweep: SweepSpec, base_cfg: TrainConfig, model_spec: ModelSpec,
              pools: DataPools, out_dir=None, log=None) -> list[dict]:
    """Train baseline and semi-supervised cells; failures are recorded per
    cell without aborting the sweep."""
    records: list[dict] = []

    def run(mode, cell_pools, cfg, header):
        try:
            payload = run_cell(mode, cell_pools, cfg, model_spec,
                               sweep.target_steps)
            payload["error"] = None
        except Exception as exc:  # keep sweeping; the cell records its failure
            payload = {"test_mean_dice": None, "error": f"{type(exc).__name__}: {exc}"}
        record = {**header, **payload}
        records.append(record)
        if log is not None:
            dice = record.get("test_mean_dice")
            shown = f"{dice:.4f}" if dice is not None else record["error"]
            log(f"  {header['model']:<12} labeled={header['labeled']:<4} "
                f"mu={header['mu']} tau={header['tau']} seed={header['seed']}: "
                f"{shown}")

    for seed in sweep.seeds:
        cfg = config_replace(base_cfg, seed=seed)
        for count in sweep.labeled_counts:
            subset = tuple(select_labeled_subset(pools.labeled, count, seed))
            unlabeled = _capped_unlabeled(pools.labeled, sweep.unlabeled_cap, seed)
            cell_pools = DataPools(subset, unlabeled, pools.val, pools.test)
            if sweep.include_baseline:
                run("supervised", cell_pools, cfg,
                    {"model": "supervised", "labeled": count, "mu": None,
                     "tau": None, "seed": seed})
            for mu in sweep.mu_values:
                for tau in sweep.tau_values:
                    run("fixmatchseg", cell_pools,
                        config_replace(cfg, mu=mu, tau=tau),
                        {"model": "fixmatchseg", "labeled": count, "mu": mu,
                         "tau": tau, "seed": seed})

    if out_dir is not None:
        write_sweep_outputs(records, out_dir)
    return records


# -- reporting ----------------------------------------------------------------


def _mean_dice(records) -> float | None:
    vals = [r["test_mean_dice"] for r in records if r["test_mean_dice"] is not None]
    return float(np.mean(vals)) if vals else None


def _fmt(val) -> str:
    return f"{val:.4f}" if val is not None else "-"


def format_labeled_table(records) -> str:
    """Mean test dice (over seeds) per model variant and labeled count."""
    counts = sorted({r["labeled"] for r in records})
    variants: list[tuple] = []
    for r in records:
        key = (r["model"], r["mu"])
        if key not in variants:
            variants.append(key)
    header = "model/labeled examples".ljust(28) + "".join(
        f"{c:>10}" for c in counts)
    lines = [header, "-" * len(header)]
    for model, mu in variants:
        name = model if mu is None else f"{model} (mu={mu})"
        row = name.ljust(28)
        for c in counts:
            cell = [r for r in records
                    if (r["model"], r["mu"], r["labeled"]) == (model, mu, c)]
            row += f"{_fmt(_mean_dice(cell)):>10}"
        lines.append(row)
    return "\n".join(lines)


def format_tau_table(records) -> str:
    """Mean test dice per labeled count and gate threshold (semi-supervised)."""
    semi = [r for r in records if r["model"] == "fixmatchseg"]
    taus = sorted({r["tau"] for r in semi})
    counts = sorted({r["labeled"] for r in semi})
    header = "labeled examples/tau".ljust(24) + "".join(
        f"{t:>10.2f}" for t in taus)
    lines = [header, "-" * len(header)]
    for c in counts:
        row = str(c).ljust(24)
        for t in taus:
            cell = [r for r in semi if r["labeled"] == c and r["tau"] == t]
            row += f"{_fmt(_mean_dice(cell)):>10}"
        lines.append(row)
    return "\n".join(lines)


def write_sweep_outputs(records, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "records.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    (out_dir / "table_labeled.txt").write_text(format_labeled_table(records) + "\n")
    if any(r["model"] == "fixmatchseg" for r in records):
        (out_dir / "table_tau.txt").write_text(format_tau_table(records) + "\n")


def load_sweep_records(out_dir) -> list[dict]:
    path = Path(out_dir) / "records.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines()
            if line.strip()]


# -- prediction export ---------------------------------------------------------


def predict_export(model, samples, out_dir) -> list[Path]:
    """Write one single-channel index-mask PNG per sample (same stem)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    probs = model.predict([s.image for s in samples])
    for pm, sample in zip(probs, samples):
        mask = pseudo_mask(pm).labels.astype(np.uint8)
        path = out_dir / f"{sample.id}.png"
        PILImage.fromarray(mask, mode="L").save(path)
        paths.append(path)
    return paths
