"""Command-line surface: synth, train, eval, predict, sweep.

Every run writes under a run directory: a config snapshot, per-epoch
history, checkpoints, and evaluation reports. The library is the real
API; these commands are thin orchestration over it.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .augment import apply_strong, apply_weak, sample_geom_params, sample_photo_params
from .core import (
    Image,
    TrainConfig,
    UnlabeledSample,
    config_replace,
    config_to_toml,
    load_config,
    validate_config,
)
from .data import (
    DataPools,
    DatasetSpec,
    load_dataset,
    make_synthetic_corpus,
    select_labeled_subset,
    strip_labels,
    write_corpus,
)
from .experiments import (
    format_labeled_table,
    format_tau_table,
    predict_export,
    run_sweep,
    sweep_spec_from_file,
)
from .model import ModelSpec, build_model, load_checkpoint, model_spec_from_dict
from .trainer import evaluate, fit


def _load_run_config(args) -> tuple[TrainConfig, dict]:
    if getattr(args, "config", None):
        cfg, foreign = load_config(args.config)
    else:
        cfg, foreign = TrainConfig(), {}
    overrides = {}
    for field, attr in (("mu", "mu"), ("tau", "tau"), ("lambda_u", "lambda_u"),
                        ("seed", "seed"), ("max_epochs", "max_epochs"),
                        ("num_classes", "num_classes")):
        val = getattr(args, attr, None)
        if val is not None:
            overrides[field] = val
    if getattr(args, "resize", None):
        overrides["resize_hw"] = tuple(args.resize)
    if overrides:
        cfg = config_replace(cfg, **overrides)
    return cfg, foreign


def _model_spec(cfg: TrainConfig, foreign: dict, channels: int) -> ModelSpec:
    payload = dict(foreign.get("model", {}))
    payload.setdefault("num_classes", cfg.num_classes)
    payload.setdefault("input_channels", channels)
    return model_spec_from_dict(payload)


def _dataset_spec(args, cfg: TrainConfig) -> DatasetSpec:
    return DatasetSpec(root=args.data, num_classes=cfg.num_classes,
                       channels=args.channels)


def _warn_on_violations(cfg: TrainConfig) -> None:
    for violation in validate_config(cfg):
        print(f"warning: config violation: {violation}", file=sys.stderr)


def _to_uint8(pixels) -> np.ndarray:
    arr = (np.asarray(pixels) * 255).round().astype(np.uint8)
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def _dump_augmented(samples, cfg: TrainConfig, out_dir: Path, count: int) -> None:
    """Debug dumps: (original, weak, strong) triplets for inspection."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples[:count]):
        geom = sample_geom_params(cfg, np.random.default_rng([cfg.seed, 91, i]))
        photo = sample_photo_params(cfg, np.random.default_rng([cfg.seed, 92, i]))
        weak_img, _ = apply_weak(sample.image, None, geom)
        strong_img = apply_strong(weak_img, photo)
        for tag, img in (("original", sample.image), ("weak", weak_img),
                         ("strong", strong_img)):
            PILImage.fromarray(_to_uint8(img.pixels)).save(
                out_dir / f"{sample.id}_{tag}.png")


def _build_pools(args, spec: DatasetSpec, cfg: TrainConfig,
                 mode: str) -> DataPools:
    pools = load_dataset(spec, cfg)
    labeled = pools.labeled
    if getattr(args, "labeled_count", None):
        labeled = tuple(select_labeled_subset(pools.labeled, args.labeled_count,
                                              cfg.seed))
    unlabeled = pools.unlabeled
    if mode == "fixmatchseg" and not unlabeled:
        # no unlabeled/ directory: reuse the training images with labels
        # stripped, the standard trick when everything is annotated
        source = list(pools.labeled)
        cap = getattr(args, "unlabeled_cap", None)
        if cap is not None and cap < len(source):
            order = np.random.default_rng([cfg.seed, 31]).permutation(len(source))
            source = [source[i] for i in order[:cap]]
        unlabeled = tuple(strip_labels(source))
    return DataPools(labeled, unlabeled, pools.val, pools.test)


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    samples = make_synthetic_corpus(args.n, hw=tuple(args.hw),
                                    num_classes=args.num_classes,
                                    seed=args.seed, noise_level=args.noise)
    write_corpus(samples, args.out, unlabeled_fraction=args.unlabeled_fraction,
                 seed=args.seed)
    print(f"wrote {args.n} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg, foreign = _load_run_config(args)
    _warn_on_violations(cfg)
    mode = args.mode
    spec = _dataset_spec(args, cfg)
    pools = _build_pools(args, spec, cfg, mode)
    model_spec = _model_spec(cfg, foreign, args.channels)
    if args.pretrained_encoder:
        model_spec = dataclasses.replace(model_spec,
                                         pretrained_encoder=args.pretrained_encoder)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(config_to_toml(
        cfg, extra_sections={"model": dataclasses.asdict(model_spec)}))
    if args.dump_augmented:
        _dump_augmented(list(pools.labeled), cfg, run_dir / "augmented",
                        args.dump_augmented)

    model = build_model(model_spec, seed=cfg.seed)
    print(f"training mode={mode} labeled={len(pools.labeled)} "
          f"unlabeled={len(pools.unlabeled)} params={model.num_params()}")
    result = fit(model, pools, cfg, mode=mode, run_dir=run_dir,
                 resume_from=args.resume, log=print)

    if result.best_params is not None:
        model.load_param_arrays(result.best_params)
    if pools.test:
        report = evaluate(model, pools.test, cfg)
        (run_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True))
        print(f"test mean dice {report.mean_dice:.4f} "
              f"(best epoch {result.best_epoch})")
    return 0


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    model = build_model(ckpt.model_spec, seed=0)
    model.load_param_arrays(ckpt.params)
    return model


def cmd_eval(args) -> int:
    cfg, _ = _load_run_config(args)
    model = _model_from_checkpoint(args.checkpoint)
    cfg = config_replace(cfg, num_classes=model.spec.num_classes)
    spec = _dataset_spec(args, cfg)
    pools = load_dataset(spec, cfg)
    samples = getattr(pools, {"train": "labeled"}.get(args.split, args.split))
    report = evaluate(model, samples, cfg)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def cmd_predict(args) -> int:
    model = _model_from_checkpoint(args.checkpoint)
    image_dir = Path(args.images)
    paths = sorted(image_dir.glob(args.pattern))
    if not paths:
        print(f"no images matching {args.pattern} in {image_dir}", file=sys.stderr)
        return 1
    size = tuple(args.resize) if args.resize else None
    samples = []
    for p in paths:
        with PILImage.open(p) as im:
            im = im.convert("L" if model.spec.input_channels == 1 else "RGB")
            if size and (im.height, im.width) != size:
                im = im.resize((size[1], size[0]), PILImage.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
        samples.append(UnlabeledSample(image=Image(arr), id=p.stem))
    written = predict_export(model, samples, args.out)
    print(f"wrote {len(written)} masks to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg, foreign = _load_run_config(args)
    _warn_on_violations(cfg)
    sweep = sweep_spec_from_file(args.spec)
    spec = _dataset_spec(args, cfg)
    pools = load_dataset(spec, cfg)
    model_spec = _model_spec(cfg, foreign, args.channels)
    records = run_sweep(sweep, cfg, model_spec, pools, out_dir=args.out,
                        log=print)
    print()
    print(format_labeled_table(records))
    if any(r["model"] == "fixmatchseg" for r in records):
        print()
        print(format_tau_table(records))
    print(f"\nsweep outputs in {args.out}")
    return 0


# -- parser --------------------------------------------------------------------


def _add_config_arg(p):
    p.add_argument("--config", help="TOML run config (see README)")


def _add_data_args(p):
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--channels", type=int, default=1,
                   help="image channels to load (1 grayscale, 3 RGB)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semiseg",
        description="Semi-supervised semantic segmentation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic shape corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--hw", type=int, nargs=2, default=[96, 96])
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--unlabeled-fraction", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train supervised or fixmatchseg")
    _add_config_arg(p)
    _add_data_args(p)
    p.add_argument("--mode", choices=("fixmatchseg", "supervised"),
                   default="fixmatchseg")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--labeled-count", type=int,
                   help="train on a seeded subset of the labeled pool")
    p.add_argument("--unlabeled-cap", type=int,
                   help="cap the stripped-label unlabeled pool")
    p.add_argument("--mu", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--lambda-u", dest="lambda_u", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--resize", type=int, nargs=2)
    p.add_argument("--resume", help="last.ckpt to continue from")
    p.add_argument("--pretrained-encoder", help="checkpoint to seed the encoder")
    p.add_argument("--dump-augmented", type=int, default=0,
                   help="dump N (original, weak, strong) triplets")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_arg(p)
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export predicted masks for a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--pattern", default="*.png")
    p.add_argument("--resize", type=int, nargs=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="run a labeled-count/mu/tau sweep")
    _add_config_arg(p)
    _add_data_args(p)
    p.add_argument("--spec", required=True, help="TOML sweep spec")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
