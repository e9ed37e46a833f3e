"""The semi-supervised training loop.

One optimizer step on a mixed batch runs three forwards through a single
shared-parameter model:

  1. weakly augmented labeled pairs -> supervised loss (dice + boundary);
  2. weakly augmented unlabeled images, no gradient -> pseudo-labels and
     the mean-confidence gate;
  3. strong augmentation *of the same weakly augmented images* for the
     accepted subset -> unsupervised loss against the pseudo-label masks,
     normalized by the full mu*B batch size.

Total loss = supervised + lambda_u * unsupervised, optimized with Adam.
Rejected samples are never forwarded through the strong branch, so they
contribute exactly zero to the loss and its gradient.

Every random draw is keyed by (seed, stream, global step, slot), never by
shared generator state. Two consequences: a resumed run replays the exact
step sequence, and a run with the unsupervised term disabled consumes
identical labeled-branch randomness as a supervised-only run.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .augment import apply_strong, apply_weak, sample_geom_params, sample_photo_params
from .core import ProbMap, TrainConfig
from .data import DataPools, MixedBatch, batch_for_step, steps_per_epoch
from .losses import combined_loss_graph, one_hot
from .metrics import MetricsReport, build_report, dice_score
from .model import Model, check_input_size, load_checkpoint, save_checkpoint
from .pseudolabel import make_pseudolabel, pseudo_mask

_STREAM_WEAK_LABELED = 21
_STREAM_WEAK_UNLABELED = 22
_STREAM_STRONG = 23


class TrainingDiverged(RuntimeError):
    """A step produced a non-finite loss; training state is left as-is."""


@dataclass(frozen=True)
class StepReport:
    step: int
    l_s: float
    l_u: float
    l: float
    accepted_fraction: float
    mean_confidence: float


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    l_s: float
    l_u: float
    l: float
    val_loss: float
    val_mean_dice: float
    accepted_fraction: float
    wall_time: float


@dataclass
class TrainResult:
    steps: list[StepReport]
    epochs: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    best_params: dict | None
    stopped_after_epoch: int


class Adam:
    """Adam over the model's parameter dict; state is exportable so a
    checkpoint restores the optimizer exactly."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.value) for k, t in params.items()}
        self.t = 0

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
                   beta2=cfg.adam_beta2, eps=cfg.adam_epsilon)

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value = p.value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def export_state(self) -> dict:
        return {"m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()},
                "t": self.t}

    def load_state(self, state: dict) -> None:
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k]).copy()
            self.v[k] = np.asarray(state["v"][k]).copy()
        self.t = int(state["t"])


class EarlyStopping:
    """Stop after `patience` consecutive epochs without a strictly lower
    validation loss; remembers which epoch was best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.streak = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.streak = 0
            return True
        self.streak += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.streak >= self.patience


# -- one optimizer step -------------------------------------------------------


def _stream_rng(seed: int, stream: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, step, slot])


def _augmented_labeled(batch: MixedBatch, cfg: TrainConfig, seed: int,
                       step: int):
    images, masks = [], []
    for i, s in enumerate(batch.labeled):
        params = sample_geom_params(
            cfg, _stream_rng(seed, _STREAM_WEAK_LABELED, step, i))
        img, msk = apply_weak(s.image, s.mask, params)
        images.append(img)
        masks.append(msk.labels)
    return images, np.stack(masks)


def train_step(model: Model, optimizer: Adam, batch: MixedBatch,
               cfg: TrainConfig, seed: int, step: int,
               mode: str = "fixmatchseg") -> StepReport:
    """Run one mixed-batch update and return its telemetry."""
    images, labels = _augmented_labeled(batch, cfg, seed, step)
    x_l = Tensor(model.stack_images(images))
    probs_l = model.forward(x_l)
    target_l = one_hot(labels, cfg.num_classes).astype(model.dtype)
    l_s_t = combined_loss_graph(probs_l, target_l, cfg).mean()

    l_u_t = None
    accepted_fraction = 0.0
    mean_confidence = 0.0
    if mode == "fixmatchseg" and batch.unlabeled:
        weak_images = []
        for i, u in enumerate(batch.unlabeled):
            params = sample_geom_params(
                cfg, _stream_rng(seed, _STREAM_WEAK_UNLABELED, step, i))
            img, _ = apply_weak(u.image, None, params)
            weak_images.append(img)
        with ad.no_grad():
            weak_probs = model.forward(Tensor(model.stack_images(weak_images))).value
        pseudolabels = [make_pseudolabel(ProbMap(p.transpose(1, 2, 0)), cfg.tau)
                        for p in weak_probs]
        mean_confidence = float(np.mean([pl.confidence for pl in pseudolabels]))
        accepted = [i for i, pl in enumerate(pseudolabels) if pl.accepted]
        accepted_fraction = len(accepted) / len(pseudolabels)
        if accepted and cfg.lambda_u > 0.0:
            strong_images = [
                apply_strong(weak_images[i], sample_photo_params(
                    cfg, _stream_rng(seed, _STREAM_STRONG, step, i)))
                for i in accepted]
            probs_s = model.forward(Tensor(model.stack_images(strong_images)))
            if cfg.stop_gradient:
                target_u = one_hot(
                    np.stack([pseudolabels[i].label_mask.labels for i in accepted]),
                    cfg.num_classes).astype(model.dtype)
            else:
                # ablation: consistency against the soft weak-branch output,
                # with gradient flowing through both branches
                target_u = model.forward(
                    Tensor(model.stack_images([weak_images[i] for i in accepted])))
            l_u_t = combined_loss_graph(probs_s, target_u, cfg).sum() \
                * (1.0 / len(pseudolabels))

    l_s = float(l_s_t.value)
    l_u = float(l_u_t.value) if l_u_t is not None else 0.0
    if l_u_t is not None and cfg.lambda_u > 0.0:
        total_t = l_s_t + cfg.lambda_u * l_u_t
    else:
        total_t = l_s_t
    total = float(total_t.value)
    if not np.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at step {step}: l_s={l_s}, l_u={l_u}")

    model.zero_grad()
    total_t.backward()
    optimizer.step()
    return StepReport(step=step, l_s=l_s, l_u=l_u, l=total,
                      accepted_fraction=accepted_fraction,
                      mean_confidence=mean_confidence)


# -- evaluation ---------------------------------------------------------------


def evaluate(model: Model, samples, cfg: TrainConfig,
             include_background: bool = False) -> MetricsReport:
    """Mean per-class dice of hard predictions plus mean (dice+boundary) loss."""
    samples = list(samples)
    if not samples:
        raise ValueError("evaluation set is empty")
    from .losses import _sample_loss

    probs = model.predict([s.image for s in samples])
    dice = np.zeros((len(samples), cfg.num_classes))
    losses = np.zeros(len(samples))
    for i, (pm, s) in enumerate(zip(probs, samples)):
        hard = pseudo_mask(pm)
        for c in range(cfg.num_classes):
            dice[i, c] = dice_score(hard, s.mask, c)
        losses[i] = _sample_loss(pm, s.mask, cfg)
    return build_report(dice, losses, len(samples), include_background)


# -- history files ------------------------------------------------------------


def append_history(path: Path, record: EpochRecord) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")


def load_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines()
            if line.strip()]


# -- the fit loop -------------------------------------------------------------


def fit(model: Model, pools: DataPools, cfg: TrainConfig,
        mode: str = "fixmatchseg", run_dir=None, resume_from=None,
        log=None) -> TrainResult:
    """Train until validation loss stalls for `patience_epochs` epochs or
    `max_epochs` is reached; keeps the best-validation parameters.

    `run_dir`, when given, receives history.jsonl and checkpoints/
    {last,best}.ckpt; `resume_from` restores a last.ckpt and continues
    the exact uninterrupted schedule.
    """
    if mode not in ("fixmatchseg", "supervised"):
        raise ValueError(f"unknown training mode {mode!r}")
    if not pools.val:
        raise ValueError("fit requires a nonempty validation set")
    check_input_size(model.spec, cfg.resize_hw)

    optimizer = Adam.from_config(model.params, cfg)
    stopper = EarlyStopping(cfg.patience_epochs)
    start_epoch = 0
    global_step = 0
    best_params = None

    ckpt_dir = history_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        history_path = run_dir / "history.jsonl"

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        model.load_param_arrays(ckpt.params)
        optimizer.load_state(ckpt.optimizer_state)
        start_epoch = int(ckpt.counters["epoch"])
        global_step = int(ckpt.counters["global_step"])
        stopper.best = float(ckpt.best.get("val_loss", float("inf")))
        stopper.best_epoch = int(ckpt.best.get("epoch", 0))
        stopper.streak = int(ckpt.counters.get("patience_streak", 0))
        best_path = Path(resume_from).parent / "best.ckpt"
        if best_path.exists():
            best_params = load_checkpoint(best_path).params

    spe = steps_per_epoch(len(pools.labeled), len(pools.unlabeled), cfg, mode)
    steps: list[StepReport] = []
    epochs: list[EpochRecord] = []

    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.monotonic()
        epoch_steps = []
        for _ in range(spe):
            batch = batch_for_step(pools.labeled, pools.unlabeled, cfg,
                                   cfg.seed, global_step, mode)
            report = train_step(model, optimizer, batch, cfg, cfg.seed,
                                global_step, mode)
            epoch_steps.append(report)
            global_step += 1
        steps.extend(epoch_steps)

        val = evaluate(model, pools.val, cfg)
        epoch_no = epoch + 1
        improved = stopper.update(epoch_no, val.mean_loss)
        if improved:
            best_params = {k: v.copy() for k, v in model.param_arrays().items()}
            if ckpt_dir is not None:
                save_checkpoint(ckpt_dir / "best.ckpt", model.spec, best_params,
                                counters={"epoch": epoch_no,
                                          "global_step": global_step},
                                best={"epoch": epoch_no,
                                      "val_loss": val.mean_loss})
        record = EpochRecord(
            epoch=epoch_no,
            l_s=float(np.mean([s.l_s for s in epoch_steps])),
            l_u=float(np.mean([s.l_u for s in epoch_steps])),
            l=float(np.mean([s.l for s in epoch_steps])),
            val_loss=val.mean_loss,
            val_mean_dice=val.mean_dice,
            accepted_fraction=float(np.mean([s.accepted_fraction
                                             for s in epoch_steps])),
            wall_time=time.monotonic() - t0,
        )
        epochs.append(record)
        if log is not None:
            log(f"epoch {epoch_no:3d}  l={record.l:.4f}  "
                f"val_loss={record.val_loss:.4f}  "
                f"val_dice={record.val_mean_dice:.4f}  "
                f"accepted={record.accepted_fraction:.2f}")
        if history_path is not None:
            append_history(history_path, record)
        if ckpt_dir is not None:
            save_checkpoint(
                ckpt_dir / "last.ckpt", model.spec, model.param_arrays(),
                optimizer.export_state(),
                counters={"epoch": epoch_no, "global_step": global_step,
                          "patience_streak": stopper.streak},
                best={"epoch": stopper.best_epoch, "val_loss": stopper.best})
        if stopper.should_stop:
            break

    return TrainResult(
        steps=steps,
        epochs=epochs,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        best_params=best_params,
        stopped_after_epoch=epochs[-1].epoch if epochs else start_epoch,
    )
