"""Segmentation training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentFlags, SegSample, augment
from .losses import LossWeights, deep_supervision_loss, onehot, segmentation_loss
from .metrics import mean_foreground_dice
from .optim import AdamW, lr_at
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 1
    warmup_steps: int = 0
    batch_size: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    augment: AugmentFlags = field(default_factory=AugmentFlags)
    weight_decay: float = 1e-5
    val_every: int = 10
    stop_at_dice: float | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.augment, dict):
            self.augment = AugmentFlags(**self.augment)

    def total_steps(self, n_samples: int) -> int:
        return self.epochs * n_samples


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    best_dice: float = -1.0
    best_step: int = -1
    steps_to_threshold: int | None = None
    best_state: dict | None = field(default=None, repr=False)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]


def predict_labels(model, image: np.ndarray) -> np.ndarray:
    with no_grad():
        logits = model.logits(Tensor(image[None]))
    return np.argmax(logits.data[0], axis=0)


def validation_dice(model, dataset: list[SegSample], num_classes: int) -> float:
    return float(np.mean([mean_foreground_dice(predict_labels(model, s.image), s.label, num_classes) for s in dataset]))


def fit(model, dataset: list[SegSample], config: TrainConfig, val_dataset: list[SegSample] | None = None,
        log_path: str | Path | None = None, checkpoint_path: str | Path | None = None) -> TrainLog:
    """Train with the deep-supervision loss, AdamW and warmup+cosine schedule.

    Every ``val_every`` steps (and after the last step) the mean foreground
    Dice on ``val_dataset`` (the training set if none) is measured; the best
    parameters are kept, written to ``checkpoint_path`` if given, and loaded
    back into the model at the end.
    """
    if not dataset:
        raise ValueError("fit needs a non-empty dataset")
    k = model.dec_config.num_classes
    val = val_dataset or dataset
    rng = np.random.default_rng(config.seed)
    opt = AdamW(model.parameters(), config.lr, weight_decay=config.weight_decay)
    total = config.total_steps(len(dataset))
    out = TrainLog()
    sink = open(log_path, "w") if log_path else None
    weights = config.weights if model.dec_config.deep_supervision else LossWeights(0.0, 0.0)
    targets = [onehot(s.label, k) for s in dataset]
    try:
        step = 0
        for _ in range(config.epochs):
            for idx in rng.permutation(len(dataset)):
                sample = dataset[idx]
                target = targets[idx]
                if config.augment.any():
                    sample = augment(sample, rng, config.augment)
                    target = onehot(sample.label, k)
                lr = lr_at(step, config.lr, config.warmup_steps, total)
                opt.zero_grad()
                outputs = model(Tensor(sample.image[None]))
                loss = deep_supervision_loss(outputs, target, weights)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at step {step} (lr={lr:.3g})")
                with no_grad():
                    main = segmentation_loss(outputs.logits_full, target).item()
                loss.backward()
                opt.step(lr)
                rec = {"step": step, "lr": lr, "loss": value, "loss_main": main}
                last = step == total - 1
                if (step + 1) % config.val_every == 0 or last:
                    dice = validation_dice(model, val, k)
                    rec["val_dice"] = dice
                    if dice > out.best_dice:
                        out.best_dice, out.best_step = dice, step
                        out.best_state = model.state_dict()
                        if checkpoint_path:
                            from .io import save_checkpoint

                            save_checkpoint(checkpoint_path, model, step=step)
                    if config.stop_at_dice is not None and dice > config.stop_at_dice and out.steps_to_threshold is None:
                        out.steps_to_threshold = step + 1
                out.records.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                log.debug("step %d lr %.3g loss %.5f", step, lr, value)
                step += 1
                if out.steps_to_threshold is not None:
                    break
            if out.steps_to_threshold is not None:
                break
    finally:
        if sink:
            sink.close()
    if out.best_state is not None:
        model.load_state_dict(out.best_state)
    return out
