"""Soft-Dice loss and the training/validation loops.

Hyperparameters default to the pipeline's standard settings: learning
rate 1e-3, weight decay 1e-6, batch size 2 volumes, AdamW (adaptive
moments with decoupled weight decay). The loss averages per-class soft
Dice over foreground classes only; validation computes hard Dice on
argmax masks each epoch and the best-validation parameters are retained.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .network import UNet3D

DICE_EPSILON = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.0e-3
    weight_decay: float = 1.0e-6
    batch_size: int = 2
    epochs: int = 600
    seed: int = 0
    augment_online: bool = False     # random affine per sample
    cosine_decay: bool = False
    checkpoint_every: int = 0        # 0: only best/final

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dice_per_class: dict[int, float]
    dice_combined: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        classes = sorted(self.records[0].dice_per_class) if self.records else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"] + [f"dice_class{c}" for c in classes]
                       + ["dice_combined"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.6f}"]
                           + [f"{r.dice_per_class[c]:.6f}" for c in classes]
                           + [f"{r.dice_combined:.6f}"])


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(N, X, Y, Z) int labels -> (N, C, X, Y, Z) float one-hot."""
    oh = torch.nn.functional.one_hot(labels.long(), num_classes)
    return oh.movedim(-1, 1).to(torch.get_default_dtype())


def soft_dice_loss(pred: torch.Tensor, gt: torch.Tensor,
                   epsilon: float = DICE_EPSILON) -> torch.Tensor:
    """1 - mean over foreground classes of (2 sum(p g) + eps)/(sum p + sum g + eps).

    pred: (N, C, ...) class probabilities; gt: matching one-hot.
    Background (class 0) is excluded from the mean.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    dims = tuple(range(2, pred.ndim))
    inter = (pred * gt).sum(dim=dims)
    sums = pred.sum(dim=dims) + gt.sum(dim=dims)
    dice = (2.0 * inter + epsilon) / (sums + epsilon)
    return 1.0 - dice[:, 1:].mean()


def _check_disjoint(train_ids, valid_ids) -> None:
    overlap = set(train_ids) & set(valid_ids)
    if overlap:
        raise ValueError(f"patient leakage between train and valid: {sorted(overlap)}")


@dataclass(frozen=True)
class Sample:
    """One training example: normalized image and integer labels."""
    patient_id: str
    image: np.ndarray    # (X, Y, Z), already normalized to [0, 1]
    labels: np.ndarray   # (X, Y, Z) ints


def _to_batch(samples: list[Sample], num_classes: int):
    x = torch.from_numpy(np.stack([s.image for s in samples])[:, None]
                         .astype(np.float32))
    y = torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.int64))
    return x, one_hot(y, num_classes)


def validate(model: UNet3D, dataset: list[Sample]) -> tuple[dict[int, float], float]:
    """Hard Dice per foreground class and on the combined foreground.

    Scores are averaged over samples; parameters are not touched.
    """
    if not dataset:
        raise ValueError("empty validation dataset")
    num_classes = model.spec.num_classes
    per_class = {c: [] for c in range(1, num_classes)}
    combined = []
    model.eval()
    with torch.no_grad():
        for s in dataset:
            x = torch.from_numpy(s.image[None, None].astype(np.float32))
            pred = model(x)[0].argmax(dim=0).numpy()
            for c in per_class:
                per_class[c].append(evaluation.dice(pred == c, s.labels == c))
            combined.append(evaluation.dice(pred > 0, s.labels > 0))
    return ({c: float(np.mean(v)) for c, v in per_class.items()},
            float(np.mean(combined)))


def train(model: UNet3D, train_set: list[Sample], valid_set: list[Sample],
          cfg: TrainConfig, checkpoint_dir=None,
          augment_fn=None) -> tuple[UNet3D, TrainHistory]:
    """Train in place; returns (best-validation model, history).

    Refuses to run if a patient appears in both cohorts. Deterministic
    given cfg.seed and a fixed thread count.
    """
    _check_disjoint([s.patient_id for s in train_set],
                    [s.patient_id for s in valid_set])
    if not train_set:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                            weight_decay=cfg.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.epochs)
             if cfg.cosine_decay else None)
    num_classes = model.spec.num_classes
    history = TrainHistory()
    best_dice, best_state = -1.0, copy.deepcopy(model.state_dict())
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            if augment_fn is not None and cfg.augment_online:
                batch = [augment_fn(s, rng) for s in batch]
            x, y = _to_batch(batch, num_classes)
            opt.zero_grad()
            loss = soft_dice_loss(model(x), y)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if sched is not None:
            sched.step()
        per_class, combined = validate(model, valid_set) if valid_set else ({}, 0.0)
        history.records.append(EpochRecord(epoch, float(np.mean(losses)),
                                           per_class, combined))
        if combined > best_dice:
            best_dice, best_epoch = combined, epoch
            best_state = copy.deepcopy(model.state_dict())
        if checkpoint_dir and cfg.checkpoint_every and \
                epoch % cfg.checkpoint_every == 0:
            from .network import save_checkpoint
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:05d}.pt",
                            model, epoch)
    model.load_state_dict(best_state)
    if checkpoint_dir:
        from .network import save_checkpoint
        save_checkpoint(Path(checkpoint_dir) / "best.pt", model, best_epoch)
    return model, history
