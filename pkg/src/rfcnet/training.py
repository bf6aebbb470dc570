"""
Optimisation recipe: SGD with momentum and weight decay, a step learning-rate
schedule, OHEM cross-entropy, and pooled-confusion mIoU for validation.
"""

from __future__ import annotations

import contextlib
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, ce_per_pixel, gather_flat, no_grad, tensor_mean
from .errors import ArgumentError, GraphStateError, TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Recipe:
    resize: tuple
    batch_size: int
    epochs: int
    step_size: int
    converged_epoch: int
    split: tuple


# Per-dataset schedules; base lr is 0.01 for all three.
RECIPES = {
    "kvasir": Recipe(resize=(200, 200), batch_size=4, epochs=160, step_size=45, converged_epoch=77,
                     split=(850, 150)),
    "glas": Recipe(resize=(300, 300), batch_size=2, epochs=500, step_size=60, converged_epoch=259,
                   split=(132, 33)),
    "cvc": Recipe(resize=(200, 300), batch_size=3, epochs=160, step_size=45, converged_epoch=85,
                  split=(521, 91)),
}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    step_size: int = 45
    gamma: float = 0.1
    epochs: int = 160
    batch_size: int = 4
    ohem_threshold: float = 0.7
    # fraction of the pixels in a batch that OHEM always keeps
    ohem_min_kept: float = 1 / 16
    seed: int = 0
    num_classes: int = 2
    single_thread: bool = True

    def __post_init__(self):
        if not 0 < self.ohem_threshold <= 1:
            raise ArgumentError(f"ohem_threshold must lie in (0, 1], got {self.ohem_threshold}")
        if not 0 < self.gamma <= 1:
            raise ArgumentError(f"gamma must lie in (0, 1], got {self.gamma}")
        if min(self.step_size, self.epochs, self.batch_size) < 1:
            raise ArgumentError("step_size, epochs and batch_size must be positive")
        if not 0 < self.ohem_min_kept <= 1:
            raise ArgumentError(f"ohem_min_kept is a fraction in (0, 1], got {self.ohem_min_kept}")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ArgumentError("base_lr and weight_decay must be >= 0 and momentum in [0, 1)")

    @classmethod
    def from_recipe(cls, name: str, **overrides) -> "TrainConfig":
        r = RECIPES[name]
        kw = dict(step_size=r.step_size, epochs=r.epochs, batch_size=r.batch_size)
        kw.update(overrides)
        return cls(**kw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def ohem_select(loss_map: np.ndarray, threshold: float, min_kept: int) -> np.ndarray:
    """Flat indices of the pixels OHEM keeps.

    Hard pixels are those whose true-class probability ``exp(-loss)`` is below
    ``threshold``. If fewer than ``min_kept`` are hard, the ``min_kept``
    largest-loss pixels are kept instead (ties broken by position).
    """
    flat = np.asarray(loss_map, dtype=np.float64).reshape(-1)
    hard = np.flatnonzero(np.exp(-flat) < threshold)
    min_kept = min(int(min_kept), flat.size)
    if hard.size >= min_kept:
        return hard
    order = np.argsort(-flat, kind="stable")[:min_kept]
    return np.sort(order)


def ohem_ce(logits: Tensor, target, threshold: float = 0.7, min_kept: int = 1) -> Tensor:
    """Mean cross-entropy over the hard pixels of a batch."""
    target = np.asarray(target)
    if target.size == 0:
        raise ArgumentError("ohem_ce: empty target")
    if min_kept < 1:
        raise ArgumentError(f"ohem_ce: min_kept must be >= 1, got {min_kept}")
    loss_map = ce_per_pixel(logits, target)
    keep = ohem_select(loss_map.data, threshold, min_kept)
    return tensor_mean(gather_flat(loss_map, keep))


# ---------------------------------------------------------------------------
# optimiser / schedule
# ---------------------------------------------------------------------------


def sgd_step(params: Sequence[Tensor], state: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0005) -> None:
    """``v <- momentum * v + (grad + wd * p)``; ``p <- p - lr * v``; then grads are cleared.

    ``state`` maps ``id(param)`` to its velocity buffer and is updated in place.
    """
    for p in params:
        if p.grad is None:
            raise GraphStateError(f"parameter {p.name or tuple(p.shape)} has no gradient")
    for p in params:
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = state.get(id(p))
        v = d.astype(p.dtype, copy=True) if v is None else momentum * v + d
        state[id(p)] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * state[id(p)]).astype(p.dtype, copy=False)
        p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self) -> None:
        sgd_step(self.params, self.state, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def step_lr(epoch: int, base_lr: float, step_size: int, gamma: float = 0.1) -> float:
    if epoch < 0:
        raise ArgumentError(f"epoch must be >= 0, got {epoch}")
    return base_lr * gamma ** (epoch // step_size)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise ArgumentError(f"pred and target sizes differ: {pred.size} vs {target.size}")
    for arr, what in ((pred, "pred"), (target, "target")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ArgumentError(f"{what} holds class ids outside [0, {num_classes})")
    idx = target.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(iou.mean())


def miou(pred_mask, target_mask, num_classes: int = 2) -> float:
    """Mean IoU over classes; a class absent from both masks scores 1."""
    pred_mask, target_mask = np.asarray(pred_mask), np.asarray(target_mask)
    if pred_mask.shape != target_mask.shape:
        raise ArgumentError(f"mask shapes differ: {pred_mask.shape} vs {target_mask.shape}")
    return miou_from_confusion(confusion_matrix(pred_mask, target_mask, num_classes))


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    mean_loss: float
    val_miou: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    converged_epoch: Optional[int] = None
    best_miou: float = -1.0
    best_state: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "mean_loss", "val_miou"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.lr), repr(r.mean_loss), repr(r.val_miou)])
        return buf.getvalue()


def _single_thread(enabled: bool):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def stack_batch(samples: Sequence, dtype=np.float32) -> tuple:
    images = np.concatenate([s.image.data for s in samples], axis=0).astype(dtype, copy=False)
    masks = np.stack([s.mask for s in samples]).astype(np.int64, copy=False)
    return Tensor(images, dtype=dtype), masks


def predict_masks(model, samples: Sequence, batch_size: int = 8) -> list:
    """Arg-max masks, cropped back to each sample's original size when it was padded."""
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x, _ = stack_batch(chunk, model.dtype)
            pred = model(x).data.argmax(axis=1)
            for s, p in zip(chunk, pred):
                out.append(_crop(p, s))
    return out


def _crop(arr: np.ndarray, sample) -> np.ndarray:
    hw = getattr(sample, "orig_hw", None)
    return arr if hw is None else arr[:hw[0], :hw[1]]


def evaluate(model, dataset: Sequence, num_classes: int = 2, batch_size: int = 8,
             per_image: bool = False) -> float:
    """mIoU over a dataset: pooled confusion matrix, or the mean of per-image scores."""
    if not dataset:
        raise ArgumentError("evaluate: empty dataset")
    preds = predict_masks(model, dataset, batch_size)
    if per_image:
        return float(np.mean([miou(p, _crop(s.mask, s), num_classes) for p, s in zip(preds, dataset)]))
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, s in zip(preds, dataset):
        cm += confusion_matrix(p, _crop(s.mask, s), num_classes)
    return miou_from_confusion(cm)


def train_loop(model, train_set: Sequence, val_set: Sequence, cfg: TrainConfig,
               log: Optional[Callable[[str], None]] = None,
               on_best: Optional[Callable] = None) -> TrainHistory:
    """Shuffled mini-batch OHEM-CE + SGD with per-epoch validation.

    The best-validation parameters are kept in ``history.best_state`` and
    handed to ``on_best(model, record)`` when they improve.
    """
    if not train_set or not val_set:
        raise ArgumentError("train_loop needs non-empty train and validation sets")
    if cfg.batch_size > len(train_set):
        raise ArgumentError(f"batch_size {cfg.batch_size} exceeds training set size {len(train_set)}")
    log = log or logger.info
    params = model.parameters()
    opt = SGD(params, cfg.base_lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()

    with _single_thread(cfg.single_thread):
        for epoch in range(cfg.epochs):
            opt.lr = step_lr(epoch, cfg.base_lr, cfg.step_size, cfg.gamma)
            order = rng.permutation(len(train_set))
            losses = []
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
                x, target = stack_batch(batch, model.dtype)
                min_kept = max(1, int(target.size * cfg.ohem_min_kept))
                loss = ohem_ce(model(x), target, cfg.ohem_threshold, min_kept)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch + 1}, batch {b + 1}")
                opt.zero_grad()
                backward(loss)
                opt.step()
                losses.append(value)
            val = evaluate(model, val_set, cfg.num_classes)
            rec = EpochRecord(epoch + 1, opt.lr, float(np.mean(losses)), val)
            history.records.append(rec)
            log(f"epoch {rec.epoch} lr {rec.lr:.6g} mean_loss {rec.mean_loss:.6f} val_miou {rec.val_miou:.6f}")
            if val > history.best_miou:
                history.best_miou = val
                history.converged_epoch = rec.epoch
                history.best_state = model.state_dict()
                if on_best is not None:
                    on_best(model, rec)
    return history
