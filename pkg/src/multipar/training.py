"""Focal loss, oversampling, AdamW with step decay, F1 metrics and the epoch loop."""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import NUM_CLASSES, GroupWindow, stack_features
from .model import ModelConfig, MultiparT
from .tensor import ConfigError, NumericalError, Tensor, clamp_min, log, power

__all__ = [
    "FocalConfig",
    "OptimizerConfig",
    "MetricsReport",
    "TrainResult",
    "focal_loss",
    "cross_entropy",
    "oversample",
    "lr_at",
    "AdamW",
    "compute_metrics",
    "train",
    "evaluate",
    "check_group_split",
    "LeakageError",
    "PROB_FLOOR",
    "clamp_events",
]

log_ = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
# running count of true-class probabilities clamped at PROB_FLOOR
clamp_events = {"count": 0}


class LeakageError(ValueError):
    """A group appears in more than one split."""


@dataclass
class FocalConfig:
    alpha: float = 2.0
    enabled: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"focal alpha must be >= 0, got {self.alpha}")

    @property
    def effective_alpha(self) -> float:
        return self.alpha if self.enabled else 0.0


@dataclass
class OptimizerConfig:
    lr0: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    decay_factor: float = 0.1
    decay_every: int = 5
    epochs: int = 20
    batch_size: int = 64
    oversample: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr0 < 0:
            raise ConfigError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.decay_every < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("decay_every, epochs and batch_size must be positive")


@dataclass
class MetricsReport:
    accuracy: float
    per_class_f1: list[float]
    weighted_f1: float
    macro_f1: float
    confusion: np.ndarray  # rows = true class, columns = predicted class
    present: list[bool]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "per_class_f1": list(self.per_class_f1),
            "confusion": self.confusion.tolist(),
        }


# -- loss -------------------------------------------------------------------


def focal_loss(probs: Tensor, labels, alpha: float = 2.0) -> Tensor:
    """Mean over rows of ``-(1 - p_y)**alpha * log(p_y)``, with p_y the true-class probability."""
    labels = np.asarray(labels, dtype=np.intp)
    n = probs.shape[0]
    if probs.ndim != 2 or labels.shape != (n,):
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} disagree")
    p_true = probs[np.arange(n), labels]
    p_safe, hits = clamp_min(p_true, PROB_FLOOR)
    if hits:
        clamp_events["count"] += hits
        log_.warning("focal_loss: clamped %d true-class probabilities at %g", hits, PROB_FLOOR)
    nll = log(p_safe) * -1.0
    if alpha == 0:
        return nll.mean()
    return (power(1.0 - p_true, alpha) * nll).mean()


def cross_entropy(probs: Tensor, labels) -> Tensor:
    return focal_loss(probs, labels, alpha=0.0)


# -- sampling ---------------------------------------------------------------


def oversample(labels: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Indices resampled so every present class reaches the largest class count, shuffled.

    Each class keeps all its original indices and tops up by sampling with
    replacement from itself.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("oversample: no samples")
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.max()
    parts = []
    for c, cnt in zip(classes, counts):
        idx = np.flatnonzero(labels == c)
        parts.append(idx)
        if cnt < target:
            parts.append(rng.choice(idx, size=target - cnt, replace=True))
    out = np.concatenate(parts)
    return out[rng.permutation(len(out))]


# -- optimiser --------------------------------------------------------------


def lr_at(epoch: int, opt: OptimizerConfig) -> float:
    return opt.lr0 * opt.decay_factor ** (epoch // opt.decay_every)


class AdamW:
    """Adam with decoupled weight decay over a dict of named tensors."""

    def __init__(self, params: dict[str, Tensor], opt: OptimizerConfig):
        self.params = params
        self.opt = opt
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.steps = 0

    def step(self, epoch: int) -> None:
        opt = self.opt
        lr = lr_at(epoch, opt)
        b1, b2 = opt.betas
        self.steps += 1
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                g = np.zeros_like(t.data)
            elif not np.isfinite(g).all():
                raise NumericalError(f"non-finite gradient for parameter {name!r}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if opt.weight_decay:
                t.data *= 1.0 - lr * opt.weight_decay
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


# -- metrics ----------------------------------------------------------------


def compute_metrics(preds, labels, num_classes: int = NUM_CLASSES) -> MetricsReport:
    """Accuracy, per-class / weighted / macro F1 and the confusion matrix.

    Macro F1 averages only classes that occur in ``labels`` or ``preds``;
    a class with zero precision and recall gets F1 = 0.
    """
    preds = np.asarray(preds, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in length")
    if labels.size == 0:
        raise ValueError("compute_metrics: empty input")
    if labels.min() < 0 or labels.max() >= num_classes or preds.min() < 0 or preds.max() >= num_classes:
        raise ValueError(f"class indices must lie in 0..{num_classes - 1}")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    tp = np.diag(conf).astype(float)
    pred_tot = conf.sum(axis=0).astype(float)
    true_tot = conf.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    present = (pred_tot + true_tot) > 0
    return MetricsReport(
        accuracy=float(tp.sum() / labels.size),
        per_class_f1=[float(v) for v in f1],
        weighted_f1=float((f1 * true_tot).sum() / true_tot.sum()),
        macro_f1=float(f1[present].mean()),
        confusion=conf,
        present=[bool(v) for v in present],
    )


# -- loop -------------------------------------------------------------------


def check_group_split(*splits: Sequence[GroupWindow]) -> None:
    seen: dict[str, int] = {}
    for i, split in enumerate(splits):
        for g in {s.group_id for s in split}:
            if g in seen and seen[g] != i:
                raise LeakageError(f"group {g!r} appears in splits {seen[g]} and {i}")
            seen[g] = i


@dataclass
class TrainResult:
    model: MultiparT
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_macro_f1: float = float("nan")


def evaluate(model: MultiparT, samples: Sequence[GroupWindow], batch_size: int = 64) -> MetricsReport:
    x, y = stack_features(samples)
    probs = model.predict_proba(x, batch_size)
    return compute_metrics(probs.argmax(axis=-1).ravel(), y.ravel())


def train(cfg: ModelConfig, opt: OptimizerConfig, focal: FocalConfig,
          train_samples: Sequence[GroupWindow], val_samples: Sequence[GroupWindow],
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch and keep the parameters with the best validation macro-F1.

    Training instances are (window, target person) pairs; oversampling balances
    their labels afresh each epoch.
    """
    check_group_split(train_samples, val_samples)
    x, y = stack_features(train_samples)
    model = MultiparT(cfg)
    named = model.named_tensors()
    adamw = AdamW(named, opt)
    P = cfg.P
    inst_win = np.repeat(np.arange(len(x)), P)
    inst_tgt = np.tile(np.arange(P), len(x))
    inst_lab = y.ravel()
    result = TrainResult(model=model)
    best_state = model.state()
    alpha = focal.effective_alpha
    for epoch in range(opt.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        order = oversample(inst_lab, rng) if opt.oversample else rng.permutation(len(inst_lab))
        drop_rng = rng if cfg.dropout > 0 else None
        loss_sum = 0.0
        for s in range(0, len(order), opt.batch_size):
            batch = order[s:s + opt.batch_size]
            wins, local = np.unique(inst_win[batch], return_inverse=True)
            probs, _ = model.forward_instances(x[wins], local, inst_tgt[batch], drop_rng)
            loss = focal_loss(probs, inst_lab[batch], alpha)
            adamw.zero_grad()
            loss.backward()
            adamw.step(epoch)
            loss_sum += loss.item() * len(batch)
        report = evaluate(model, val_samples, opt.batch_size)
        row = {"epoch": epoch, "split": "val", **report.to_dict(), "lr": lr_at(epoch, opt),
               "train_loss": loss_sum / len(order), "seconds": time.perf_counter() - t0}
        result.history.append(row)
        if on_epoch:
            on_epoch(row)
        if result.best_epoch < 0 or report.macro_f1 > result.best_macro_f1:
            result.best_epoch = epoch
            result.best_macro_f1 = report.macro_f1
            best_state = model.state()
    model.copy_params_from(best_state)
    return result


def configs_to_dict(cfg: ModelConfig, opt: OptimizerConfig, focal: FocalConfig) -> dict:
    o = dataclasses.asdict(opt)
    o["betas"] = list(opt.betas)
    return {"model": cfg.to_dict(), "optimizer": o, "focal": dataclasses.asdict(focal)}
