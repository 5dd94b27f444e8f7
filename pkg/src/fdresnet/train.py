"""SGD training loop, evaluation, run logs and the filtered-test robustness protocol."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentSpec, LabeledImageSet, augment_and_batch
from .filters import GaussianSpec, PassMode, high_pass, low_pass
from .layers import cross_entropy
from .models import ResNet, save_checkpoint
from .tensor import Tensor, no_grad, precision

__all__ = [
    "NumericalError",
    "TrainConfig",
    "EpochRecord",
    "RunLog",
    "SGD",
    "sgd_step",
    "lr_at",
    "train",
    "evaluate",
    "softmax",
    "make_filtered_test_sets",
    "robustness_report",
]

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: list = field(default_factory=lambda: [12, 17])
    lr_gamma: float = 0.1
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 0
    decay_bn: bool = True

    def __post_init__(self):
        self.lr_milestones = [int(m) for m in self.lr_milestones]
        if self.epochs < 1:
            raise ValueError("TrainConfig.epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("TrainConfig.batch_size must be >= 1")
        if not self.lr0 > 0:
            raise ValueError("TrainConfig.lr0 must be positive")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("TrainConfig.lr_milestones must be strictly increasing")
        if ms and ms[-1] >= self.epochs:
            raise ValueError("TrainConfig.lr_milestones must be < epochs")
        if self.precision not in ("float32", "float64"):
            raise ValueError("TrainConfig.precision must be float32 or float64")

    @classmethod
    def cifar_schedule(cls, **kw) -> "TrainConfig":
        """200 epochs, LR 0.1 dropped 10x at epochs 120 and 170."""
        return cls(epochs=200, lr_milestones=[120, 170], **kw)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for ``epoch``: lr0 * gamma ** (milestones reached)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.lr0 * cfg.lr_gamma**drops


def sgd_step(params, grads, state: dict, lr: float, momentum: float, weight_decay: float,
             decay_mask=None) -> None:
    """Classic momentum SGD with L2 decay folded into the gradient, in place.

    g = grad + wd * p ; v = momentum * v + g ; p -= lr * v
    """
    grads = list(grads)
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; step aborted")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        wd = weight_decay if (decay_mask is None or decay_mask[i]) else 0.0
        d = g + wd * p.data if wd else g
        v = state.get(i)
        v = d.copy() if v is None else momentum * v + d
        state[i] = v
        p.data -= (lr * v).astype(p.data.dtype)


class SGD:
    def __init__(self, params, momentum=0.9, weight_decay=5e-4, decay_bn=True):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict = {}
        self.decay_mask = [
            getattr(p, "decay", True) and (decay_bn or p.ndim > 1) for p in self.params
        ]

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state, lr,
                 self.momentum, self.weight_decay, self.decay_mask)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    lr: float
    wall_time: float


class RunLog:
    """Per-epoch records, optionally flushed to a CSV file after each epoch."""

    HEADER = ["epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr", "wall_time"]

    def __init__(self, path=None):
        self.records: list[EpochRecord] = []
        self.path = Path(path) if path else None
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.HEADER)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([repr(v) if isinstance(v, float) else v
                                         for v in asdict(rec).values()])

    def __len__(self):
        return len(self.records)

    def column(self, key: str) -> list:
        return [getattr(r, key) for r in self.records]

    def deterministic_view(self) -> list[tuple]:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [tuple(v for k, v in asdict(r).items() if k != "wall_time") for r in self.records]

    @classmethod
    def read_csv(cls, path) -> "RunLog":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.records.append(EpochRecord(int(row["epoch"]), *(float(row[k]) for k in cls.HEADER[1:])))
        return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def evaluate(model, data: LabeledImageSet, spec: AugmentSpec | None = None, batch_size: int = 256,
             return_loss: bool = False):
    """Top-1 accuracy and the softmax score of the true class per sample.

    ``model`` is any callable mapping a normalized batch to logits.  Eval mode
    is used and nothing in the model is mutated.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    spec = spec or AugmentSpec(0.0, (0.0,) * data.images.shape[1], (1.0,) * data.images.shape[1])
    if hasattr(model, "eval"):
        model.eval()
    correct, loss_sum, scores = 0, 0.0, []
    with no_grad():
        for x, y in augment_and_batch(data, spec, batch_size, train=False):
            logits = model(Tensor(x, dtype=x.dtype))
            logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
            p = softmax(logits.astype(np.float64))
            correct += int((logits.argmax(axis=1) == y).sum())
            scores.append(p[np.arange(len(y)), y])
            loss_sum += float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).sum())
    acc = correct / len(data)
    per_sample = np.concatenate(scores)
    if return_loss:
        return acc, per_sample, loss_sum / len(data)
    return acc, per_sample


def train(
    model: ResNet,
    train_set: LabeledImageSet,
    test_set: LabeledImageSet | None,
    cfg: TrainConfig,
    augment: AugmentSpec,
    out_dir=None,
    max_steps: int | None = None,
    on_step=None,
) -> RunLog:
    """Train ``model`` in place; returns the RunLog.

    With ``out_dir`` the log is flushed to ``runlog.csv`` each epoch and
    checkpoints land in ``checkpoints/``.  A non-finite loss raises
    :class:`NumericalError`, leaving the last written checkpoint untouched.
    ``on_step(step, loss)`` is called after every optimizer step.
    """
    out_dir = Path(out_dir) if out_dir else None
    ckpt_dir = out_dir / "checkpoints" if out_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out_dir / "runlog.csv" if out_dir else None)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay, cfg.decay_bn)
    step = 0
    t0 = time.perf_counter()
    with precision(cfg.precision):
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            model.train()
            loss_sum, correct, seen = 0.0, 0, 0
            for x, y in augment_and_batch(train_set, augment, cfg.batch_size,
                                          shuffle_seed=cfg.seed * 100003 + epoch, train=True):
                logits = model(Tensor(x))
                loss = cross_entropy(logits, y)
                lv = float(loss.data)
                if not np.isfinite(lv):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
                opt.zero_grad()
                loss.backward()
                opt.step(lr)
                step += 1
                loss_sum += lv * len(y)
                correct += int((logits.data.argmax(axis=1) == y).sum())
                seen += len(y)
                if on_step is not None:
                    on_step(step, lv)
                if max_steps is not None and step >= max_steps:
                    break
            if test_set is not None:
                test_acc, _, test_loss = evaluate(model, test_set, augment, return_loss=True)
            else:
                test_acc, test_loss = float("nan"), float("nan")
            rec = EpochRecord(epoch, loss_sum / seen, correct / seen, test_loss, test_acc, lr,
                              time.perf_counter() - t0)
            runlog.append(rec)
            log.info("epoch %d lr %.4g train_loss %.4f train_acc %.4f test_acc %.4f",
                     epoch, lr, rec.train_loss, rec.train_acc, test_acc)
            if ckpt_dir and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt_dir / f"epoch_{epoch + 1:04d}.ckpt")
            if max_steps is not None and step >= max_steps:
                break
    if ckpt_dir:
        save_checkpoint(model, ckpt_dir / "final.ckpt")
    return runlog


def make_filtered_test_sets(data: LabeledImageSet, kernel_sizes=(3, 5, 7), sigma: float = 1.0):
    """Low- and high-pass filtered copies of a raw ([0,1]) test set.

    Returns a dict keyed ``("low"|"high", kernel_size)``.  High-pass images keep
    their negative values; normalization is applied later, when batching.
    """
    out = {}
    x = Tensor(data.images.astype(np.float64), dtype=np.float64)
    with no_grad():
        for k in kernel_sizes:
            lo = low_pass(x, GaussianSpec(k, sigma, False, PassMode.LOW))
            hi = high_pass(x, GaussianSpec(k, sigma, False, PassMode.HIGH))
            for mode, t in (("low", lo), ("high", hi)):
                out[(mode, k)] = LabeledImageSet(
                    t.data.astype(data.images.dtype), data.labels.copy(), list(data.class_names),
                    data.split,
                )
    return out


def robustness_report(models: dict, data: LabeledImageSet, spec: AugmentSpec,
                      kernel_sizes=(3, 5, 7), sigma: float = 1.0) -> list[dict]:
    """Accuracy of each model on the original and the six filtered test sets."""
    sets = make_filtered_test_sets(data, kernel_sizes, sigma)
    rows = []
    for name, model in models.items():
        base, _ = evaluate(model, data, spec)
        rows.append({"model": name, "filter": "none", "kernel": 0, "accuracy": base, "drop": 0.0})
        for (mode, k), s in sets.items():
            acc, _ = evaluate(model, s, spec)
            rows.append({"model": name, "filter": mode, "kernel": k, "accuracy": acc, "drop": base - acc})
    return rows
