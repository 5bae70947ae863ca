"""Weighted BCE loss, the training loop and checkpoint hooks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Sample, batches, negative_positive_ratio
from .model import Model, build, load_state, named_state
from .optim import AdamState, adam_step
from .tensor import Tensor, clamp, log

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class LossConfig:
    omega_p: Union[float, str] = "auto"
    epsilon_clamp: float = 1e-7

    def resolve(self, samples: Sequence[Sample]) -> float:
        if self.omega_p == "auto":
            return negative_positive_ratio(samples)
        w = float(self.omega_p)
        if not w > 0:
            raise ValueError(f"omega_p must be positive, got {self.omega_p}")
        return w


def weighted_bce(pred: Tensor, target, omega_p: float = 1.0, eps: float = 1e-7) -> Tensor:
    """-sum(omega_p * y * log p + (1 - y) * log(1 - p)), p clamped to [eps, 1 - eps].

    Inputs with 3 or more dimensions are read as a batch along axis 0: the sum
    runs over each sample's pixels and the result is averaged over the batch.
    Lower-rank inputs are a single sample.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target)
    if y.shape != pred.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("target must be binary (0/1)")
    if not omega_p > 0:
        raise ValueError("omega_p must be positive")
    y = y.astype(pred.dtype)
    p = clamp(pred, eps, 1.0 - eps)
    per_pixel = log(p) * Tensor(omega_p * y) + log(1.0 - p) * Tensor(1.0 - y)
    total = -per_pixel.sum()
    if pred.ndim >= 3:
        total = total * (1.0 / pred.shape[0])
    return total


@dataclass
class Schedule:
    epochs: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    augment: bool = True
    checkpoint_interval: int = 50
    out_dir: Optional[Path] = None
    loss: LossConfig = field(default_factory=LossConfig)
    threshold: float = 0.5
    tolerance: float = 2


@dataclass
class History:
    rows: list = field(default_factory=list)  # dicts: epoch, train_loss, val_f1
    checkpoints: list = field(default_factory=list)
    omega_p: float = 1.0

    def best_checkpoint(self) -> Optional[int]:
        """Checkpointed epoch with the highest validation F1 (ties: earliest)."""
        scored = [r for r in self.rows if r["epoch"] in self.checkpoints and r["val_f1"] is not None]
        if not scored:
            return None
        return max(scored, key=lambda r: (r["val_f1"], -r["epoch"]))["epoch"]


def train_step(model: Model, images: np.ndarray, masks: np.ndarray, omega_p: float, opt: AdamState,
               eps: float = 1e-7) -> float:
    model.zero_grad()
    x = Tensor(images.astype(model.init_dtype, copy=False))
    probs = model(x)
    loss = weighted_bce(probs[:, 1], masks, omega_p, eps)
    loss.backward()
    adam_step(model.named_parameters(), opt)
    return float(loss.data)


def make_checkpoint(model: Model, opt: Optional[AdamState], epoch: int) -> Checkpoint:
    tensors = {name: np.array(arr, dtype=np.float32) for name, arr in named_state(model)}
    return Checkpoint(model.cfg, tensors, epoch, opt)


def restore(ckpt: Checkpoint, lr: Optional[float] = None) -> tuple[Model, Optional[AdamState]]:
    model = build(ckpt.config)
    load_state(model, ckpt.tensors)
    opt = ckpt.optimizer
    if opt is not None and lr is not None:
        opt.lr = lr
    return model, opt


def fit(model: Model, train: Sequence[Sample], val: Sequence[Sample] = (), schedule: Schedule = Schedule(),
        opt: Optional[AdamState] = None, start_epoch: int = 0, max_steps: Optional[int] = None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> History:
    """Train ``model`` in place for epochs ``start_epoch + 1 .. schedule.epochs``.

    Every epoch's batch order and augmentation derive from (seed, epoch), so a
    run resumed from a checkpoint follows the same trajectory as an
    uninterrupted one.
    """
    from .metrics import evaluate_set

    if not train:
        raise ValueError("training set is empty")
    opt = opt or AdamState(lr=schedule.lr)
    omega = schedule.loss.resolve(train)
    hist = History(omega_p=omega)
    out_dir = Path(schedule.out_dir) if schedule.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    steps = 0
    for epoch in range(start_epoch + 1, schedule.epochs + 1):
        model.train()
        losses = []
        for bi, batch in enumerate(batches(train, schedule.batch_size, schedule.seed, schedule.augment, epoch)):
            loss = train_step(model, batch.images, batch.masks, omega, opt, schedule.loss.epsilon_clamp)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch {bi} ({', '.join(batch.names)})")
            losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        val_f1 = None
        if val:
            val_f1 = evaluate_set(model, val, schedule.threshold, schedule.tolerance).macro["f1"]
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_f1": val_f1}
        hist.rows.append(row)
        logger.debug("epoch %d loss %.6f val_f1 %s", epoch, row["train_loss"], val_f1)
        last = epoch == schedule.epochs or (max_steps is not None and steps >= max_steps)
        if out_dir and (epoch % schedule.checkpoint_interval == 0 or last):
            save_checkpoint(out_dir / f"epoch_{epoch}.rhac", make_checkpoint(model, opt, epoch))
            hist.checkpoints.append(epoch)
        if on_epoch:
            on_epoch(row)
        if last:
            break
    model.train()
    return hist


def resume(path, train: Sequence[Sample], val: Sequence[Sample] = (), schedule: Schedule = Schedule(), **kw):
    """Load a checkpoint and continue training from its epoch."""
    ckpt = load_checkpoint(path)
    model, opt = restore(ckpt, schedule.lr)
    return model, fit(model, train, val, schedule, opt=opt, start_epoch=ckpt.epoch, **kw)
