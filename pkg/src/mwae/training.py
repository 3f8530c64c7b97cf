"""Adam + early-stopping training loop for the autoencoders."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import arch
from . import tensor as T
from .tensor import Rng, Tensor

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 500
    patience: int = 20
    batch_size: int = 8
    seed: int = 0
    masked_loss: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    early_stopped: bool = False
    wall_time: float = 0.0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1]

    def to_dict(self) -> dict:
        return asdict(self)


class EarlyStopper:
    """Tracks the best validation loss; ``update`` says when to stop.

    Only a strict decrease counts as improvement, and training stops once
    ``patience`` epochs have passed since the best one.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0

    def update(self, epoch: int, val: float) -> tuple[bool, bool]:
        """(improved, stop) after recording the loss of ``epoch``."""
        if val < self.best:
            self.best, self.best_epoch = val, epoch
            return True, False
        return False, epoch - self.best_epoch >= self.patience


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, cfg: TrainConfig):
    """One bias-corrected Adam update; returns (param, m, v) as new arrays."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    param = param - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return param, m, v


class Adam:
    """Keeps first/second moments for every parameter of a model state."""

    def __init__(self, state: arch.ModelState, cfg: TrainConfig):
        self.state = state
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in state.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in state.params.items()}

    def step(self):
        self.t += 1
        for k in sorted(self.state.params):
            p = self.state.params[k]
            if p.grad is None:
                continue
            new, self.m[k], self.v[k] = adam_step(p.data, p.grad, self.m[k], self.v[k], self.t, self.cfg)
            p.data[...] = new


def _batch_loss(state, xb, mask_b, mode, rng, masked):
    x = Tensor(xb)
    out = arch.forward(state, x, mode, rng)
    weight = mask_b[:, None] if (masked and mask_b is not None) else None
    return T.mse_loss(x, out, weight)


def evaluate_loss(state: arch.ModelState, x: np.ndarray, masks: Optional[np.ndarray] = None,
                  batch_size: int = 8, masked: bool = False) -> float:
    """Sample-weighted mean eval-mode reconstruction loss."""
    total = 0.0
    for i in range(0, len(x), batch_size):
        mb = None if masks is None else masks[i:i + batch_size]
        loss = _batch_loss(state, x[i:i + batch_size], mb, "eval", None, masked)
        total += float(loss.data) * len(x[i:i + batch_size])
    return total / len(x)


def iterate_minibatches(n: int, batch_size: int, rng: Rng):
    """Seeded shuffle, then consecutive slices; the last partial batch is kept."""
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(state: arch.ModelState, train_x: np.ndarray, val_x: np.ndarray, cfg: TrainConfig,
          train_masks: Optional[np.ndarray] = None, val_masks: Optional[np.ndarray] = None,
          on_best: Optional[Callable[[arch.ModelState, int], None]] = None,
          on_epoch: Optional[Callable[[int, float, float, float], None]] = None):
    """Train in place and return (model restored to its best validation epoch, report)."""
    train_x = np.asarray(train_x, dtype=np.float32)
    val_x = np.asarray(val_x, dtype=np.float32)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ValueError("train and validation sets must be non-empty")
    want = (state.spec.input_channels, *state.spec.input_size)
    for name, arr in (("train", train_x), ("validation", val_x)):
        if arr.shape[1:] != want:
            raise T.ShapeError(f"{name} samples have shape {arr.shape[1:]}, model expects {want}")

    shuffle_rng = Rng(cfg.seed).spawn(1)
    dropout_rng = Rng(cfg.seed).spawn(2)
    opt = Adam(state, cfg)
    report = TrainReport()
    stopper = EarlyStopper(cfg.patience)
    best_state = state.copy()
    t_start = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for b, idx in enumerate(iterate_minibatches(len(train_x), cfg.batch_size, shuffle_rng)):
            state.zero_grad()
            mb = None if train_masks is None else train_masks[idx]
            loss = _batch_loss(state, train_x[idx], mb, "train", dropout_rng, cfg.masked_loss)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise NumericError(f"non-finite loss {lv} at epoch {epoch}, batch index {b}")
            loss.backward()
            opt.step()
            total += lv * len(idx)
        state.zero_grad()
        tr = total / len(train_x)
        va = evaluate_loss(state, val_x, val_masks, cfg.batch_size, cfg.masked_loss)
        if not np.isfinite(va):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        dt = time.perf_counter() - t0
        report.train_loss.append(tr)
        report.val_loss.append(va)
        report.seconds.append(dt)
        report.stopped_epoch = epoch
        if on_epoch:
            on_epoch(epoch, tr, va, dt)
        log.info("epoch %d train %.6f val %.6f (%.1fs)", epoch, tr, va, dt)

        improved, stop = stopper.update(epoch, va)
        if improved:
            report.best_epoch = epoch
            best_state = state.copy()
            if on_best:
                on_best(best_state, epoch)
        elif stop:
            report.early_stopped = True
            break

    report.wall_time = time.perf_counter() - t_start
    state.params = best_state.params
    state.norm = best_state.norm
    return state, report


def write_log_csv(report: TrainReport, path, timing: bool = True) -> None:
    """Per-epoch log; with ``timing=False`` the seconds cells stay empty so reruns compare bytewise."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for i, (tr, va, s) in enumerate(zip(report.train_loss, report.val_loss, report.seconds), 1):
            w.writerow([i, repr(tr), repr(va), f"{s:.3f}" if timing else ""])
