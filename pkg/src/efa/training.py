"""Adam fitting with validation early stopping, and evaluation metrics."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .heads import PoissonOnePlus, PoissonShifted
from .model import Model, SequenceBatch

__all__ = [
    "FitConfig",
    "AdamState",
    "adam_step",
    "FitReport",
    "DivergenceError",
    "UnsupportedMetricError",
    "fit",
    "batch_loss",
    "evaluate",
    "METRICS",
]

log = logging.getLogger(__name__)

METRICS = ("MSE", "CrossEntropy", "PoissonNLL", "MeanByActual")


class DivergenceError(FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"loss diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


class UnsupportedMetricError(ValueError):
    """The metric does not apply to the model's heads."""


@dataclass
class FitConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch_size: int = 1024

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 0 or self.batch_size < 0:
            raise ValueError("max_epochs and batch_size must be non-negative")


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params: list, grads: list, state: AdamState, config: FitConfig) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        elif np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return state


@dataclass
class FitReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    epochs_run: int = 0
    stopped_early: bool = False
    final_metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        d = asdict(self)
        if not include_wall_clock:
            d.pop("wall_clock")
        return d

    def to_json(self, include_wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(include_wall_clock), indent=2, sort_keys=True)


def _chunks(n: int, size: int):
    size = n if size <= 0 else size
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def batch_loss(model: Model, data: SequenceBatch, chunk: int = 1024) -> float:
    """Mean negative log-likelihood per valid position, evaluated in chunks without gradients."""
    total, count = 0.0, 0
    with T.no_grad():
        for sl in _chunks(len(data), chunk):
            part = data.subset(np.arange(sl.start, sl.stop))
            n = int(part.valid.sum())
            if n == 0:
                continue
            total += float(model.loss(part).data) * n
            count += n
    if count == 0:
        raise ValueError("no valid positions to evaluate")
    return total / count


def fit(model: Model, train: SequenceBatch, val: SequenceBatch, config: FitConfig,
        on_epoch=None) -> FitReport:
    """Minimize the negative (pseudo) log-likelihood with Adam.

    Stops after ``patience`` epochs without a validation improvement and
    restores the parameters from the best validation epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fit needs non-empty train and validation splits")
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState()
    report = FitReport()
    best_state = model.state_dict()
    try:
        report.best_val_loss = batch_loss(model, val, config.eval_batch_size)
    except FloatingPointError as exc:
        raise DivergenceError(0, str(exc)) from exc
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train)) if config.batch_size else np.arange(len(train))
        total, count = 0.0, 0
        try:
            for sl in _chunks(len(train), config.batch_size):
                part = train.subset(order[sl])
                n = int(part.valid.sum())
                if n == 0:
                    continue
                model.zero_grad()
                loss = model.loss(part)
                T.backward(loss)
                grads = [p.grad for p in params]
                if any(g is not None and not np.all(np.isfinite(g)) for g in grads):
                    raise FloatingPointError("non-finite gradient")
                adam_step(params, grads, state, config)
                total += float(loss.data) * n
                count += n
            val_loss = batch_loss(model, val, config.eval_batch_size)
        except FloatingPointError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        train_loss = total / count
        report.train_losses.append(train_loss)
        report.val_losses.append(val_loss)
        report.epochs_run = epoch
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = model.state_dict()
            since_best = 0
        else:
            since_best += 1
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if since_best >= config.patience:
            report.stopped_early = True
            break
    model.zero_grad()
    model.load_state_dict(best_state)
    report.wall_clock = time.perf_counter() - start
    return report


def evaluate(model: Model, data: SequenceBatch, metric: str, chunk: int = 1024):
    """Compute ``metric`` on ``data``.

    ``MSE`` and ``MeanByActual`` use the value head's predicted means at
    target positions; ``CrossEntropy`` averages ``-log eta_i(x_i)`` over
    valid positions; ``PoissonNLL`` averages the Poisson head's negative
    log-likelihood. ``MeanByActual`` returns ``{actual value: mean prediction}``.
    """
    if metric not in METRICS:
        raise UnsupportedMetricError(f"unknown metric {metric!r}")
    if len(data) == 0:
        raise ValueError("evaluate needs non-empty data")
    if metric == "CrossEntropy":
        if not model.has_categorical():
            raise UnsupportedMetricError("CrossEntropy needs a categorical component")
        lp = np.concatenate([model.categorical_log_prob(data.subset(np.arange(s.start, s.stop)))[
            data.valid[s]] for s in _chunks(len(data), chunk)])
        return float(-lp.mean())
    if not model.has_value():
        raise UnsupportedMetricError(f"{metric} needs a value head")
    if metric == "PoissonNLL" and not isinstance(model.head_y, (PoissonShifted, PoissonOnePlus)):
        raise UnsupportedMetricError("PoissonNLL needs a Poisson head")
    kappa = np.concatenate([model.value_natural_params(data.subset(np.arange(s.start, s.stop)))[
        data.target[s]] for s in _chunks(len(data), chunk)])
    y = data.y[data.target]
    if y.size == 0:
        raise ValueError("no target positions to evaluate")
    if metric == "PoissonNLL":
        return float(-model.head_y.log_prob(kappa, y).mean())
    pred = model.head_y.mean(kappa)
    if metric == "MSE":
        return float(np.mean((pred - y) ** 2))
    return {float(v): float(pred[y == v].mean()) for v in np.unique(y)}


def gaussian_mse_from_nll(nll: float) -> float:
    """Inverse of the unit-variance Gaussian NLL shift: ``MSE = 2 NLL - log 2 pi``."""
    return 2.0 * nll - math.log(2.0 * math.pi)
