"""Loss, optimiser, early stopping and the mini-batch training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DimensionError, DivergenceError, LabelError, NonFiniteError
from .metrics import confusion, metrics
from .model import HybridModel, backward, forward, predict_proba
from .tensor import Rng

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


def bce_loss(p, y, pos_weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient w.r.t. the logits.

    ``p`` is clamped to ``[1e-12, 1 - 1e-12]`` before the logs. With the
    default ``pos_weight`` the gradient is ``(p - y) / n``.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise DimensionError(f"{p.size} probabilities for {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be 0 or 1")
    n = p.size
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -float(np.sum(pos_weight * y * np.log(pc) + (1.0 - y) * np.log1p(-pc))) / n
    dz = (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n
    return loss, dz


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    max_epochs: int = 150
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    restore_best: bool = True
    # "carve": stratified hold-out from the training data; "test": a table passed to train()
    validation_source: str = "carve"
    validation_fraction: float = 0.1
    shuffle_seed: int = 42
    pos_weight: float = 1.0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0 and self.eps > 0):
            raise ConfigError("Adam constants out of range")
        if self.validation_source not in ("carve", "test"):
            raise ConfigError(f"validation_source must be 'carve' or 'test', got {self.validation_source!r}")
        if self.pos_weight <= 0:
            raise ConfigError(f"pos_weight must be > 0, got {self.pos_weight}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        a, b = np.empty_like(m), np.empty_like(m)
        m *= b1
        np.multiply(g, 1.0 - b1, out=a)
        m += a
        v *= b2
        np.multiply(g, g, out=a)
        a *= 1.0 - b2
        v += a
        # lr * (m / c1) / (sqrt(v / c2) + eps), without temporaries
        np.divide(v, c2, out=a)
        np.sqrt(a, out=a)
        a += cfg.eps
        np.divide(m, c1, out=b)
        b *= cfg.learning_rate
        b /= a
        params[name] -= b
    return params, state


class EarlyStopping:
    """Stop once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Record one epoch; returns ``(improved, should_stop)``."""
        if value < self.best:
            self.best, self.best_epoch, self.wait = value, epoch, 0
            return True, False
        self.wait += 1
        return False, self.wait >= self.patience


@dataclass
class TrainRun:
    model: HybridModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    duration: float = 0.0

    def history_array(self, key: str) -> np.ndarray:
        return np.array([h[key] for h in self.history])


def _epoch_metrics(model: HybridModel, X: np.ndarray, y: np.ndarray, pos_weight: float) -> dict:
    p = predict_proba(model, X)
    loss, _ = bce_loss(p, y, pos_weight)
    ms = metrics(confusion((p >= 0.5).astype(np.int64), y), loss)
    return {"val_loss": loss, "val_accuracy": ms.accuracy, "val_precision": ms.precision,
            "val_recall": ms.recall, "val_f1": ms.f1}


def train(model: HybridModel, train_table, cfg: TrainConfig, monitor_table=None) -> TrainRun:
    """Fit ``model`` in place on a normalised, binarised table.

    Every epoch visits the training rows in a fresh seeded order, in
    mini-batches of ``cfg.batch_size`` (the last one may be short), with one
    Adam step per batch. Validation loss after each epoch drives early
    stopping; with ``restore_best`` the best epoch's weights are put back.
    """
    from .data import stratified_split  # data does not import this module; keep the graph one-way

    cfg.validate()
    start = time.perf_counter()
    y_all = np.asarray(train_table.labels)
    for cls in (0, 1):
        if not np.any(y_all == cls):
            raise DataError(f"training data has no rows of class {cls}")

    if cfg.validation_source == "carve":
        plan = stratified_split(train_table, 1.0 - cfg.validation_fraction, cfg.shuffle_seed)
        fit, val = train_table.subset(plan.train), train_table.subset(plan.test)
    else:
        if monitor_table is None:
            raise ConfigError("validation_source='test' needs a monitor table")
        fit, val = train_table, monitor_table
    X, y = fit.X, np.asarray(fit.labels, dtype=np.float64)
    Xv, yv = val.X, np.asarray(val.labels, dtype=np.float64)
    n = len(X)

    state = AdamState.zeros_like(model.params)
    stopper = EarlyStopping(cfg.patience)
    run = TrainRun(model, cfg)
    best_params = None
    base = Rng(cfg.shuffle_seed)

    for epoch in range(1, cfg.max_epochs + 1):
        order = base.split(2 * epoch).permutation(n)
        drop_rng = base.split(2 * epoch + 1)
        total = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size), start=1):
            idx = order[s:s + cfg.batch_size]
            try:
                bundle = forward(model, X[idx], "train", drop_rng)
            except NonFiniteError:
                raise DivergenceError(epoch, b, float("nan")) from None
            loss, dz = bce_loss(bundle.probability, y[idx], cfg.pos_weight)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, b, loss)
            adam_step(model.params, backward(model, bundle, dz), state, cfg)
            total += loss * len(idx)
        try:
            record = {"epoch": epoch, "train_loss": total / n, **_epoch_metrics(model, Xv, yv, cfg.pos_weight)}
        except NonFiniteError:
            raise DivergenceError(epoch, 0, float("nan")) from None
        if not np.isfinite(record["val_loss"]):
            raise DivergenceError(epoch, 0, record["val_loss"])
        run.history.append(record)
        improved, stop = stopper.update(epoch, record["val_loss"])
        if improved and cfg.restore_best:
            best_params = {k: v.copy() for k, v in model.params.items()}
        log.info("epoch %d: train_loss=%.5f val_loss=%.5f val_acc=%.2f%%", epoch,
                 record["train_loss"], record["val_loss"], record["val_accuracy"])
        if stop:
            break

    run.stopped_epoch = len(run.history)
    run.best_epoch = stopper.best_epoch
    if cfg.restore_best and best_params is not None:
        for k, v in best_params.items():
            model.params[k][...] = v
    run.duration = time.perf_counter() - start
    return run
