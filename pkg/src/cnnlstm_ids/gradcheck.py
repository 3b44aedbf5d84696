"""Central finite-difference checks of every analytic gradient.

Each check builds a random configuration from a seed, computes the
analytic gradients, and compares them element by element with central
differences (step ``1e-6 * max(1, |theta|)``). The reported error is
``max|g_analytic - g_fd| / max(1, max|g_fd|)`` over the input and every
parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as ly
from .model import ArchitectureConfig, backward, build_model, forward
from .optim import bce_loss
from .tensor import Rng, sigmoid

TOLERANCE = 1e-4
LOSS_TOLERANCE = 1e-6


def numeric_gradient(loss: Callable[[], float], arr: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every element of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    out = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        h = rel_step * max(1.0, abs(orig))
        flat[k] = orig + h
        up = loss()
        flat[k] = orig - h
        down = loss()
        flat[k] = orig
        out[k] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, float(np.max(np.abs(numeric)))))


def _compare(loss, targets: dict[str, np.ndarray], analytic: dict[str, np.ndarray]) -> float:
    return max(relative_error(analytic[k], numeric_gradient(loss, v)) for k, v in targets.items())


def _projected(out: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(out * weights))


# -- per-layer checks ---------------------------------------------------------

def check_conv_block(seed: int) -> float:
    rng = Rng(seed)
    r = np.random.default_rng(seed)  # sizes only
    B, C_in, C_out, K = 2, int(r.integers(1, 4)), int(r.integers(1, 5)), int(r.integers(1, 4))
    L = K + int(r.integers(0, 6))
    x = rng.random((B, L, C_in)) * 2 - 1
    p = ly.ConvBlockParams(rng.random((C_out, K, C_in)) * 2 - 1, rng.random(C_out) - 0.5)
    R = rng.random((B, L - K + 1, C_out)) * 2 - 1
    out, cache = ly.conv_block_forward(x, p)
    dx, grads = ly.layer_backward(cache, R)
    loss = lambda: _projected(ly.conv_block_forward(x, p)[0], R)
    return _compare(loss, {"x": x, "kernels": p.kernels, "bias": p.bias}, {"x": dx, **grads})


def check_maxpool(seed: int) -> float:
    rng = Rng(seed)
    r = np.random.default_rng(seed)
    pool = int(r.integers(2, 4))
    L, C = pool * int(r.integers(1, 4)) + int(r.integers(0, pool)), int(r.integers(1, 4))
    x = rng.random((2, L, C))
    R = rng.random((2, L // pool, C)) * 2 - 1
    _, cache = ly.maxpool_forward(x, pool)
    dx, _ = ly.layer_backward(cache, R)
    loss = lambda: _projected(ly.maxpool_forward(x, pool)[0], R)
    return _compare(loss, {"x": x}, {"x": dx})


def check_flatten(seed: int) -> float:
    rng = Rng(seed)
    x = rng.random((2, 3 + seed % 3, 1 + seed % 4))
    R = rng.random((2, x.shape[1] * x.shape[2])) * 2 - 1
    _, cache = ly.flatten(x)
    dx, _ = ly.layer_backward(cache, R)
    return _compare(lambda: _projected(ly.flatten(x)[0], R), {"x": x}, {"x": dx})


def check_lstm(seed: int) -> float:
    rng = Rng(seed)
    r = np.random.default_rng(seed)
    B, T, D, H = 2, int(r.integers(1, 6)), int(r.integers(1, 4)), int(r.integers(1, 5))
    p = ly.init_lstm(rng.split(1), H, D)
    for name, arr in p.as_dict().items():
        if name.startswith("b_"):
            arr[...] = rng.random(H) - 0.5
    x = rng.random((B, T, D)) * 2 - 1
    R = rng.random((B, T, H)) * 2 - 1
    _, _, cache = ly.lstm_forward(x, p)
    dx, grads = ly.layer_backward(cache, R)
    loss = lambda: _projected(ly.lstm_forward(x, p)[1], R)
    return _compare(loss, {"x": x, **p.as_dict()}, {"x": dx, **grads})


def check_concat(seed: int) -> float:
    rng = Rng(seed)
    a, b = rng.random((2, 1 + seed % 4)), rng.random((2, 1 + seed % 3))
    R = rng.random((2, a.shape[1] + b.shape[1])) * 2 - 1
    _, cache = ly.concat_forward(a, b)
    (da, db), _ = ly.layer_backward(cache, R)
    loss = lambda: _projected(ly.concat(a, b), R)
    return _compare(loss, {"a": a, "b": b}, {"a": da, "b": db})


def _check_dense(seed: int, activation: str) -> float:
    rng = Rng(seed)
    V, U = 1 + seed % 5, 1 + seed % 4
    x = rng.random((3, V)) * 2 - 1
    p = ly.DenseParams(rng.random((U, V)) * 2 - 1, rng.random(U) - 0.5)
    R = rng.random((3, U)) * 2 - 1
    _, cache = ly.dense_forward(x, p, activation)
    dx, grads = ly.layer_backward(cache, R)
    loss = lambda: _projected(ly.dense_forward(x, p, activation)[0], R)
    return _compare(loss, {"x": x, "w": p.w, "b": p.b}, {"x": dx, **grads})


def check_dense_relu(seed: int) -> float:
    return _check_dense(seed, "relu")


def check_dense_linear(seed: int) -> float:
    return _check_dense(seed, "none")


def check_dropout(seed: int) -> float:
    rng = Rng(seed)
    m = 0.1 + 0.8 * rng.random(1)[0]
    y = rng.random((3, 5)) * 2 - 1
    R = rng.random((3, 5)) * 2 - 1
    _, cache = ly.dropout_forward(y, m, "train", Rng(seed + 1))
    dx, _ = ly.layer_backward(cache, R)
    loss = lambda: _projected(ly.dropout_forward(y, m, "train", Rng(seed + 1))[0], R)
    return _compare(loss, {"y": y}, {"y": dx})


def check_sigmoid_bce(seed: int) -> float:
    rng = Rng(seed)
    z = (rng.random(6) * 2 - 1) * 4
    y = (rng.random(6) < 0.5).astype(float)
    _, dz = bce_loss(sigmoid(z), y)
    loss = lambda: bce_loss(sigmoid(z), y)[0]
    return _compare(loss, {"z": z}, {"z": dz})


# -- end-to-end ----------------------------------------------------------------

TINY_CONFIGS = {
    # three conv+pool stages from 8 features only fit with kernel 1 (8-8-4-4-2-2-1)
    "model_f8": ArchitectureConfig(8, ((2, 1), (2, 1), (2, 1)), 2, (2, 3), 4, 0.4),
    "model_f16": ArchitectureConfig(16, ((2, 2), (2, 2), (2, 2)), 2, (2, 3), 4, 0.4),
}


def check_model(seed: int, config: ArchitectureConfig) -> float:
    model = build_model(config, seed)
    rng = Rng(seed).split(7)
    for name, arr in model.params.items():
        if name.endswith(".b") or name.endswith(".bias") or ".b_" in name:
            arr[...] = 0.2 * (rng.random(arr.shape) - 0.5)
    X = rng.random((3, config.input_features))
    y = np.array([0.0, 1.0, 1.0])
    mask_seed = seed + 12345

    def loss():
        bundle = forward(model, X, "train", Rng(mask_seed))
        return bce_loss(bundle.probability, y)[0]

    bundle = forward(model, X, "train", Rng(mask_seed))
    _, dz = bce_loss(bundle.probability, y)
    grads = backward(model, bundle, dz)
    return _compare(loss, model.params, grads)


LAYER_CHECKS: dict[str, Callable[[int], float]] = {
    "conv_block": check_conv_block,
    "maxpool": check_maxpool,
    "flatten": check_flatten,
    "lstm": check_lstm,
    "concat": check_concat,
    "dense_relu": check_dense_relu,
    "dense_linear": check_dense_linear,
    "dropout": check_dropout,
    "sigmoid_bce": check_sigmoid_bce,
}


@dataclass
class CheckResult:
    kind: str
    seeds: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def run_gradcheck(seeds: int = 50, first_seed: int = 0) -> list[CheckResult]:
    results = []
    for kind, fn in LAYER_CHECKS.items():
        tol = LOSS_TOLERANCE if kind == "sigmoid_bce" else TOLERANCE
        err = max(fn(s) for s in range(first_seed, first_seed + seeds))
        results.append(CheckResult(kind, seeds, err, tol))
    for kind, cfg in TINY_CONFIGS.items():
        err = max(check_model(s, cfg) for s in range(first_seed, first_seed + seeds))
        results.append(CheckResult(kind, seeds, err, TOLERANCE))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = [f"{'layer':<14} {'seeds':>5} {'max rel err':>12} {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.kind:<14} {r.seeds:>5} {r.max_error:>12.3e} {r.tolerance:>8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
