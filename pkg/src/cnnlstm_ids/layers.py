"""Forward and backward passes for every layer of the hybrid network.

All layers work batch-first: a sequence batch is ``(B, L, C)``, a vector
batch is ``(B, V)``. Unbatched inputs (``(L, C)`` / ``(V,)``) are accepted
too; the matching backward then expects and returns unbatched arrays.

Each ``*_forward`` returns its output and a :class:`LayerCache`. Feed the
cache together with the gradient of the loss w.r.t. that output into
:func:`layer_backward` to get the input gradient and a dict of parameter
gradients. A cache can be consumed once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError, UsageError
from .tensor import Rng, sigmoid

GATES = ("i", "f", "o", "c")

_scratch = threading.local()


def _workspace(name: str, shape: tuple[int, ...]) -> np.ndarray:
    """Per-thread scratch array, one per (name, shape).

    Only for buffers that never leave the calling function: reusing memory
    that is already mapped avoids page-faulting fresh multi-MB arrays on
    every training step.
    """
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    key = (name, shape)
    buf = pool.get(key)
    if buf is None:
        if len(pool) >= 64:  # many distinct shapes (e.g. gradcheck sweeps): start over
            pool.clear()
        buf = pool[key] = np.empty(shape)
    return buf


# -- parameter containers --------------------------------------------------

@dataclass
class ConvBlockParams:
    """Filters ``(C_out, K, C_in)`` and bias ``(C_out,)`` of one conv block."""

    kernels: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.kernels.ndim != 3 or self.bias.shape != (self.kernels.shape[0],):
            raise DimensionError(
                f"conv kernels {self.kernels.shape} and bias {self.bias.shape} are inconsistent")

    @property
    def filters(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[1]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[2]


@dataclass
class LstmParams:
    """Per-gate input weights ``w_g (H, D)``, recurrent weights ``u_g (H, H)``
    and biases ``b_g (H,)`` for gates i (input), f (forget), o (output) and
    c (candidate cell)."""

    w_i: np.ndarray
    u_i: np.ndarray
    b_i: np.ndarray
    w_f: np.ndarray
    u_f: np.ndarray
    b_f: np.ndarray
    w_o: np.ndarray
    u_o: np.ndarray
    b_o: np.ndarray
    w_c: np.ndarray
    u_c: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        H, D = self.w_i.shape
        for g in GATES:
            w, u, b = (getattr(self, f"{k}_{g}") for k in "wub")
            if w.shape != (H, D) or u.shape != (H, H) or b.shape != (H,):
                raise DimensionError(
                    f"LSTM gate {g}: w{w.shape} u{u.shape} b{b.shape} do not match H={H}, D={D}")

    @property
    def hidden_size(self) -> int:
        return self.w_i.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_i.shape[1]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Gate weights stacked in i, f, o, c order: ``(4H, D)``, ``(4H, H)``, ``(4H,)``."""
        W = np.concatenate([getattr(self, f"w_{g}") for g in GATES])
        U = np.concatenate([getattr(self, f"u_{g}") for g in GATES])
        b = np.concatenate([getattr(self, f"b_{g}") for g in GATES])
        return W, U, b

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class DenseParams:
    w: np.ndarray  # (U, V)
    b: np.ndarray  # (U,)

    def __post_init__(self):
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise DimensionError(f"dense w {self.w.shape} and b {self.b.shape} are inconsistent")


@dataclass
class LayerCache:
    kind: str
    out_shape: tuple
    unbatched: bool = False
    data: dict[str, Any] = field(default_factory=dict)
    consumed: bool = False


def _batch(x: np.ndarray, rank: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise DimensionError(f"{what}: expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def _unbatch(out: np.ndarray, unbatched: bool) -> np.ndarray:
    return out[0] if unbatched else out


# -- forward passes --------------------------------------------------------

def conv_block_forward(x: np.ndarray, p: ConvBlockParams) -> tuple[np.ndarray, LayerCache]:
    """ReLU of a stride-1, unpadded 1-D cross-correlation plus bias."""
    xb, unb = _batch(x, 3, "conv_block")
    B, L, C_in = xb.shape
    C_out, K, _ = p.kernels.shape
    if C_in != p.in_channels:
        raise DimensionError(f"conv_block: input has {C_in} channels, kernels expect {p.in_channels}")
    if L < K:
        raise DimensionError(f"conv_block: sequence length {L} is shorter than kernel size {K}")
    L_out = L - K + 1
    # (B, L_out, C_in, K) -> (B*L_out, K*C_in), k-major like the kernel layout
    cols = sliding_window_view(xb, K, axis=1).transpose(0, 1, 3, 2).reshape(B * L_out, K * C_in)
    W = p.kernels.reshape(C_out, K * C_in)
    pre = (cols @ W.T + p.bias).reshape(B, L_out, C_out)
    out = np.maximum(pre, 0.0)
    cache = LayerCache("conv_block", out.shape, unb,
                       {"cols": cols, "pre": pre, "W": W, "x_shape": xb.shape, "K": K})
    return _unbatch(out, unb), cache


def maxpool_forward(h: np.ndarray, pool: int = 2) -> tuple[np.ndarray, LayerCache]:
    """Non-overlapping max pooling along the time axis; a short tail is dropped."""
    if pool < 2:
        raise ParameterError(f"pool extent must be >= 2, got {pool}")
    hb, unb = _batch(h, 3, "maxpool")
    B, L, C = hb.shape
    if L < pool:
        raise DimensionError(f"maxpool: sequence length {L} is shorter than pool extent {pool}")
    L_out = L // pool
    win = hb[:, :L_out * pool].reshape(B, L_out, pool, C)
    if pool == 2:
        # the second element wins only when strictly larger, so ties go to the first
        arg = (win[:, :, 1] > win[:, :, 0]).astype(np.intp)
        out = np.maximum(win[:, :, 0], win[:, :, 1])
    else:
        arg = np.argmax(win, axis=2)  # first maximum wins ties
        out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    cache = LayerCache("maxpool", out.shape, unb, {"arg": arg, "in_shape": hb.shape, "pool": pool})
    return _unbatch(out, unb), cache


def flatten(p: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """Row-major reshape ``(L, C) -> (L*C,)``: time-step major, channel minor."""
    pb, unb = _batch(p, 3, "flatten")
    out = pb.reshape(pb.shape[0], -1)
    return _unbatch(out, unb), LayerCache("flatten", out.shape, unb, {"in_shape": pb.shape})


def unflatten(f: np.ndarray, length: int, channels: int) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f.reshape(*f.shape[:-1], length, channels)


def lstm_forward(x: np.ndarray, p: LstmParams, h0: np.ndarray | None = None,
                 c0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, LayerCache]:
    """Run one LSTM layer over ``x`` of shape ``(T, D)`` or ``(B, T, D)``.

    Returns the last hidden state, the whole hidden sequence and the cache.
    Initial states default to zeros.
    """
    xb, unb = _batch(x, 3, "lstm")
    B, T, D = xb.shape
    H = p.hidden_size
    if T < 1:
        raise DimensionError("lstm: empty sequence")
    if D != p.input_size:
        raise DimensionError(f"lstm: input size {D} does not match parameters ({p.input_size})")
    h = np.zeros((B, H)) if h0 is None else np.broadcast_to(h0, (B, H)).astype(np.float64)
    c = np.zeros((B, H)) if c0 is None else np.broadcast_to(c0, (B, H)).astype(np.float64)

    W, U, b = p.stacked()
    # sigmoid(z) = (1 + tanh(z / 2)) / 2. Halving the i, f, o rows (exact in
    # binary floating point) lets one tanh call per step cover all four gates.
    half = np.ones(4 * H)
    half[:3 * H] = 0.5
    Uh = U * half[:, None]
    # Time-major, feature-major buffers: step t lives in [t] as (features, B),
    # so each gate is a contiguous block of rows. When x is the hidden
    # sequence of another LSTM layer, xT is a free view of that layer's buffer.
    xT = xb.transpose(1, 2, 0)  # (T, D, B)
    gates = np.matmul(W * half[:, None], xT)  # (T, 4H, B)
    gates += (b * half)[:, None]
    cs = np.empty((T + 1, H, B))
    hs = np.empty((T + 1, H, B))
    tcs = np.empty((T, H, B))
    rec = np.empty((4 * H, B))
    tmp = np.empty((H, B))
    cs[0], hs[0] = c.T, h.T
    H3 = 3 * H
    for t in range(T):
        z = gates[t]
        np.dot(Uh, hs[t], out=rec)
        z += rec
        np.tanh(z, out=z)
        s = z[:H3]
        s *= 0.5
        s += 0.5
        c_t = cs[t + 1]
        np.multiply(z[H:2 * H], cs[t], out=c_t)
        np.multiply(z[:H], z[H3:], out=tmp)
        c_t += tmp
        np.tanh(c_t, out=tcs[t])
        np.multiply(z[2 * H:H3], tcs[t], out=hs[t + 1])

    # all_h is a read-only view of the cached states, laid out (B, T, H)
    all_h = hs[1:].transpose(2, 0, 1)
    cache = LayerCache("lstm", (B, T, H), unb,
                       {"xT": xT, "gates": gates, "cs": cs, "hs": hs, "tcs": tcs, "W": W, "U": U})
    return _unbatch(hs[T].T.copy(), unb), _unbatch(all_h, unb), cache


def lstm_gates(cache: LayerCache) -> dict[str, np.ndarray]:
    """Per-step gate activations recorded by :func:`lstm_forward`, each ``(B, T, H)``."""
    g = cache.data["gates"]
    H = g.shape[1] // 4
    return {name: g[:, k * H:(k + 1) * H].transpose(2, 0, 1) for k, name in enumerate(GATES)}


def concat_forward(L_vec: np.ndarray, f_vec: np.ndarray) -> tuple[np.ndarray, LayerCache]:
    """``[L, f]``: LSTM features first, then CNN features."""
    a, unb_a = _batch(L_vec, 2, "concat")
    b, unb_b = _batch(f_vec, 2, "concat")
    if unb_a != unb_b or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: incompatible operands {np.shape(L_vec)} and {np.shape(f_vec)}")
    out = np.concatenate([a, b], axis=1)
    return _unbatch(out, unb_a), LayerCache("concat", out.shape, unb_a, {"split": a.shape[1]})


def concat(L_vec: np.ndarray, f_vec: np.ndarray) -> np.ndarray:
    return concat_forward(L_vec, f_vec)[0]


def dense_forward(c: np.ndarray, p: DenseParams, activation: str = "relu") -> tuple[np.ndarray, LayerCache]:
    if activation not in ("relu", "none"):
        raise ParameterError(f"unknown dense activation {activation!r}")
    cb, unb = _batch(c, 2, "dense")
    if cb.shape[1] != p.w.shape[1]:
        raise DimensionError(f"dense: input width {cb.shape[1]} does not match weights {p.w.shape}")
    pre = cb @ p.w.T + p.b
    out = np.maximum(pre, 0.0) if activation == "relu" else pre
    cache = LayerCache("dense", out.shape, unb, {"x": cb, "pre": pre, "w": p.w, "activation": activation})
    return _unbatch(out, unb), cache


def dropout_forward(y: np.ndarray, m: float, mode: str = "train", rng: Rng | None = None,
                    mask: np.ndarray | None = None) -> tuple[np.ndarray, LayerCache]:
    """Inverted dropout: in train mode keep each unit with probability ``1 - m``
    and scale survivors by ``1 / (1 - m)``; infer mode is the identity.

    ``mask`` overrides the random draw (values 0/1, same shape as ``y``).
    """
    if not 0.0 <= m < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {m}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"unknown mode {mode!r}")
    y = np.asarray(y, dtype=np.float64)
    if mode == "infer":
        return y.copy(), LayerCache("dropout", y.shape, data={"mask": None, "scale": 1.0})
    if mask is None:
        if rng is None:
            raise ParameterError("train-mode dropout needs an Rng or an explicit mask")
        mask = (rng.random(y.shape) >= m).astype(np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != y.shape:
            raise DimensionError(f"dropout mask {mask.shape} does not match input {y.shape}")
    scale = 1.0 / (1.0 - m)
    out = y * mask * scale
    return out, LayerCache("dropout", y.shape, data={"mask": mask, "scale": scale})


# -- backward passes -------------------------------------------------------

def _conv_backward(d, g):
    B, L, C_in = d["x_shape"]
    K = d["K"]
    pre = d["pre"]
    C_out = pre.shape[2]
    L_out = pre.shape[1]
    dpre = (g * (pre > 0)).reshape(B * L_out, C_out)
    grads = {"kernels": (dpre.T @ d["cols"]).reshape(C_out, K, C_in), "bias": dpre.sum(axis=0)}
    dcols = (dpre @ d["W"]).reshape(B, L_out, K, C_in)
    dx = np.zeros((B, L, C_in))
    for k in range(K):
        dx[:, k:k + L_out] += dcols[:, :, k]
    return dx, grads


def _maxpool_backward(d, g):
    B, L, C = d["in_shape"]
    pool = d["pool"]
    L_out = g.shape[1]
    win = np.zeros((B, L_out, pool, C))
    np.put_along_axis(win, d["arg"][:, :, None, :], g[:, :, None, :], axis=2)
    dx = np.zeros((B, L, C))
    dx[:, :L_out * pool] = win.reshape(B, L_out * pool, C)
    return dx, {}


def _flatten_backward(d, g):
    return g.reshape(d["in_shape"]), {}


def _lstm_backward(d, g):
    xT, gates, cs, hs, tcs = d["xT"], d["gates"], d["cs"], d["hs"], d["tcs"]
    W, U = d["W"], d["U"]
    T, H, B = tcs.shape
    D = xT.shape[1]
    H2, H3 = 2 * H, 3 * H
    # Local derivatives, hoisted out of the recurrence:
    #   dz_i = dc * cand * i(1-i)    dz_f = dc * c_prev * f(1-f)
    #   dz_o = dh * tanh(c) * o(1-o) dz_c = dc * i(1-cand^2)
    #   dc  += dh * o(1-tanh(c)^2)
    sd = np.subtract(1.0, gates[:, :H3], out=_workspace("lstm_sd", (T, H3, B)))
    sd *= gates[:, :H3]  # s(1-s) for i, f, o
    k_if = _workspace("lstm_kif", (T, 2, H, B))
    np.multiply(sd[:, :H], gates[:, H3:], out=k_if[:, 0])
    np.multiply(sd[:, H:H2], cs[:T], out=k_if[:, 1])
    k_o = sd[:, H2:]
    k_o *= tcs
    k_c = np.multiply(gates[:, H3:], gates[:, H3:], out=_workspace("lstm_kc", (T, H, B)))
    np.subtract(1.0, k_c, out=k_c)
    k_c *= gates[:, :H]
    oc = np.multiply(tcs, tcs, out=_workspace("lstm_oc", (T, H, B)))
    np.subtract(1.0, oc, out=oc)
    oc *= gates[:, H2:H3]

    gv = g.transpose(2, 1, 0)  # (H, T, B)
    seq = bool(np.any(g[:, :-1]))  # False when only the final state feeds the loss
    UT = np.ascontiguousarray(U.T)
    dZ = _workspace("lstm_dz", (4 * H, T, B))  # gate-major, so all steps flatten to (4H, T*B) for free
    dz_if = dZ[:H2].reshape(2, H, T, B)
    dh = np.zeros((H, B))
    dc = np.zeros((H, B))
    tmp = np.empty((H, B))
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            np.dot(UT, dZ[:, t + 1], out=dh)
            dc *= gates[t + 1, H:H2]
        if seq or t == T - 1:
            dh += gv[:, t]
        np.multiply(dh, oc[t], out=tmp)
        dc += tmp
        np.multiply(dc, k_if[t], out=dz_if[:, :, t])
        np.multiply(dh, k_o[t], out=dZ[H2:H3, t])
        np.multiply(dc, k_c[t], out=dZ[H3:, t])
    flat = dZ.reshape(4 * H, T * B)  # columns ordered (t, b)
    dW = flat @ xT.transpose(1, 0, 2).reshape(D, T * B).T
    dU = flat @ hs[:T].transpose(1, 0, 2).reshape(H, T * B).T
    db = flat @ np.ones(T * B)
    grads = {}
    for k, gate in enumerate(GATES):
        rows = slice(k * H, (k + 1) * H)
        grads[f"w_{gate}"] = dW[rows]
        grads[f"u_{gate}"] = dU[rows]
        grads[f"b_{gate}"] = db[rows]
    dx = (W.T @ flat).reshape(D, T, B).transpose(2, 1, 0)
    return dx, grads


def _concat_backward(d, g):
    k = d["split"]
    return (g[:, :k], g[:, k:]), {}


def _dense_backward(d, g):
    if d["activation"] == "relu":
        g = g * (d["pre"] > 0)
    return g @ d["w"], {"w": g.T @ d["x"], "b": g.sum(axis=0)}


def _dropout_backward(d, g):
    if d["mask"] is None:
        return g.copy(), {}
    return g * d["mask"] * d["scale"], {}


_BACKWARD = {
    "conv_block": _conv_backward,
    "maxpool": _maxpool_backward,
    "flatten": _flatten_backward,
    "lstm": _lstm_backward,
    "concat": _concat_backward,
    "dense": _dense_backward,
    "dropout": _dropout_backward,
}


def layer_backward(cache: LayerCache, upstream: np.ndarray) -> tuple[Any, dict[str, np.ndarray]]:
    """Gradient of the loss w.r.t. a layer's input and parameters.

    ``upstream`` has the forward output's shape. For an LSTM cache it may
    instead be the gradient of the final hidden state only (``(H,)`` or
    ``(B, H)``). For a concat cache the input gradient is a pair.
    """
    if cache.consumed:
        raise UsageError(f"{cache.kind} cache was already consumed by a backward pass")
    g = np.asarray(upstream, dtype=np.float64)
    if cache.unbatched:
        g = g[None]
    shape = cache.out_shape
    if cache.kind == "lstm" and g.shape == (shape[0], shape[2]):
        full = np.zeros(shape)
        full[:, -1] = g
        g = full
    if g.shape != tuple(shape):
        raise UsageError(f"{cache.kind} backward: upstream shape {g.shape} != forward output {tuple(shape)}")
    cache.consumed = True
    dx, grads = _BACKWARD[cache.kind](cache.data, g)
    if cache.unbatched:
        dx = tuple(a[0] for a in dx) if isinstance(dx, tuple) else dx[0]
    return dx, grads


# -- initialisation ----------------------------------------------------------

def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_conv(rng: Rng, filters: int, kernel_size: int, in_channels: int) -> ConvBlockParams:
    lim = glorot_limit(kernel_size * in_channels, kernel_size * filters)
    k = lim * (2.0 * rng.random((filters, kernel_size, in_channels)) - 1.0)
    return ConvBlockParams(k, np.zeros(filters))


def init_lstm(rng: Rng, hidden: int, inputs: int) -> LstmParams:
    arrays = {}
    for g in GATES:
        arrays[f"w_{g}"] = glorot_limit(inputs, hidden) * (2.0 * rng.random((hidden, inputs)) - 1.0)
        arrays[f"u_{g}"] = glorot_limit(hidden, hidden) * (2.0 * rng.random((hidden, hidden)) - 1.0)
        arrays[f"b_{g}"] = np.zeros(hidden)
    return LstmParams(**arrays)


def init_dense(rng: Rng, units: int, inputs: int) -> DenseParams:
    lim = glorot_limit(inputs, units)
    return DenseParams(lim * (2.0 * rng.random((units, inputs)) - 1.0), np.zeros(units))
