"""Two-branch CNN + LSTM binary classifier.

A flow-feature vector of length F is read as a length-F, one-channel
sequence and fed to both branches:

* CNN branch: ``n`` x (conv block -> max-pool), then flatten -> ``f``
* LSTM branch: stacked LSTM layers, each consuming the full hidden
  sequence of the one below; ``L`` is the top layer's final hidden state

The head is ``concat(L, f) -> dense + ReLU -> dropout -> dense(1) -> sigmoid``.

Parameters live in one ordered ``name -> ndarray`` dict. The names are a
pure function of the config (see :func:`parameter_shapes`)::

    conv{k}.kernels, conv{k}.bias                 k = 1..n_conv
    lstm{j}.{w,u,b}_{i,f,o,c}                     j = 1..n_lstm
    dense.w, dense.b, output.w, output.b

Model file layout (all integers little-endian)::

    8 bytes   magic  b"CLSTMIDS"
    4 bytes   uint32 format version (1)
    8 bytes   uint64 header length N
    N bytes   UTF-8 JSON header: {"config", "seed", "tensors", "metadata"}
              tensors = [{"name", "shape", "offset"}], offset in bytes from
              the start of the data section
    ...       float64 little-endian tensor data, in manifest order
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import layers as ly
from .errors import (BadMagicError, ConfigError, DimensionError, ModelFormatError,
                     ShapeMismatchError, TruncatedFileError, UnsupportedVersionError)
from .tensor import Rng, check_finite, sigmoid

MAGIC = b"CLSTMIDS"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")


@dataclass(frozen=True)
class ArchitectureConfig:
    input_features: int
    conv_blocks: tuple[tuple[int, int], ...] = ((64, 3), (64, 3), (64, 3))  # (filters, kernel)
    pool: int = 2
    lstm_units: tuple[int, ...] = (64, 128)
    dense_units: int = 128
    dropout: float = 0.4

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(tuple(int(v) for v in b) for b in self.conv_blocks))
        object.__setattr__(self, "lstm_units", tuple(int(u) for u in self.lstm_units))

    def validate(self) -> None:
        """Check every size and the conv/pool length chain; raise ConfigError."""
        if self.input_features < 1:
            raise ConfigError(f"input_features must be >= 1, got {self.input_features}")
        if not self.conv_blocks:
            raise ConfigError("at least one conv block is required")
        if not self.lstm_units:
            raise ConfigError("at least one LSTM layer is required")
        if self.pool < 2:
            raise ConfigError(f"pool must be >= 2, got {self.pool}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dense_units < 1 or any(u < 1 for u in self.lstm_units):
            raise ConfigError("layer widths must be positive")
        self.cnn_lengths()

    def cnn_lengths(self) -> list[int]:
        """Sequence length entering and leaving each conv and pool stage."""
        n = self.input_features
        lengths = [n]
        for k, (filters, kernel) in enumerate(self.conv_blocks, start=1):
            if filters < 1 or kernel < 1:
                raise ConfigError(f"conv block {k}: filters and kernel size must be positive")
            if n < kernel:
                raise ConfigError(
                    f"conv block {k} receives sequence length {n}, shorter than its kernel size {kernel}")
            n = n - kernel + 1
            lengths.append(n)
            if n < self.pool:
                raise ConfigError(
                    f"max-pool after conv block {k} receives length {n}, shorter than pool extent {self.pool}")
            n //= self.pool
            lengths.append(n)
        return lengths

    @property
    def cnn_features(self) -> int:
        return self.cnn_lengths()[-1] * self.conv_blocks[-1][0]

    @property
    def concat_features(self) -> int:
        return self.lstm_units[-1] + self.cnn_features

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["conv_blocks"] = [list(b) for b in self.conv_blocks]
        d["lstm_units"] = list(self.lstm_units)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArchitectureConfig":
        return cls(input_features=int(d["input_features"]),
                   conv_blocks=tuple(tuple(b) for b in d["conv_blocks"]),
                   pool=int(d["pool"]), lstm_units=tuple(d["lstm_units"]),
                   dense_units=int(d["dense_units"]), dropout=float(d["dropout"]))


def parameter_shapes(cfg: ArchitectureConfig) -> dict[str, tuple[int, ...]]:
    """Canonical ordered parameter names and shapes for ``cfg``."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for k, (filters, kernel) in enumerate(cfg.conv_blocks, start=1):
        shapes[f"conv{k}.kernels"] = (filters, kernel, c_in)
        shapes[f"conv{k}.bias"] = (filters,)
        c_in = filters
    d_in = 1
    for j, h in enumerate(cfg.lstm_units, start=1):
        for g in ly.GATES:
            shapes[f"lstm{j}.w_{g}"] = (h, d_in)
            shapes[f"lstm{j}.u_{g}"] = (h, h)
            shapes[f"lstm{j}.b_{g}"] = (h,)
        d_in = h
    shapes["dense.w"] = (cfg.dense_units, cfg.concat_features)
    shapes["dense.b"] = (cfg.dense_units,)
    shapes["output.w"] = (1, cfg.dense_units)
    shapes["output.b"] = (1,)
    return shapes


def cnn_parameter_names(cfg: ArchitectureConfig) -> list[str]:
    return [n for n in parameter_shapes(cfg) if n.startswith("conv")]


def lstm_parameter_names(cfg: ArchitectureConfig) -> list[str]:
    return [n for n in parameter_shapes(cfg) if n.startswith("lstm")]


@dataclass
class HybridModel:
    config: ArchitectureConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    def conv(self, k: int) -> ly.ConvBlockParams:
        return ly.ConvBlockParams(self.params[f"conv{k}.kernels"], self.params[f"conv{k}.bias"])

    def lstm(self, j: int) -> ly.LstmParams:
        return ly.LstmParams(**{f"{a}_{g}": self.params[f"lstm{j}.{a}_{g}"]
                                for g in ly.GATES for a in "wub"})

    def dense(self, name: str) -> ly.DenseParams:
        return ly.DenseParams(self.params[f"{name}.w"], self.params[f"{name}.b"])

    def copy(self) -> "HybridModel":
        return HybridModel(self.config, {k: v.copy() for k, v in self.params.items()},
                           self.seed, dict(self.metadata))

    def zero_(self) -> "HybridModel":
        for v in self.params.values():
            v[...] = 0.0
        return self

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def build_model(config: ArchitectureConfig, seed: int = 42) -> HybridModel:
    """Validate ``config`` and draw initial weights (Glorot-uniform, zero biases)."""
    config.validate()
    rng = Rng(seed)
    params: dict[str, np.ndarray] = {}
    c_in = 1
    for k, (filters, kernel) in enumerate(config.conv_blocks, start=1):
        p = ly.init_conv(rng.split(k), filters, kernel, c_in)
        params[f"conv{k}.kernels"], params[f"conv{k}.bias"] = p.kernels, p.bias
        c_in = filters
    d_in = 1
    for j, h in enumerate(config.lstm_units, start=1):
        p = ly.init_lstm(rng.split(100 + j), h, d_in)
        for g in ly.GATES:
            for a in "wub":
                params[f"lstm{j}.{a}_{g}"] = getattr(p, f"{a}_{g}")
        d_in = h
    for key, name, units, inputs in ((200, "dense", config.dense_units, config.concat_features),
                                     (201, "output", 1, config.dense_units)):
        p = ly.init_dense(rng.split(key), units, inputs)
        params[f"{name}.w"], params[f"{name}.b"] = p.w, p.b
    assert list(params) == list(parameter_shapes(config))
    return HybridModel(config, params, seed)


@dataclass
class ForwardBundle:
    """Outputs of one forward pass (always batched; ``B`` rows)."""

    probability: np.ndarray  # (B,)
    logit: np.ndarray  # (B,)
    lstm_out: np.ndarray  # L, (B, H_last)
    cnn_out: np.ndarray  # f, (B, cnn_features)
    combined: np.ndarray  # c
    hidden: np.ndarray  # y
    dropped: np.ndarray  # d
    caches: list[tuple[str, ly.LayerCache]] = field(default_factory=list)


def _as_batch(model: HybridModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    F = model.config.input_features
    if x.ndim != 2 or x.shape[1] != F:
        raise DimensionError(f"expected feature vectors of length {F}, got shape {x.shape}")
    return x


def forward(model: HybridModel, x, mode: str = "infer", rng: Rng | None = None) -> ForwardBundle:
    """Forward pass over a feature vector ``(F,)`` or a batch ``(B, F)``.

    Train mode applies dropout with masks drawn from ``rng``.
    """
    # overflow shows up as a non-finite logit, which check_finite reports
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(model, _as_batch(model, x)[:, :, None], mode, rng)


def _forward(model: HybridModel, seq: np.ndarray, mode: str, rng: Rng | None) -> ForwardBundle:
    cfg = model.config
    caches: list[tuple[str, ly.LayerCache]] = []

    h = seq
    for k in range(1, len(cfg.conv_blocks) + 1):
        h, cache = ly.conv_block_forward(h, model.conv(k))
        caches.append((f"conv{k}", cache))
        h, cache = ly.maxpool_forward(h, cfg.pool)
        caches.append((f"pool{k}", cache))
    f, cache = ly.flatten(h)
    caches.append(("flatten", cache))

    s = seq
    for j in range(1, len(cfg.lstm_units) + 1):
        L, s, cache = ly.lstm_forward(s, model.lstm(j))
        caches.append((f"lstm{j}", cache))

    c, cache = ly.concat_forward(L, f)
    caches.append(("concat", cache))
    y, cache = ly.dense_forward(c, model.dense("dense"), "relu")
    caches.append(("dense", cache))
    d, cache = ly.dropout_forward(y, cfg.dropout, mode, rng)
    caches.append(("dropout", cache))
    z, cache = ly.dense_forward(d, model.dense("output"), "none")
    caches.append(("output", cache))
    z = check_finite(z[:, 0], "logit")
    return ForwardBundle(sigmoid(z), z, L, f, c, y, d, caches)


def backward(model: HybridModel, bundle: ForwardBundle, dlogit: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given ``dLoss/dlogit`` per sample; consumes the bundle's caches."""
    caches = dict(bundle.caches)
    grads: dict[str, np.ndarray] = {}

    def run(name, upstream):
        dx, pg = ly.layer_backward(caches[name], upstream)
        for k, v in pg.items():
            grads[f"{name}.{k}"] = v
        return dx

    g = run("output", np.asarray(dlogit, dtype=np.float64).reshape(-1, 1))
    g = run("dropout", g)
    g = run("dense", g)
    dL, df = run("concat", g)

    g = run("flatten", df)
    for k in range(len(model.config.conv_blocks), 0, -1):
        g = run(f"pool{k}", g)
        g = run(f"conv{k}", g)

    g = dL
    for j in range(len(model.config.lstm_units), 0, -1):
        g = run(f"lstm{j}", g)

    return {name: grads[name] for name in model.params}


def predict_proba(model: HybridModel, x, batch_size: int = 512) -> np.ndarray:
    """Inference-mode probabilities, evaluated in chunks."""
    X = _as_batch(model, x)
    out = [forward(model, X[i:i + batch_size], "infer").probability
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


def predict(model: HybridModel, x, threshold: float = 0.5):
    """1 (attack) iff probability >= threshold. Scalar for one vector, array for a batch."""
    p = predict_proba(model, x)
    labels = (p >= threshold).astype(np.int64)
    return int(labels[0]) if np.ndim(x) == 1 else labels


# -- persistence -------------------------------------------------------------

def save_model(model: HybridModel, path: str | Path) -> None:
    manifest = []
    offset = 0
    for name, arr in model.params.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"config": model.config.to_dict(), "seed": model.seed,
              "tensors": manifest, "metadata": model.metadata}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str | Path) -> HybridModel:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC):
        raise TruncatedFileError(f"{path}: file too short for the magic bytes")
    if raw[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a model file (bad magic {raw[:len(MAGIC)]!r})")
    if len(raw) < _PREAMBLE.size:
        raise TruncatedFileError(f"{path}: file ends inside the preamble")
    _, version, header_len = _PREAMBLE.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(version, FORMAT_VERSION)
    start = _PREAMBLE.size + header_len
    if len(raw) < start:
        raise TruncatedFileError(f"{path}: file ends inside the JSON header")
    try:
        header = json.loads(raw[_PREAMBLE.size:start].decode("utf-8"))
        config = ArchitectureConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header ({exc})") from exc
    try:
        config.validate()
    except ConfigError as exc:
        raise ShapeMismatchError(f"{path}: stored config is invalid ({exc})") from exc

    expected = parameter_shapes(config)
    names = [t["name"] for t in manifest]
    if names != list(expected):
        raise ShapeMismatchError(f"{path}: tensor manifest does not match the stored config")
    data = raw[start:]
    params: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]] or entry["offset"] != offset:
            raise ShapeMismatchError(
                f"{path}: tensor {entry['name']} has shape {shape} at offset {entry['offset']}, "
                f"expected {expected[entry['name']]} at {offset}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if len(data) < offset + nbytes:
            raise TruncatedFileError(f"{path}: file ends inside tensor {entry['name']}")
        params[entry["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                              offset=offset).astype(np.float64).reshape(shape)
        offset += nbytes
    if len(data) != offset:
        raise ModelFormatError(f"{path}: {len(data) - offset} trailing bytes after the last tensor")
    return HybridModel(config, params, int(header.get("seed", 0)), header.get("metadata") or {})
