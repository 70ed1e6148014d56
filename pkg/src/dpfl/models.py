"""Small softmax classifiers with exact per-sample gradients.

Parameters live in one flat float64 vector. Each affine layer stores its
weight matrix (out, in) followed by its bias (out,). The last affine layer is
the head; everything before it is the body.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dpfl.errors import FormatError, ParameterError, ShapeError

KINDS = {"linear": 0, "mlp1": 1, "mlp2": 2}
_CKPT_MAGIC = b"DPFLCKPT"


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}")
        hidden = tuple(int(h) for h in self.hidden_dims)
        object.__setattr__(self, "hidden_dims", hidden)
        if len(hidden) != KINDS[self.kind]:
            raise ParameterError(
                f"{self.kind} needs {KINDS[self.kind]} hidden layer(s), got {len(hidden)}"
            )
        if self.activation != "relu":
            raise ParameterError(f"unsupported activation {self.activation!r}")
        if self.input_dim < 1 or any(h < 1 for h in hidden):
            raise ParameterError("all layer widths must be >= 1")
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        entries, offset = [], 0
        widths = self.widths
        for l in range(len(widths) - 1):
            w_shape = (widths[l + 1], widths[l])
            entries.append((f"layer{l}.weight", w_shape, offset))
            offset += w_shape[0] * w_shape[1]
            entries.append((f"layer{l}.bias", (widths[l + 1],), offset))
            offset += widths[l + 1]
        return entries

    @property
    def num_params(self) -> int:
        w = self.widths
        return sum(w[l + 1] * (w[l] + 1) for l in range(len(w) - 1))

    @property
    def head_range(self) -> tuple[int, int]:
        w = self.widths
        return (self.num_params - w[-1] * (w[-2] + 1), self.num_params)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            d["kind"], int(d["input_dim"]), int(d["num_classes"]),
            tuple(d.get("hidden_dims", ())), d.get("activation", "relu"),
        )


@dataclass(frozen=True)
class ParameterVector:
    values: np.ndarray
    layout: tuple = field(repr=False)
    head_range: tuple[int, int]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ShapeError("parameters must be a non-empty flat vector")
        end = 0
        for name, shape, offset in self.layout:
            if offset != end:
                raise ShapeError(f"layout entry {name} does not tile the vector")
            end = offset + int(np.prod(shape))
        if end != values.size:
            raise ShapeError(f"layout covers {end} values, vector has {values.size}")
        lo, hi = self.head_range
        if not (0 <= lo < hi == values.size):
            raise ShapeError(f"head range {self.head_range} must end the vector")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(tuple(e) for e in self.layout))

    @property
    def dim(self) -> int:
        return self.values.size

    @property
    def body_range(self) -> tuple[int, int]:
        return (0, self.head_range[0])

    @property
    def head(self) -> np.ndarray:
        return self.values[self.head_range[0] : self.head_range[1]]

    @property
    def body(self) -> np.ndarray:
        return self.values[: self.head_range[0]]

    def with_values(self, values) -> "ParameterVector":
        return ParameterVector(np.array(values, dtype=np.float64), self.layout, self.head_range)

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            name: self.values[offset : offset + int(np.prod(shape))].reshape(shape)
            for name, shape, offset in self.layout
        }


@dataclass(frozen=True)
class PerSampleGradients:
    rows: np.ndarray
    loss_values: np.ndarray
    head_range: tuple[int, int]

    def __len__(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def make_params(spec: ModelSpec, values) -> ParameterVector:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (spec.num_params,):
        raise ShapeError(f"{spec.kind} expects {spec.num_params} parameters, got {values.shape}")
    return ParameterVector(values, tuple(spec.layout()), spec.head_range)


def init_params(spec: ModelSpec, seed: int, scale: float = 1.0) -> ParameterVector:
    """Fan-in scaled uniform weights in [-scale/sqrt(fan_in), scale/sqrt(fan_in)], zero biases."""
    if not scale > 0:
        raise ParameterError(f"scale must be positive, got {scale!r}")
    rng = np.random.default_rng(seed)
    values = np.zeros(spec.num_params)
    for name, shape, offset in spec.layout():
        if name.endswith(".weight"):
            bound = scale / np.sqrt(shape[1])
            size = shape[0] * shape[1]
            values[offset : offset + size] = rng.uniform(-bound, bound, size)
    return make_params(spec, values)


def _check_features(spec: ModelSpec, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"expected features with {spec.input_dim} columns, got shape {x.shape}")
    return x


def _weights(spec: ModelSpec, params: ParameterVector):
    if params.dim != spec.num_params:
        raise ShapeError(f"{spec.kind} expects {spec.num_params} parameters, got {params.dim}")
    t = params.tensors()
    n_layers = len(spec.widths) - 1
    return [(t[f"layer{l}.weight"], t[f"layer{l}.bias"]) for l in range(n_layers)]


def _forward_cache(spec, params, x):
    layers = _weights(spec, params)
    acts, pre = [x], []
    a = x
    for l, (w, b) in enumerate(layers):
        z = a @ w.T + b
        pre.append(z)
        if l < len(layers) - 1:
            a = np.maximum(z, 0.0)
            acts.append(a)
    logits = pre[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return layers, acts, pre, log_probs


def forward(spec: ModelSpec, params: ParameterVector, features) -> np.ndarray:
    """Class probabilities, one softmax row per input row."""
    x = _check_features(spec, features)
    *_, log_probs = _forward_cache(spec, params, x)
    return np.exp(log_probs)


def sample_losses(spec: ModelSpec, params: ParameterVector, features, labels) -> np.ndarray:
    """Per-sample cross-entropy."""
    x = _check_features(spec, features)
    y = np.asarray(labels, dtype=np.int64)
    *_, log_probs = _forward_cache(spec, params, x)
    return -log_probs[np.arange(y.size), y]


def _backward(spec, params, features, labels, per_sample: bool, head_only: bool = False):
    x = _check_features(spec, features)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ParameterError("batch is empty")
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{y.shape[0]} labels for {x.shape[0]} samples")
    if y.min() < 0 or y.max() >= spec.num_classes:
        raise ShapeError(f"labels must lie in [0, {spec.num_classes})")
    layers, acts, pre, log_probs = _forward_cache(spec, params, x)
    n = x.shape[0]
    losses = -log_probs[np.arange(n), y]

    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    parts: list = [None] * (2 * len(layers))
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        a_prev = acts[l]
        if per_sample:
            parts[2 * l] = np.einsum("no,ni->noi", delta, a_prev).reshape(n, -1)
            parts[2 * l + 1] = delta
        else:
            parts[2 * l] = (delta.T @ a_prev).ravel() / n
            parts[2 * l + 1] = delta.mean(axis=0)
        if head_only:
            parts = parts[2 * l :]
            break
        if l > 0:
            delta = (delta @ w) * (pre[l - 1] > 0)
    axis = 1 if per_sample else 0
    return np.concatenate(parts, axis=axis), losses


def per_sample_gradients(
    spec: ModelSpec, params: ParameterVector, features, labels, head_only: bool = False
) -> PerSampleGradients:
    """Cross-entropy gradient of every sample, one flat row each.

    With ``head_only`` the backward pass stops at the head and the result is
    what ``restrict(..., "head")`` would return, without computing body rows.
    """
    rows, losses = _backward(spec, params, features, labels, per_sample=True, head_only=head_only)
    if head_only:
        lo, hi = params.head_range
        return PerSampleGradients(rows, losses, (0, hi - lo))
    return PerSampleGradients(rows, losses, params.head_range)


def batch_gradient(spec: ModelSpec, params: ParameterVector, features, labels) -> np.ndarray:
    """Mean cross-entropy gradient over the batch, without materialising per-sample rows."""
    grad, _ = _backward(spec, params, features, labels, per_sample=False)
    return grad


def clipped_mean_gradient(
    spec: ModelSpec, params: ParameterVector, features, labels, clip_norm: float, head_only: bool = False
) -> np.ndarray:
    """Mean of per-sample gradients, each first scaled to L2 norm at most ``clip_norm``.

    Equal to ``clip_rows(per_sample_gradients(...).rows).mean(0)`` but never
    forms the (n, d) matrix: a sample's squared gradient norm for an affine
    layer is |delta|^2 * (|a_prev|^2 + 1).
    """
    x = _check_features(spec, features)
    y = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise ParameterError("batch is empty")
    layers, acts, pre, log_probs = _forward_cache(spec, params, x)
    n = x.shape[0]
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    deltas = {}
    sq_norm = np.zeros(n)
    for l in range(len(layers) - 1, -1, -1):
        deltas[l] = delta
        sq_norm += np.einsum("no,no->n", delta, delta) * (np.einsum("ni,ni->n", acts[l], acts[l]) + 1.0)
        if head_only:
            break
        if l > 0:
            delta = (delta @ layers[l][0]) * (pre[l - 1] > 0)
    scale = 1.0 / np.maximum(1.0, np.sqrt(sq_norm) / clip_norm)
    parts = []
    for l in sorted(deltas):
        d = deltas[l] * scale[:, None]
        parts.append((d.T @ acts[l]).ravel() / n)
        parts.append(d.sum(axis=0) / n)
    return np.concatenate(parts)


def evaluate(spec: ModelSpec, params: ParameterVector, dataset) -> tuple[float, float]:
    """Return (accuracy, mean cross-entropy). Ties go to the smallest class index."""
    if len(dataset.labels) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    x = _check_features(spec, dataset.features)
    *_, log_probs = _forward_cache(spec, params, x)
    y = dataset.labels
    acc = float(np.mean(np.argmax(log_probs, axis=1) == y))
    loss = float(-np.mean(log_probs[np.arange(y.size), y]))
    return acc, loss


def restrict(gradients: PerSampleGradients, which: str = "full") -> PerSampleGradients:
    if which == "full":
        return gradients
    if which == "head":
        lo, hi = gradients.head_range
        return PerSampleGradients(gradients.rows[:, lo:hi], gradients.loss_values, (0, hi - lo))
    raise ParameterError(f"unknown restriction {which!r}")


def save_params(path, spec: ModelSpec, params: ParameterVector) -> None:
    """Checkpoint layout: magic, uint32 header length, JSON header, little-endian float64 values."""
    header = json.dumps(
        {"spec": spec.to_dict(), "d": params.dim, "head_range": list(params.head_range)},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> tuple[ModelSpec, ParameterVector]:
    buf = Path(path).read_bytes()
    if buf[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<I", buf[8:12])
    header = json.loads(buf[12 : 12 + hlen])
    spec = ModelSpec.from_dict(header["spec"])
    values = np.frombuffer(buf[12 + hlen :], dtype="<f8").astype(np.float64)
    if values.size != header["d"]:
        raise FormatError(f"{path}: header says d={header['d']}, payload holds {values.size}")
    params = make_params(spec, values)
    if list(params.head_range) != header["head_range"]:
        raise FormatError(f"{path}: head range does not match the model spec")
    return spec, params
