"""Desk-scale differentiable models: linear-softmax and one-hidden-layer MLP.

Parameters live in a single flat float64 vector; the layout descriptor maps
slices of it to weight matrices.  Gradients are hand-derived in losses.py.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import LayoutMismatchError


@dataclass(frozen=True)
class LinearSoftmaxLayout:
    """Affine map to class logits: W (C x d) plus bias (C)."""

    dim: int
    num_classes: int

    @property
    def param_count(self) -> int:
        return self.num_classes * self.dim + self.num_classes

    def to_dict(self) -> dict:
        return {"kind": "linear-softmax", "dim": self.dim, "num_classes": self.num_classes}


@dataclass(frozen=True)
class MLPLayout:
    """One hidden layer (tanh or relu) followed by an affine map to logits."""

    dim: int
    hidden: int
    num_classes: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def param_count(self) -> int:
        return self.hidden * self.dim + self.hidden + self.num_classes * self.hidden + self.num_classes

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "dim": self.dim,
            "hidden": self.hidden,
            "num_classes": self.num_classes,
            "activation": self.activation,
        }


Layout = LinearSoftmaxLayout | MLPLayout


def layout_from_dict(doc: dict) -> Layout:
    kind = doc.get("kind")
    if kind == "linear-softmax":
        return LinearSoftmaxLayout(dim=int(doc["dim"]), num_classes=int(doc["num_classes"]))
    if kind == "mlp":
        return MLPLayout(
            dim=int(doc["dim"]),
            hidden=int(doc["hidden"]),
            num_classes=int(doc["num_classes"]),
            activation=doc.get("activation", "tanh"),
        )
    raise ValueError(f"unknown layout kind {kind!r}")


@dataclass(frozen=True)
class ModelParams:
    """Flat float64 parameter vector tied to its layout."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or len(values) != self.layout.param_count:
            raise ValueError(
                f"expected {self.layout.param_count} parameters for layout, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams(values=self.values.copy(), layout=self.layout)


def _linear_views(layout: LinearSoftmaxLayout, values: np.ndarray):
    c, d = layout.num_classes, layout.dim
    w = values[: c * d].reshape(c, d)
    b = values[c * d :]
    return w, b


def _mlp_views(layout: MLPLayout, values: np.ndarray):
    d, h, c = layout.dim, layout.hidden, layout.num_classes
    i = 0
    w1 = values[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = values[i : i + h]
    i += h
    w2 = values[i : i + c * h].reshape(c, h)
    i += c * h
    b2 = values[i : i + c]
    return w1, b1, w2, b2


def init_params(layout: Layout, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, from a named stream."""
    gen = rng.stream(seed, "init")
    values = np.empty(layout.param_count, dtype=np.float64)
    if isinstance(layout, LinearSoftmaxLayout):
        bound = 1.0 / np.sqrt(layout.dim)
        values[:] = gen.uniform(-bound, bound, size=layout.param_count)
    else:
        d, h, c = layout.dim, layout.hidden, layout.num_classes
        b_in = 1.0 / np.sqrt(d)
        b_hid = 1.0 / np.sqrt(h)
        n1 = h * d + h
        values[:n1] = gen.uniform(-b_in, b_in, size=n1)
        values[n1:] = gen.uniform(-b_hid, b_hid, size=layout.param_count - n1)
    return ModelParams(values=values, layout=layout)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class-probability rows (softmax output) for a batch of feature rows."""
    probs, _ = forward_cached(params, x)
    return probs


def forward_cached(params: ModelParams, x: np.ndarray):
    """Forward pass returning probabilities plus the cache backward needs."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layout.dim:
        raise LayoutMismatchError(
            f"input of shape {x.shape} does not match layout dim {params.layout.dim}"
        )
    if isinstance(params.layout, LinearSoftmaxLayout):
        w, b = _linear_views(params.layout, params.values)
        probs = _softmax(x @ w.T + b)
        return probs, {"x": x}
    w1, b1, w2, b2 = _mlp_views(params.layout, params.values)
    z1 = x @ w1.T + b1
    hidden = np.tanh(z1) if params.layout.activation == "tanh" else np.maximum(z1, 0.0)
    probs = _softmax(hidden @ w2.T + b2)
    return probs, {"x": x, "z1": z1, "hidden": hidden}


def logit_grad_to_param_grad(params: ModelParams, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    """Backpropagate mean-loss logit gradients (already 1/B-scaled) to a flat vector."""
    layout = params.layout
    grad = np.empty(layout.param_count, dtype=np.float64)
    if isinstance(layout, LinearSoftmaxLayout):
        c, d = layout.num_classes, layout.dim
        grad[: c * d] = (dlogits.T @ cache["x"]).ravel()
        grad[c * d :] = dlogits.sum(axis=0)
        return grad
    w1, b1, w2, b2 = _mlp_views(layout, params.values)
    d, h, c = layout.dim, layout.hidden, layout.num_classes
    dw2 = dlogits.T @ cache["hidden"]
    db2 = dlogits.sum(axis=0)
    dhidden = dlogits @ w2
    if layout.activation == "tanh":
        dz1 = dhidden * (1.0 - cache["hidden"] ** 2)
    else:
        dz1 = dhidden * (cache["z1"] > 0.0)
    i = 0
    grad[i : i + h * d] = (dz1.T @ cache["x"]).ravel()
    i += h * d
    grad[i : i + h] = dz1.sum(axis=0)
    i += h
    grad[i : i + c * h] = dw2.ravel()
    i += c * h
    grad[i:] = db2
    return grad


CHECKPOINT_MAGIC = "noisyfl-checkpoint"


def save_checkpoint(params: ModelParams, path: str, round_t: int = 0, seed: int = 0) -> None:
    """JSON header line + little-endian float64 payload."""
    header = {
        "format": CHECKPOINT_MAGIC,
        "layout": params.layout.to_dict(),
        "round": int(round_t),
        "seed": int(seed),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a parameter checkpoint")
    layout = layout_from_dict(header["layout"])
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(values=values, layout=layout), header
