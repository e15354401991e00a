"""Client-side training strategies: plain/robust-loss SGD, mixup, co-teaching.

Batches come from a per-epoch seeded shuffle; mixup draws consume a separate
named stream so that stubbing the mixing coefficient to 1 reproduces the
plain-CE trajectory bit for bit.  One call trains one client for E epochs
and is single-threaded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .datasets import LabeledDataset
from .losses import LOSS_KINDS, backward, loss_ce
from .models import ModelParams, forward_cached

METHODS = ("ce", "mixup", "sce", "gce", "mae", "coteaching")

_METHOD_PARAM_KEYS = {
    "ce": set(),
    "mae": set(),
    "mixup": {"alpha"},
    "sce": {"alpha", "beta", "log_clip"},
    "gce": {"q"},
    "coteaching": {"forget_rate", "ramp_rounds"},
}

MIXUP_DEFAULT_ALPHA = 1.0
COTEACHING_DEFAULT_FORGET_RATE = 0.2
COTEACHING_DEFAULT_RAMP_ROUNDS = 10


@dataclass(frozen=True)
class TrainerConfig:
    """Local-training hyperparameters shared by every strategy."""

    method: str = "ce"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 5
    method_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown training method {self.method!r}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        unknown = set(self.method_params) - _METHOD_PARAM_KEYS[self.method]
        if unknown:
            raise ValueError(f"method_params keys {sorted(unknown)} invalid for method {self.method!r}")

    @property
    def loss_kind(self) -> str:
        kind = "ce" if self.method in ("mixup", "coteaching") else self.method
        assert kind in LOSS_KINDS
        return kind


@dataclass
class TrainStats:
    """Mean batch loss per epoch for one local training call."""

    epoch_losses: list[float] = field(default_factory=list)

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.epoch_losses)) if self.epoch_losses else float("nan")

    @property
    def first_epoch_loss(self) -> float:
        return self.epoch_losses[0]

    @property
    def last_epoch_loss(self) -> float:
        return self.epoch_losses[-1]


def sgd_step(
    values: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float
) -> tuple[np.ndarray, np.ndarray]:
    """Momentum SGD: v' = mu*v + g, w' = w - lr*v'.

    Weight decay is folded into ``grad`` by the loss backward, not here.
    """
    if grad.shape != values.shape or velocity.shape != values.shape:
        raise ValueError("grad/velocity shape must match parameter shape")
    velocity = momentum * velocity + grad
    return values - lr * velocity, velocity


def _epoch_batches(n: int, batch_size: int, shuffle_gen: np.random.Generator):
    perm = shuffle_gen.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup_batch(
    x: np.ndarray, onehot: np.ndarray, lam: float, perm: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of a batch with its permuted copy; targets stay on the simplex."""
    mixed_x = lam * x + (1.0 - lam) * x[perm]
    mixed_t = lam * onehot + (1.0 - lam) * onehot[perm]
    return mixed_x, mixed_t


def train_local(
    ds: LabeledDataset,
    params: ModelParams,
    cfg: TrainerConfig,
    seed: int,
    lam_sampler=None,
) -> tuple[ModelParams, TrainStats]:
    """E epochs of mini-batch SGD with the configured loss or mixup.

    ``lam_sampler(gen, alpha) -> lam`` overrides the Beta(alpha, alpha) draw
    (test stubbing).  Co-teaching needs two models; use
    :func:`train_local_coteaching`.
    """
    if cfg.method == "coteaching":
        raise ValueError("co-teaching trains two models; call train_local_coteaching")
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    values = params.values.copy()
    velocity = np.zeros_like(values)
    stats = TrainStats()
    mixup = cfg.method == "mixup"
    mixup_alpha = cfg.method_params.get("alpha", MIXUP_DEFAULT_ALPHA)
    mix_gen = rng.stream(seed, "mixup") if mixup else None

    for epoch in range(cfg.epochs):
        shuffle_gen = rng.stream(seed, "shuffle", epoch)
        batch_losses = []
        for batch_idx in _epoch_batches(len(ds), cfg.batch_size, shuffle_gen):
            x = ds.features[batch_idx]
            y = ds.labels[batch_idx]
            model = ModelParams(values=values, layout=params.layout)
            if mixup:
                lam = float(lam_sampler(mix_gen, mixup_alpha)) if lam_sampler else float(mix_gen.beta(mixup_alpha, mixup_alpha))
                perm = mix_gen.permutation(len(batch_idx))
                mixed_x, mixed_t = mixup_batch(x, _one_hot(y, ds.num_classes), lam, perm)
                out = backward(model, mixed_x, mixed_t, kind="soft_ce", weight_decay=cfg.weight_decay)
            else:
                out = backward(
                    model, x, y, kind=cfg.loss_kind, method_params=cfg.method_params, weight_decay=cfg.weight_decay
                )
            values, velocity = sgd_step(values, out.grad, velocity, cfg.lr, cfg.momentum)
            if not np.all(np.isfinite(values)):
                raise FloatingPointError("local training diverged to non-finite parameters")
            batch_losses.append(out.value)
        stats.epoch_losses.append(float(np.mean(batch_losses)))
    return ModelParams(values=values, layout=params.layout), stats


def coteaching_keep_fraction(round_t: int, forget_rate: float, ramp_rounds: int) -> float:
    """R(t) = 1 - forget_rate * min(t / ramp_rounds, 1)."""
    return 1.0 - forget_rate * min(round_t / ramp_rounds, 1.0)


def small_loss_selection(per_sample: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Indices of the lowest-loss samples; at least one sample is always kept."""
    keep = max(1, int(np.floor(keep_fraction * len(per_sample))))
    if keep >= len(per_sample):  # keep original order so forget_rate=0 is a no-op
        return np.arange(len(per_sample))
    order = np.argsort(per_sample, kind="stable")
    return order[:keep]


def train_local_coteaching(
    ds: LabeledDataset,
    params_a: ModelParams,
    params_b: ModelParams,
    cfg: TrainerConfig,
    seed: int,
    round_t: int = 1,
) -> tuple[ModelParams, ModelParams, TrainStats]:
    """Cross-update two networks on each other's small-loss samples.

    Per batch, each network ranks per-sample CE losses and keeps the
    smallest R(t) fraction; each network then steps on the subset its peer
    selected.  Both networks share the batch schedule.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    if params_a.layout != params_b.layout:
        raise ValueError("co-teaching networks must share a layout")
    forget_rate = cfg.method_params.get("forget_rate", COTEACHING_DEFAULT_FORGET_RATE)
    ramp_rounds = cfg.method_params.get("ramp_rounds", COTEACHING_DEFAULT_RAMP_ROUNDS)
    if not 0.0 <= forget_rate < 1.0:
        raise ValueError("forget_rate must lie in [0, 1)")
    keep_fraction = coteaching_keep_fraction(round_t, forget_rate, ramp_rounds)

    values_a = params_a.values.copy()
    values_b = params_b.values.copy()
    vel_a = np.zeros_like(values_a)
    vel_b = np.zeros_like(values_b)
    stats = TrainStats()

    for epoch in range(cfg.epochs):
        shuffle_gen = rng.stream(seed, "shuffle", epoch)
        batch_losses = []
        for batch_idx in _epoch_batches(len(ds), cfg.batch_size, shuffle_gen):
            x = ds.features[batch_idx]
            y = ds.labels[batch_idx]
            model_a = ModelParams(values=values_a, layout=params_a.layout)
            model_b = ModelParams(values=values_b, layout=params_b.layout)
            probs_a, _ = forward_cached(model_a, x)
            probs_b, _ = forward_cached(model_b, x)
            sel_a = small_loss_selection(loss_ce(probs_a, y).per_sample, keep_fraction)
            sel_b = small_loss_selection(loss_ce(probs_b, y).per_sample, keep_fraction)
            # each network learns from its peer's selection
            out_a = backward(model_a, x[sel_b], y[sel_b], kind="ce", weight_decay=cfg.weight_decay)
            out_b = backward(model_b, x[sel_a], y[sel_a], kind="ce", weight_decay=cfg.weight_decay)
            values_a, vel_a = sgd_step(values_a, out_a.grad, vel_a, cfg.lr, cfg.momentum)
            values_b, vel_b = sgd_step(values_b, out_b.grad, vel_b, cfg.lr, cfg.momentum)
            if not (np.all(np.isfinite(values_a)) and np.all(np.isfinite(values_b))):
                raise FloatingPointError("local training diverged to non-finite parameters")
            batch_losses.append(0.5 * (out_a.value + out_b.value))
        stats.epoch_losses.append(float(np.mean(batch_losses)))
    return (
        ModelParams(values=values_a, layout=params_a.layout),
        ModelParams(values=values_b, layout=params_b.layout),
        stats,
    )
