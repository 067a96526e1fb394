"""Model architectures, loss/gradient math, and local SGD training.

Models are small enough to train with hand-derived backprop on flat float64
vectors: a linear softmax classifier and a one-hidden-layer tanh MLP. The
DP variant clips per-example gradients in closed form (no per-example
gradient tensors are materialized) so that with zero noise and a large clip
norm it follows the exact same arithmetic as plain SGD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    DimensionMismatch,
    DPConfig,
    NumericError,
    ParamVector,
)

__all__ = [
    "Architecture",
    "OptimizerConfig",
    "EvalResult",
    "init_params",
    "loss_and_grad",
    "evaluate",
    "train_local",
]

ARCH_KINDS = ("softmax_linear", "mlp_one_hidden")


@dataclass(frozen=True)
class Architecture:
    kind: str
    n_features: int
    n_classes: int
    hidden_units: int = 32

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.n_features < 1 or self.n_classes < 2:
            raise ValueError("need n_features >= 1 and n_classes >= 2")
        if self.kind == "mlp_one_hidden" and self.hidden_units < 1:
            raise ValueError("hidden_units must be >= 1")

    @property
    def param_count(self) -> int:
        f, c, h = self.n_features, self.n_classes, self.hidden_units
        if self.kind == "softmax_linear":
            return f * c + c
        return f * h + h + h * c + c


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.1
    lr_decay: float = 0.99  # multiplicative, applied once per federation round
    momentum: float = 0.0
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0 or not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr must be positive, lr_decay in (0, 1]")
        if not (0.0 <= self.momentum < 1.0) or self.weight_decay < 0:
            raise ValueError("momentum in [0, 1), weight_decay >= 0")


@dataclass(frozen=True)
class EvalResult:
    loss: float  # mean cross-entropy
    accuracy: float
    n_samples: int


# ------------------------------------------------------------------
# Parameter layout and forward/backward passes
# ------------------------------------------------------------------

def _views(arch: Architecture, theta: np.ndarray):
    """Reshape a flat vector into this architecture's weight matrices."""
    f, c = arch.n_features, arch.n_classes
    if arch.kind == "softmax_linear":
        w = theta[: f * c].reshape(f, c)
        b = theta[f * c :]
        return w, b
    h = arch.hidden_units
    ofs = 0
    w1 = theta[ofs : ofs + f * h].reshape(f, h)
    ofs += f * h
    b1 = theta[ofs : ofs + h]
    ofs += h
    w2 = theta[ofs : ofs + h * c].reshape(h, c)
    ofs += h * c
    b2 = theta[ofs:]
    return w1, b1, w2, b2


def init_params(arch: Architecture, seed) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    theta = np.zeros(arch.param_count)
    if arch.kind == "softmax_linear":
        w, _ = _views(arch, theta)
        limit = np.sqrt(6.0 / (arch.n_features + arch.n_classes))
        w[:] = rng.uniform(-limit, limit, size=w.shape)
    else:
        w1, _, w2, _ = _views(arch, theta)
        limit1 = np.sqrt(6.0 / (arch.n_features + arch.hidden_units))
        limit2 = np.sqrt(6.0 / (arch.hidden_units + arch.n_classes))
        w1[:] = rng.uniform(-limit1, limit1, size=w1.shape)
        w2[:] = rng.uniform(-limit2, limit2, size=w2.shape)
    return ParamVector(theta)


def _forward(arch: Architecture, theta: np.ndarray, x: np.ndarray):
    """Return (log_probs, hidden activations or None)."""
    if arch.kind == "softmax_linear":
        w, b = _views(arch, theta)
        logits = x @ w + b
        hidden = None
    else:
        w1, b1, w2, b2 = _views(arch, theta)
        pre = x @ w1 + b1
        if not np.all(np.isfinite(pre)):
            raise NumericError("non-finite activations in hidden layer")
        hidden = np.tanh(pre)
        logits = hidden @ w2 + b2
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite activations in output layer")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return log_probs, hidden


def _grad_sums(
    arch: Architecture,
    x: np.ndarray,
    hidden: np.ndarray | None,
    d_out: np.ndarray,
    d_hidden: np.ndarray | None,
) -> np.ndarray:
    """Flat vector of per-example gradient sums given backprop deltas."""
    if arch.kind == "softmax_linear":
        return np.concatenate([(x.T @ d_out).ravel(), d_out.sum(axis=0)])
    return np.concatenate(
        [
            (x.T @ d_hidden).ravel(),
            d_hidden.sum(axis=0),
            (hidden.T @ d_out).ravel(),
            d_out.sum(axis=0),
        ]
    )


def _backward_deltas(arch: Architecture, theta: np.ndarray, log_probs, hidden, y):
    """Per-example output/hidden deltas of mean cross-entropy (unscaled by 1/B)."""
    d_out = np.exp(log_probs)
    d_out[np.arange(y.shape[0]), y] -= 1.0
    if arch.kind == "softmax_linear":
        return d_out, None
    w2 = _views(arch, theta)[2]
    d_hidden = (d_out @ w2.T) * (1.0 - hidden * hidden)
    return d_out, d_hidden


def _check_batch(arch: Architecture, params: ParamVector, x: np.ndarray, y: np.ndarray):
    if x.ndim != 2 or x.shape[1] != arch.n_features:
        raise DimensionMismatch(f"batch features shape {x.shape} does not match architecture")
    if x.shape[0] == 0:
        raise ValueError("batch is empty")
    if y.shape[0] != x.shape[0]:
        raise DimensionMismatch("batch feature/label count mismatch")
    if params.dim != arch.param_count:
        raise DimensionMismatch(
            f"params dim {params.dim} != architecture param count {arch.param_count}"
        )


def loss_and_grad(
    params: ParamVector, arch: Architecture, x: np.ndarray, y: np.ndarray
) -> tuple[float, ParamVector]:
    """Mean cross-entropy over a batch and its exact analytic gradient."""
    _check_batch(arch, params, x, y)
    theta = params.values
    log_probs, hidden = _forward(arch, theta, x)
    n = x.shape[0]
    loss = -float(log_probs[np.arange(n), y].mean())
    d_out, d_hidden = _backward_deltas(arch, theta, log_probs, hidden, y)
    grad = _grad_sums(arch, x, hidden, d_out, d_hidden) / n
    return loss, ParamVector(grad)


def evaluate(params: ParamVector, arch: Architecture, x: np.ndarray, y: np.ndarray) -> EvalResult:
    """Deterministic full-split evaluation; no sampling."""
    _check_batch(arch, params, x, y)
    log_probs, _ = _forward(arch, params.values, x)
    n = x.shape[0]
    loss = -float(log_probs[np.arange(n), y].mean())
    correct = int((np.argmax(log_probs, axis=1) == y).sum())
    return EvalResult(loss=loss, accuracy=correct / n, n_samples=n)


# ------------------------------------------------------------------
# Local training
# ------------------------------------------------------------------

def _plain_batch_grad(arch, theta, x, y):
    log_probs, hidden = _forward(arch, theta, x)
    n = x.shape[0]
    loss = -float(log_probs[np.arange(n), y].mean())
    d_out, d_hidden = _backward_deltas(arch, theta, log_probs, hidden, y)
    return loss, _grad_sums(arch, x, hidden, d_out, d_hidden) / n


def _dp_batch_grad(arch, theta, x, y, dp: DPConfig, noise_rng, clip_hook):
    """Clip per-example gradients to dp.clip_norm, sum, noise, average.

    Per-example gradient norms have closed forms for both architectures
    (each layer's gradient is an outer product of an activation and a
    delta), so clipping is a per-row rescale of the backprop deltas.
    """
    log_probs, hidden = _forward(arch, theta, x)
    n = x.shape[0]
    loss = -float(log_probs[np.arange(n), y].mean())
    d_out, d_hidden = _backward_deltas(arch, theta, log_probs, hidden, y)

    out_sq = (d_out * d_out).sum(axis=1)
    if arch.kind == "softmax_linear":
        norm_sq = out_sq * (1.0 + (x * x).sum(axis=1))
    else:
        hid_sq = (d_hidden * d_hidden).sum(axis=1)
        norm_sq = hid_sq * (1.0 + (x * x).sum(axis=1)) + out_sq * (
            1.0 + (hidden * hidden).sum(axis=1)
        )
    norms = np.sqrt(norm_sq)
    scale = np.minimum(1.0, dp.clip_norm / np.maximum(norms, 1e-32))
    if clip_hook is not None:
        clip_hook(np.minimum(norms, dp.clip_norm))

    d_out = d_out * scale[:, None]
    if d_hidden is not None:
        d_hidden = d_hidden * scale[:, None]
    sums = _grad_sums(arch, x, hidden, d_out, d_hidden)
    sums = sums + noise_rng.normal(0.0, dp.noise_multiplier * dp.clip_norm, size=sums.shape)
    return loss, sums / n


def train_local(
    params: ParamVector,
    arch: Architecture,
    x: np.ndarray,
    y: np.ndarray,
    opt: OptimizerConfig,
    epochs: int,
    batch_size: int,
    seed,
    lr: float | None = None,
    dp: DPConfig | None = None,
    fedprox_mu: float = 0.0,
    anchor: ParamVector | None = None,
    clip_hook: Callable[[np.ndarray], None] | None = None,
) -> ParamVector:
    """Run seeded mini-batch SGD for the given number of epochs.

    The input vector is never modified. ``lr`` overrides opt.lr for this call
    (the orchestrator passes the round-decayed rate). With ``dp`` set,
    per-example gradients are clipped to dp.clip_norm, summed, perturbed with
    Gaussian noise of std noise_multiplier * clip_norm, and averaged. With
    ``fedprox_mu`` > 0 the proximal gradient mu * (theta - anchor) is added,
    anchored at the round-start parameters by default. The momentum buffer
    starts at zero for each call.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    if x.shape[0] == 0:
        raise ValueError("training split is empty")
    if epochs == 0:
        return params

    # Derive batch and noise streams without mutating a caller-held
    # SeedSequence, so repeated calls with the same seed are identical.
    if isinstance(seed, np.random.SeedSequence):
        entropy, key = seed.entropy, seed.spawn_key
    else:
        entropy, key = seed, ()
    batch_rng = np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key + (0,)))
    noise_rng = np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=key + (1,)))
    step_lr = opt.lr if lr is None else lr
    theta = params.values.copy()
    velocity = np.zeros_like(theta)
    anchor_vals = (anchor if anchor is not None else params).values
    n = x.shape[0]

    for epoch in range(epochs):
        order = batch_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = x[idx], y[idx]
            if dp is not None:
                loss, grad = _dp_batch_grad(arch, theta, xb, yb, dp, noise_rng, clip_hook)
            else:
                loss, grad = _plain_batch_grad(arch, theta, xb, yb)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch offset {start}"
                )
            if fedprox_mu != 0.0:
                grad = grad + fedprox_mu * (theta - anchor_vals)
            if opt.weight_decay != 0.0:
                grad = grad + opt.weight_decay * theta
            velocity = opt.momentum * velocity + grad
            theta = theta - step_lr * velocity
    return ParamVector(theta)
