"""Shared domain types and flat parameter-vector algebra.

Every model in the federation is one flat float64 vector. All protocol
arithmetic (combinations, distances, averages) happens on these vectors;
layer shapes only matter inside the learner.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "FederationError",
    "DimensionMismatch",
    "NonFiniteError",
    "NumericError",
    "CapacityError",
    "ConfigError",
    "ParamVector",
    "ClientId",
    "OptimizerState",
    "ClientState",
    "DPConfig",
    "FederationConfig",
    "STRATEGIES",
    "weighted_combination",
    "l2_distance",
    "uniform_average",
]


# ------------------------------------------------------------------
# Errors
# ------------------------------------------------------------------

class FederationError(Exception):
    """Base class for all errors raised by the simulator."""


class DimensionMismatch(FederationError):
    """Vectors or aligned lists with incompatible lengths were combined."""


class NonFiniteError(FederationError):
    """A NaN or Inf appeared where finite values are required."""


class NumericError(FederationError):
    """Training or evaluation produced non-finite intermediate values."""


class CapacityError(FederationError):
    """A data partition cannot supply the samples a client needs."""


class ConfigError(FederationError):
    """An experiment configuration failed validation."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"field '{field_name}': {message}")
        self.field_name = field_name


# ------------------------------------------------------------------
# Parameter vectors
# ------------------------------------------------------------------

ClientId = int  # index in [0, total_clients)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """A flat, immutable float64 vector holding one model's parameters."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise DimensionMismatch(f"parameter vector must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("parameter vector contains NaN or Inf")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def allclose(self, other: "ParamVector", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return self.dim == other.dim and np.allclose(
            self.values, other.values, atol=atol, rtol=rtol
        )


def _require_same_dim(a: ParamVector, b: ParamVector, what: str) -> None:
    if a.dim != b.dim:
        raise DimensionMismatch(f"{what}: dims {a.dim} != {b.dim}")


def weighted_combination(
    base: ParamVector, models: Sequence[ParamVector], weights: Sequence[float]
) -> ParamVector:
    """Move ``base`` toward ``models`` by simplex weights.

    Returns base + sum_n weights[n] * (models[n] - base). Weights must lie in
    [0, 1] and sum to either 0 (base is returned) or 1 within 1e-9. An exact
    one-hot weight vector returns the selected model itself so that adopting
    a single candidate is bit-for-bit lossless.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != len(models):
        raise DimensionMismatch(
            f"got {len(models)} models but {w.shape} weights"
        )
    if not np.all(np.isfinite(w)):
        raise NonFiniteError("weights contain NaN or Inf")
    if w.size and (w.min() < 0.0 or w.max() > 1.0):
        raise ValueError("weights must lie in [0, 1]")
    total = float(w.sum())
    if total != 0.0 and abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 0 or 1, got {total!r}")
    for m in models:
        _require_same_dim(base, m, "weighted_combination")

    if total == 0.0:
        return base
    hot = np.flatnonzero(w)
    if hot.size == 1 and w[hot[0]] == 1.0:
        return models[int(hot[0])]

    out = base.values.copy()
    for wn, m in zip(w, models):
        if wn != 0.0:
            out += wn * (m.values - base.values)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("combination produced non-finite entries")
    return ParamVector(out)


def l2_distance(a: ParamVector, b: ParamVector) -> float:
    """Euclidean distance between two parameter vectors."""
    _require_same_dim(a, b, "l2_distance")
    return float(np.linalg.norm(a.values - b.values))


def uniform_average(models: Sequence[ParamVector]) -> ParamVector:
    """Elementwise arithmetic mean of a nonempty list of models."""
    if not models:
        raise ValueError("cannot average an empty list of models")
    first = models[0]
    for m in models[1:]:
        _require_same_dim(first, m, "uniform_average")
    stacked = np.stack([m.values for m in models])
    return ParamVector(stacked.mean(axis=0))


# ------------------------------------------------------------------
# Client and federation configuration
# ------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-client optimizer bookkeeping carried across rounds."""

    lr: float  # current (decayed) learning rate


@dataclass
class ClientState:
    """One client's view of the federation.

    ``params`` is the output of the client's most recent local training (the
    model it uploads); ``prev_params`` is the model that training started
    from, which is also the baseline candidates are scored against in the
    next combination step.
    """

    client_id: ClientId
    params: ParamVector
    prev_params: ParamVector
    affinity_row: np.ndarray  # length K, scores for every peer
    optimizer_state: OptimizerState
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if self.params.dim != self.prev_params.dim:
            raise DimensionMismatch(
                f"client {self.client_id}: params dim {self.params.dim} "
                f"!= prev_params dim {self.prev_params.dim}"
            )
        train = set(map(int, self.train_idx))
        val = set(map(int, self.val_idx))
        test = set(map(int, self.test_idx))
        if train & val or train & test or val & test:
            raise ValueError(f"client {self.client_id}: train/val/test sets overlap")


@dataclass(frozen=True)
class DPConfig:
    """Differentially private SGD settings.

    The privacy loss itself is not computed here; runs report
    (noise multiplier, delta, clip norm, steps, sampling rate) so an
    external accountant can be applied.
    """

    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError("dp_clip_norm", "must be positive")
        if self.noise_multiplier < 0:
            raise ConfigError("dp_noise_multiplier", "must be >= 0")
        if not (0.0 < self.delta < 1.0):
            raise ConfigError("dp_delta", "must lie in (0, 1)")


STRATEGIES = (
    "fedfomo",
    "fedfomo_model_avg",
    "fedavg",
    "fedavg_share",
    "fedprox",
    "local",
)


@dataclass(frozen=True)
class FederationConfig:
    """All scalar knobs of one federation run."""

    total_clients: int
    active_per_round: int
    downloads_per_client: int
    seed: int
    epsilon: float = 0.3
    epsilon_decay: float = 0.05
    local_epochs: int = 5
    rounds: int = 20
    lr: float = 0.1
    lr_decay: float = 0.99
    momentum: float = 0.0
    weight_decay: float = 1e-4
    val_fraction: float = 0.2
    batch_size: int = 32
    strategy: str = "fedfomo"
    dp: DPConfig | None = None
    fedprox_mu: float = 0.1
    share_fraction: float = 0.0

    def __post_init__(self):
        if self.total_clients < 1:
            raise ConfigError("total_clients", "must be >= 1")
        if not (0 < self.active_per_round <= self.total_clients):
            raise ConfigError(
                "active_per_round",
                f"must lie in (0, {self.total_clients}], got {self.active_per_round}",
            )
        if not (0 <= self.downloads_per_client <= self.active_per_round - 1):
            raise ConfigError(
                "downloads_per_client",
                f"must lie in [0, active_per_round - 1], got {self.downloads_per_client}",
            )
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigError("epsilon", "must lie in [0, 1]")
        if self.epsilon_decay < 0:
            raise ConfigError("epsilon_decay", "must be >= 0")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs", "must be >= 0")
        if self.rounds < 1:
            raise ConfigError("rounds", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr", "must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError("lr_decay", "must lie in (0, 1]")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError("val_fraction", "must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError("strategy", f"must be one of {STRATEGIES}")
        if self.fedprox_mu < 0:
            raise ConfigError("fedprox_mu", "must be >= 0")
        if not (0.0 <= self.share_fraction < 1.0):
            raise ConfigError("share_fraction", "must lie in [0, 1)")
