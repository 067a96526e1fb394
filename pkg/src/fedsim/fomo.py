"""First-order model combination weights, affinity tracking, and routing.

Each candidate model is scored by how much it improves the requesting
client's validation loss per unit of parameter distance from the client's
baseline. Positive scores are normalized onto the simplex and drive a
personalized update; the raw (possibly negative) scores accumulate into a
per-client affinity row that steers which models the server routes to whom,
with epsilon-greedy exploration on top.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (
    ClientId,
    NonFiniteError,
    ParamVector,
    l2_distance,
    uniform_average,
    weighted_combination,
)

__all__ = [
    "DISTANCE_FLOOR",
    "CandidateModel",
    "WeightVector",
    "DownloadPlan",
    "initial_affinity",
    "fomo_raw_weights",
    "normalize_weights",
    "apply_fomo_update",
    "fomo_model_average_weights",
    "fomo_model_average_raw",
    "update_affinity",
    "select_downloads",
]

# Keeps the score finite when a candidate coincides with the baseline; the
# zero numerator (equal losses) is what drives such weights to ~0.
DISTANCE_FLOOR = 1e-8

# Caps the total affinity drift per round to [-1, 1] regardless of the loss
# scale, keeping rows comparable across rounds.
AFFINITY_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class CandidateModel:
    """A downloadable model with its loss on the requester's validation split."""

    owner: ClientId
    params: ParamVector
    val_loss: float

    def __post_init__(self):
        if not np.isfinite(self.val_loss):
            raise NonFiniteError(f"candidate from client {self.owner}: non-finite val loss")


@dataclass(frozen=True)
class WeightVector:
    raw: np.ndarray  # first-order scores, may be negative
    normalized: np.ndarray  # clamped to >= 0, sums to 1 or 0

    @property
    def is_zero(self) -> bool:
        return float(self.normalized.sum()) == 0.0


@dataclass(frozen=True)
class DownloadPlan:
    requester: ClientId
    chosen: tuple[ClientId, ...]
    explored: tuple[bool, ...]  # per slot: filled by exploration, not affinity

    def __post_init__(self):
        if self.requester in self.chosen:
            raise ValueError("a client cannot download its own stored model")
        if len(set(self.chosen)) != len(self.chosen):
            raise ValueError("duplicate download targets")


def initial_affinity(n_clients: int) -> np.ndarray:
    """Identity matrix: off-diagonal scores start equal (ties broken by id)."""
    return np.eye(n_clients)


# ------------------------------------------------------------------
# Weight computation and the personalized update
# ------------------------------------------------------------------

def fomo_raw_weights(
    baseline_params: ParamVector,
    baseline_loss: float,
    candidates: Sequence[CandidateModel],
) -> np.ndarray:
    """Score each candidate: validation-loss improvement over the baseline,
    divided by the parameter distance it takes to get there."""
    if not candidates:
        raise ValueError("need at least one candidate")
    if not np.isfinite(baseline_loss):
        raise NonFiniteError("baseline loss is not finite")
    raw = np.empty(len(candidates))
    for n, cand in enumerate(candidates):
        dist = max(l2_distance(cand.params, baseline_params), DISTANCE_FLOOR)
        raw[n] = (baseline_loss - cand.val_loss) / dist
    return raw


def normalize_weights(raw: np.ndarray) -> WeightVector:
    """Clamp negative scores to zero and normalize the rest onto the simplex.

    If no score is positive the normalized vector is all zeros, which makes
    the update fall back to the baseline parameters.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NonFiniteError("raw weights contain NaN or Inf")
    clamped = np.maximum(raw, 0.0)
    total = clamped.sum()
    normalized = clamped / total if total > 0.0 else np.zeros_like(clamped)
    return WeightVector(raw=raw, normalized=normalized)


def apply_fomo_update(
    baseline_params: ParamVector,
    candidates: Sequence[CandidateModel],
    weights: WeightVector,
) -> ParamVector:
    """Move the baseline toward the weighted candidates; all-zero weights
    return the baseline unchanged."""
    if len(candidates) != weights.normalized.shape[0]:
        raise ValueError("weights not aligned with candidates")
    if weights.is_zero:
        return baseline_params
    return weighted_combination(
        baseline_params, [c.params for c in candidates], weights.normalized
    )


def fomo_model_average_weights(
    val_loss_fn: Callable[[ParamVector], float],
    models: Sequence[ParamVector],
    n: int,
) -> float:
    """Leave-one-out score for model n against the average of all models.

    Positive when including model n lowers the requester's validation loss,
    i.e. the average without it does worse than the average with it.
    """
    if len(models) < 2:
        raise ValueError("need at least 2 models for a leave-one-out score")
    without_n = [m for j, m in enumerate(models) if j != n]
    return val_loss_fn(uniform_average(without_n)) - val_loss_fn(uniform_average(models))


def fomo_model_average_raw(
    val_loss_fn: Callable[[ParamVector], float], models: Sequence[ParamVector]
) -> np.ndarray:
    """Leave-one-out scores for every model (shares the all-model average)."""
    if len(models) < 2:
        raise ValueError("need at least 2 models for leave-one-out scores")
    loss_all = val_loss_fn(uniform_average(models))
    raw = np.empty(len(models))
    for n in range(len(models)):
        without_n = [m for j, m in enumerate(models) if j != n]
        raw[n] = val_loss_fn(uniform_average(without_n)) - loss_all
    return raw


# ------------------------------------------------------------------
# Affinity maintenance and download selection
# ------------------------------------------------------------------

def update_affinity(
    row: np.ndarray, candidates: Sequence[CandidateModel], raw: np.ndarray
) -> np.ndarray:
    """Add each candidate's raw score (normalized by total magnitude) to its
    owner's entry; entries of non-candidates are untouched."""
    if len(candidates) != np.asarray(raw).shape[0]:
        raise ValueError("raw scores not aligned with candidates")
    out = np.array(row, dtype=np.float64, copy=True)
    denom = max(float(np.abs(raw).sum()), AFFINITY_NORM_FLOOR)
    for cand, score in zip(candidates, raw):
        out[cand.owner] += score / denom
    return out


def select_downloads(
    row: np.ndarray,
    requester: ClientId,
    available: Iterable[ClientId],
    max_downloads: int,
    epsilon: float,
    rng: np.random.Generator,
) -> DownloadPlan:
    """Fill up to ``max_downloads`` slots from the available uploads.

    Each slot independently explores with probability epsilon (uniform over
    the remaining candidates); otherwise it takes the highest-affinity
    remaining candidate, ties broken toward the lower client id.
    """
    if max_downloads < 0:
        raise ValueError("max_downloads must be >= 0")
    remaining = sorted(set(available) - {requester})
    chosen: list[ClientId] = []
    explored: list[bool] = []
    for _ in range(min(max_downloads, len(remaining))):
        explore = bool(rng.random() < epsilon)
        if explore:
            pick = remaining[int(rng.integers(len(remaining)))]
        else:
            pick = min(remaining, key=lambda j: (-row[j], j))
        chosen.append(pick)
        explored.append(explore)
        remaining.remove(pick)
    return DownloadPlan(requester=requester, chosen=tuple(chosen), explored=tuple(explored))
