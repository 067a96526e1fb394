"""Reference aggregation strategies compared against the first-order method.

FedAvg-style size-weighted averaging lives here; the proximal variant and
cross-client data sharing are realized inside local training and the dataset
module respectively, and are dispatched by strategy name in the
orchestrator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import ParamVector, uniform_average
from .learner import Architecture, OptimizerConfig, train_local

__all__ = ["AggregationInput", "fedavg_aggregate", "local_only_round"]


@dataclass(frozen=True)
class AggregationInput:
    models: tuple[ParamVector, ...]
    train_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.models) != len(self.train_sizes):
            raise ValueError("models and train_sizes must align")
        if any(s <= 0 for s in self.train_sizes):
            raise ValueError("train sizes must be positive")


def fedavg_aggregate(agg: AggregationInput) -> ParamVector:
    """Training-size-weighted mean of the uploaded models."""
    if not agg.models:
        raise ValueError("cannot aggregate an empty model list")
    sizes = np.asarray(agg.train_sizes, dtype=np.float64)
    weights = sizes / sizes.sum()
    if np.all(sizes == sizes[0]):
        return uniform_average(agg.models)
    stacked = np.stack([m.values for m in agg.models])
    return ParamVector(weights @ stacked)


def local_only_round(
    params: ParamVector,
    arch: Architecture,
    x: np.ndarray,
    y: np.ndarray,
    opt: OptimizerConfig,
    epochs: int,
    batch_size: int,
    seed,
    lr: float | None = None,
) -> ParamVector:
    """One round of isolated local training; no parameters cross clients."""
    return train_local(
        params, arch, x, y, opt, epochs=epochs, batch_size=batch_size, seed=seed, lr=lr
    )
