"""The federation round loop and experiment driver.

A round runs in two phases: every participant's work (download planning,
candidate evaluation, combination, local training) is computed against the
round-start state, then all uploads, affinity rows, and client states are
committed at a barrier. Participant work only touches per-purpose RNG
streams keyed by (seed, label, round, client), so executing participants
concurrently gives the same results as the sequential loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .baselines import AggregationInput, fedavg_aggregate
from .core import (
    ClientId,
    ClientState,
    ConfigError,
    FederationConfig,
    FederationError,
    OptimizerState,
    ParamVector,
)
from .datasets import EmdReport, PartitionedDataset, compute_emd
from .fomo import (
    CandidateModel,
    DownloadPlan,
    WeightVector,
    apply_fomo_update,
    fomo_model_average_raw,
    fomo_raw_weights,
    initial_affinity,
    normalize_weights,
    select_downloads,
    update_affinity,
)
from .learner import Architecture, EvalResult, OptimizerConfig, evaluate, train_local

__all__ = [
    "ModelStore",
    "CommLedger",
    "ClientRoundRecord",
    "RoundMetrics",
    "Federation",
    "ExperimentResult",
    "stream_seed",
    "init_federation",
    "run_round",
    "run_experiment",
]

FOMO_STRATEGIES = ("fedfomo", "fedfomo_model_avg")
GLOBAL_STRATEGIES = ("fedavg", "fedavg_share", "fedprox")

# Fixed labels for the named RNG streams, so changing one knob (say the
# number of downloads) never perturbs unrelated randomness.
_STREAM_LABELS = {
    "participation": 1,
    "exploration": 2,
    "batching": 3,
    "init": 4,
    "init_global": 5,
    "partition": 6,
    "split": 7,
    "shuffle": 8,
    "share": 9,
    "data": 10,
}


def stream_seed(seed: int, label: str, *keys: int) -> np.random.SeedSequence:
    """Deterministic per-purpose seed stream derived from the run seed."""
    return np.random.SeedSequence([int(seed), _STREAM_LABELS[label], *map(int, keys)])


# ------------------------------------------------------------------
# Server-side state
# ------------------------------------------------------------------

@dataclass
class ModelStore:
    """Latest upload per client; a client absent here cannot be downloaded."""

    latest: dict[ClientId, ParamVector] = field(default_factory=dict)

    def upload(self, client_id: ClientId, params: ParamVector) -> None:
        self.latest[client_id] = params

    def available(self) -> list[ClientId]:
        return sorted(self.latest)


@dataclass
class CommLedger:
    """Upload/download event counters plus per-round breakdowns."""

    upload_events: int = 0
    download_events: int = 0
    models_transferred: int = 0
    per_round: list[tuple[int, int, int]] = field(default_factory=list)

    def record_round(self, uploads: int, downloads: int, transfers: int) -> None:
        self.upload_events += uploads
        self.download_events += downloads
        self.models_transferred += transfers
        self.per_round.append((uploads, downloads, transfers))

    @property
    def comm_rounds(self) -> int:
        # One download phase plus one upload phase per federation round.
        return 2 * len(self.per_round)


@dataclass
class ClientRoundRecord:
    client: ClientId
    val_loss: float
    test_loss: float
    test_acc: float
    downloads: tuple[ClientId, ...]
    weights: tuple[float, ...]
    explored: tuple[bool, ...]
    epsilon_used: float
    transfers: int


@dataclass
class RoundMetrics:
    round_index: int
    records: list[ClientRoundRecord]
    affinity: np.ndarray  # post-round snapshot, row = requester


@dataclass
class Federation:
    config: FederationConfig
    arch: Architecture
    partition: PartitionedDataset
    clients: list[ClientState]
    store: ModelStore
    ledger: CommLedger
    global_model: ParamVector | None = None
    epochs_per_client: np.ndarray | None = None

    def features(self, idx: np.ndarray) -> np.ndarray:
        return self.partition.dataset.features[idx]

    def labels(self, idx: np.ndarray) -> np.ndarray:
        return self.partition.dataset.labels[idx]


@dataclass
class ExperimentResult:
    config: FederationConfig
    rounds: list[RoundMetrics]
    final_test_accuracy: np.ndarray
    final_test_loss: np.ndarray
    mean_test_accuracy: float
    ledger: CommLedger
    emd: EmdReport
    epochs_per_client: np.ndarray
    final_params: list[ParamVector]


def _optimizer_config(config: FederationConfig) -> OptimizerConfig:
    return OptimizerConfig(
        lr=config.lr,
        lr_decay=config.lr_decay,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def init_federation(
    config: FederationConfig, arch: Architecture, partition: PartitionedDataset
) -> Federation:
    if partition.n_clients != config.total_clients:
        raise ConfigError(
            "total_clients",
            f"config says {config.total_clients} but partition has {partition.n_clients}",
        )
    affinity = initial_affinity(config.total_clients)
    clients = []
    for i in range(config.total_clients):
        params = _init_client_params(arch, config.seed, i)
        clients.append(
            ClientState(
                client_id=i,
                params=params,
                prev_params=params,
                affinity_row=affinity[i].copy(),
                optimizer_state=OptimizerState(lr=config.lr),
                train_idx=partition.client_train[i],
                val_idx=partition.client_val[i],
                test_idx=partition.client_test[i],
            )
        )
    fed = Federation(
        config=config,
        arch=arch,
        partition=partition,
        clients=clients,
        store=ModelStore(),
        ledger=CommLedger(),
        epochs_per_client=np.zeros(config.total_clients, dtype=np.int64),
    )
    if config.strategy in GLOBAL_STRATEGIES:
        from .learner import init_params

        fed.global_model = init_params(arch, stream_seed(config.seed, "init_global"))
    return fed


def _init_client_params(arch: Architecture, seed: int, client: ClientId) -> ParamVector:
    from .learner import init_params

    return init_params(arch, stream_seed(seed, "init", client))


def deployed_model(fed: Federation, client: ClientId) -> ParamVector:
    """The model a client would serve right now under its strategy."""
    if fed.config.strategy in GLOBAL_STRATEGIES:
        assert fed.global_model is not None
        return fed.global_model
    if fed.config.strategy in FOMO_STRATEGIES:
        return fed.clients[client].prev_params  # last combined update
    return fed.clients[client].params  # local: last trained


# ------------------------------------------------------------------
# Per-participant round work
# ------------------------------------------------------------------

@dataclass
class _Work:
    client: ClientId
    plan: DownloadPlan
    weights: WeightVector | None
    new_affinity_row: np.ndarray | None
    deployed: ParamVector
    trained: ParamVector
    val: EvalResult
    test: EvalResult
    transfers: int = 0  # models sent server -> client for this participant


def _round_lr(config: FederationConfig, round_index: int) -> float:
    return config.lr * config.lr_decay**round_index


def _round_epsilon(config: FederationConfig, round_index: int) -> float:
    return max(0.0, config.epsilon - config.epsilon_decay * round_index)


def _eval_split(fed: Federation, params: ParamVector, idx: np.ndarray) -> EvalResult:
    return evaluate(params, fed.arch, fed.features(idx), fed.labels(idx))


def _train(
    fed: Federation,
    start: ParamVector,
    client: ClientId,
    round_index: int,
    lr: float,
    fedprox_mu: float = 0.0,
    anchor: ParamVector | None = None,
) -> ParamVector:
    state = fed.clients[client]
    return train_local(
        start,
        fed.arch,
        fed.features(state.train_idx),
        fed.labels(state.train_idx),
        _optimizer_config(fed.config),
        epochs=fed.config.local_epochs,
        batch_size=fed.config.batch_size,
        seed=stream_seed(fed.config.seed, "batching", round_index, client),
        lr=lr,
        dp=fed.config.dp,
        fedprox_mu=fedprox_mu,
        anchor=anchor,
    )


def _fomo_participant(fed: Federation, client: ClientId, round_index: int) -> _Work:
    config = fed.config
    state = fed.clients[client]
    if state.val_idx.size == 0:
        raise ConfigError(
            "val_fraction",
            f"client {client} has an empty validation split under {config.strategy}",
        )
    eps = _round_epsilon(config, round_index)
    rng = np.random.default_rng(stream_seed(config.seed, "exploration", round_index, client))
    plan = select_downloads(
        state.affinity_row,
        client,
        fed.store.available(),
        config.downloads_per_client,
        eps,
        rng,
    )
    val_x = fed.features(state.val_idx)
    val_y = fed.labels(state.val_idx)

    def val_loss(params: ParamVector) -> float:
        return evaluate(params, fed.arch, val_x, val_y).loss

    # The client's own freshly trained model is always a candidate and does
    # not consume a download slot.
    candidates = [
        CandidateModel(owner=j, params=fed.store.latest[j], val_loss=val_loss(fed.store.latest[j]))
        for j in plan.chosen
    ]
    candidates.append(
        CandidateModel(owner=client, params=state.params, val_loss=val_loss(state.params))
    )

    baseline = state.prev_params
    if config.strategy == "fedfomo_model_avg":
        if len(candidates) >= 2:
            raw = fomo_model_average_raw(val_loss, [c.params for c in candidates])
        else:
            raw = np.zeros(len(candidates))
    else:
        raw = fomo_raw_weights(baseline, val_loss(baseline), candidates)
    weights = normalize_weights(raw)
    deployed = apply_fomo_update(baseline, candidates, weights)
    new_row = update_affinity(state.affinity_row, candidates, raw)

    trained = _train(fed, deployed, client, round_index, _round_lr(config, round_index))
    return _Work(
        client=client,
        plan=plan,
        weights=weights,
        new_affinity_row=new_row,
        deployed=deployed,
        trained=trained,
        val=_eval_split(fed, deployed, state.val_idx),
        test=_eval_split(fed, deployed, state.test_idx),
        transfers=len(plan.chosen),
    )


def _global_participant(fed: Federation, client: ClientId, round_index: int) -> _Work:
    config = fed.config
    assert fed.global_model is not None
    start = fed.global_model
    mu = config.fedprox_mu if config.strategy == "fedprox" else 0.0
    trained = _train(
        fed, start, client, round_index, _round_lr(config, round_index), fedprox_mu=mu, anchor=start
    )
    plan = DownloadPlan(requester=client, chosen=(), explored=())
    state = fed.clients[client]
    # val/test metrics are filled in after aggregation (the deployed model
    # is the new global model); placeholders here keep the dataclass total.
    return _Work(
        client=client,
        plan=plan,
        weights=None,
        new_affinity_row=None,
        deployed=start,
        trained=trained,
        val=EvalResult(0.0, 0.0, int(state.val_idx.size)),
        test=EvalResult(0.0, 0.0, int(state.test_idx.size)),
        transfers=1,  # the one global model download
    )


def _local_participant(fed: Federation, client: ClientId, round_index: int) -> _Work:
    state = fed.clients[client]
    trained = _train(fed, state.params, client, round_index, _round_lr(fed.config, round_index))
    plan = DownloadPlan(requester=client, chosen=(), explored=())
    val = (
        _eval_split(fed, trained, state.val_idx)
        if state.val_idx.size
        else EvalResult(0.0, 0.0, 0)
    )
    return _Work(
        client=client,
        plan=plan,
        weights=None,
        new_affinity_row=None,
        deployed=trained,
        trained=trained,
        val=val,
        test=_eval_split(fed, trained, state.test_idx),
    )


# ------------------------------------------------------------------
# Round loop
# ------------------------------------------------------------------

def run_round(
    fed: Federation,
    round_index: int,
    participant_map: Callable[..., Iterable] = map,
) -> RoundMetrics:
    """Run one federation round in place and return its metrics.

    ``participant_map`` may be replaced with a concurrent map (for example
    ThreadPoolExecutor.map); participant work reads only round-start state
    and per-client seed streams, so the results are identical either way.
    """
    config = fed.config
    rng_p = np.random.default_rng(stream_seed(config.seed, "participation", round_index))
    participants = sorted(
        int(c)
        for c in rng_p.choice(config.total_clients, size=config.active_per_round, replace=False)
    )

    if config.strategy in FOMO_STRATEGIES:
        worker = _fomo_participant
    elif config.strategy in GLOBAL_STRATEGIES:
        worker = _global_participant
    elif config.strategy == "local":
        worker = _local_participant
    else:  # pragma: no cover - rejected by FederationConfig
        raise FederationError(f"unknown strategy {config.strategy!r}")

    try:
        works = list(participant_map(lambda c: worker(fed, c, round_index), participants))
    except ConfigError:
        raise
    except FederationError as err:
        raise FederationError(f"round {round_index}: {err}") from err

    # Barrier: commit uploads, affinity rows, and client states.
    eps = _round_epsilon(config, round_index)
    for work in works:
        state = fed.clients[work.client]
        state.prev_params = work.deployed
        state.params = work.trained
        state.optimizer_state.lr = _round_lr(config, round_index)
        if work.new_affinity_row is not None:
            state.affinity_row = work.new_affinity_row
        fed.store.upload(work.client, work.trained)
        fed.epochs_per_client[work.client] += config.local_epochs

    if config.strategy in GLOBAL_STRATEGIES:
        agg = AggregationInput(
            models=tuple(w.trained for w in works),
            train_sizes=tuple(int(fed.clients[w.client].train_idx.size) for w in works),
        )
        fed.global_model = fedavg_aggregate(agg)
        for work in works:
            state = fed.clients[work.client]
            if state.val_idx.size:
                work.val = _eval_split(fed, fed.global_model, state.val_idx)
            work.test = _eval_split(fed, fed.global_model, state.test_idx)
            work.deployed = fed.global_model

    transfers = sum(w.transfers for w in works)
    fed.ledger.record_round(uploads=len(works), downloads=len(works), transfers=transfers)

    records = [
        ClientRoundRecord(
            client=w.client,
            val_loss=w.val.loss,
            test_loss=w.test.loss,
            test_acc=w.test.accuracy,
            downloads=w.plan.chosen,
            weights=tuple(float(v) for v in w.weights.normalized) if w.weights else (),
            explored=w.plan.explored,
            epsilon_used=eps,
            transfers=w.transfers,
        )
        for w in works
    ]
    affinity = np.stack([c.affinity_row for c in fed.clients])
    return RoundMetrics(round_index=round_index, records=records, affinity=affinity)


def run_experiment(
    config: FederationConfig,
    arch: Architecture,
    partition: PartitionedDataset,
    participant_map: Callable[..., Iterable] = map,
) -> ExperimentResult:
    """Run all rounds and summarize final per-client test performance."""
    fed = init_federation(config, arch, partition)
    rounds = [run_round(fed, r, participant_map) for r in range(config.rounds)]

    k = config.total_clients
    final_acc = np.empty(k)
    final_loss = np.empty(k)
    final_params = []
    for i in range(k):
        model = deployed_model(fed, i)
        res = _eval_split(fed, model, fed.clients[i].test_idx)
        final_acc[i] = res.accuracy
        final_loss[i] = res.loss
        final_params.append(fed.clients[i].params)

    return ExperimentResult(
        config=config,
        rounds=rounds,
        final_test_accuracy=final_acc,
        final_test_loss=final_loss,
        mean_test_accuracy=float(final_acc.mean()),
        ledger=fed.ledger,
        emd=compute_emd(partition),
        epochs_per_client=fed.epochs_per_client.copy(),
        final_params=final_params,
    )
