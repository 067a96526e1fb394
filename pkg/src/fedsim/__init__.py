"""Deterministic desk-scale simulator for personalized federated learning.

Combines per-client first-order model combination weights, affinity-driven
model routing with epsilon-greedy exploration, differentially private local
training, classical baselines, and non-IID dataset partitioners behind a
reproducible experiment harness.
"""

from .core import (
    ClientId,
    ClientState,
    ConfigError,
    DimensionMismatch,
    DPConfig,
    FederationConfig,
    FederationError,
    NonFiniteError,
    NumericError,
    ParamVector,
    l2_distance,
    uniform_average,
    weighted_combination,
)
from .datasets import (
    Dataset,
    EmdReport,
    PartitionedDataset,
    compute_emd,
    generate_synthetic,
    latent_partition,
    load_csv,
    load_idx,
    pathological_partition,
    share_data,
    shuffle_targets,
    split_train_val,
)
from .fomo import (
    CandidateModel,
    DownloadPlan,
    WeightVector,
    apply_fomo_update,
    fomo_model_average_weights,
    fomo_raw_weights,
    normalize_weights,
    select_downloads,
    update_affinity,
)
from .learner import Architecture, EvalResult, OptimizerConfig, evaluate, init_params, loss_and_grad, train_local
from .baselines import AggregationInput, fedavg_aggregate, local_only_round
from .orchestrator import (
    CommLedger,
    ExperimentResult,
    Federation,
    ModelStore,
    RoundMetrics,
    init_federation,
    run_experiment,
    run_round,
    stream_seed,
)

__version__ = "0.1.0"
