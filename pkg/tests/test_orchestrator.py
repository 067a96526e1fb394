from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from fedsim.config import (
    build_architecture,
    build_dataset,
    build_partition,
    spec_from_values,
)
from fedsim.core import ConfigError
from fedsim.datasets import split_train_val
from fedsim.orchestrator import run_experiment, stream_seed


def build_all(**overrides):
    spec = spec_from_values(**overrides)
    ds = build_dataset(spec)
    part = build_partition(spec, ds)
    return spec.federation(), build_architecture(spec, ds), part


SMALL = dict(
    seed=0,
    total_clients=6,
    active_per_round=6,
    downloads_per_client=3,
    rounds=5,
    samples_per_class=60,
    n_classes=6,
    n_features=8,
    n_distributions=3,
    class_separation=4.0,
)


def record_tuples(result):
    return [
        (
            rm.round_index,
            rec.client,
            rec.val_loss,
            rec.test_loss,
            rec.test_acc,
            rec.downloads,
            rec.weights,
            rec.transfers,
        )
        for rm in result.rounds
        for rec in rm.records
    ]


class TestDeterminism:
    def test_identical_runs(self):
        config, arch, part = build_all(**SMALL)
        a = run_experiment(config, arch, part)
        b = run_experiment(config, arch, part)
        assert record_tuples(a) == record_tuples(b)
        for pa, pb in zip(a.final_params, b.final_params):
            assert np.array_equal(pa.values, pb.values)
        for ra, rb in zip(a.rounds, b.rounds):
            assert np.array_equal(ra.affinity, rb.affinity)

    def test_parallel_equals_sequential(self):
        config, arch, part = build_all(**SMALL)
        seq = run_experiment(config, arch, part)
        with ThreadPoolExecutor(max_workers=4) as pool:
            par = run_experiment(config, arch, part, participant_map=pool.map)
        assert record_tuples(seq) == record_tuples(par)
        for pa, pb in zip(seq.final_params, par.final_params):
            assert np.array_equal(pa.values, pb.values)

    def test_stream_seeds_are_purpose_disjoint(self):
        a = stream_seed(0, "participation", 3).generate_state(4)
        b = stream_seed(0, "exploration", 3).generate_state(4)
        assert not np.array_equal(a, b)


class TestAccounting:
    def test_communication_totals(self):
        config, arch, part = build_all(**SMALL)
        result = run_experiment(config, arch, part)
        ledger = result.ledger
        total_epochs = config.rounds * config.local_epochs
        assert ledger.comm_rounds == (2 * total_epochs) // config.local_epochs
        assert ledger.upload_events == config.rounds * config.active_per_round
        assert ledger.download_events == config.rounds * config.active_per_round
        assert ledger.upload_events == sum(u for u, _, _ in ledger.per_round)
        assert ledger.models_transferred == sum(t for _, _, t in ledger.per_round)

    def test_transfers_bounded_by_plan_cardinality(self):
        config, arch, part = build_all(**SMALL)
        result = run_experiment(config, arch, part)
        bound = config.active_per_round * config.downloads_per_client
        for _, _, transfers in result.ledger.per_round:
            assert transfers <= bound

    def test_epoch_budget_equal_across_strategies(self):
        budgets = {}
        for strategy in ("fedfomo", "fedavg", "local"):
            config, arch, part = build_all(strategy=strategy, **SMALL)
            result = run_experiment(config, arch, part)
            budgets[strategy] = result.epochs_per_client.tolist()
            assert all(
                e == config.rounds * config.local_epochs for e in result.epochs_per_client
            )
        assert budgets["fedfomo"] == budgets["fedavg"] == budgets["local"]

    def test_partial_participation(self):
        config, arch, part = build_all(
            **{**SMALL, "active_per_round": 2, "downloads_per_client": 1}
        )
        result = run_experiment(config, arch, part)
        for rm in result.rounds:
            assert len(rm.records) == 2
        assert result.ledger.upload_events == config.rounds * 2


class TestProtocol:
    def test_downloads_reference_prior_uploads(self):
        config, arch, part = build_all(**SMALL)
        result = run_experiment(config, arch, part)
        uploaded: set[int] = set()
        for rm in result.rounds:
            for rec in rm.records:
                assert set(rec.downloads) <= uploaded
            uploaded |= {rec.client for rec in rm.records}

    def test_first_round_runs_pure_local(self):
        config, arch, part = build_all(**SMALL)
        result = run_experiment(config, arch, part)
        for rec in result.rounds[0].records:
            assert rec.downloads == ()

    def test_k1_fomo_equals_local_only(self):
        kw = dict(
            total_clients=1,
            active_per_round=1,
            downloads_per_client=0,
            n_distributions=1,
            rounds=6,
            samples_per_class=80,
            n_classes=4,
            class_separation=4.0,
            n_features=8,
        )
        for seed in (0, 1):
            finals = {}
            for strategy in ("fedfomo", "local"):
                config, arch, part = build_all(seed=seed, strategy=strategy, **kw)
                result = run_experiment(config, arch, part)
                finals[strategy] = result.final_params[0].values
            assert np.array_equal(finals["fedfomo"], finals["local"])

    def test_fedavg_iid_close_to_pooled_local(self):
        common = dict(
            n_distributions=1,
            rounds=10,
            samples_per_class=100,
            n_classes=6,
            class_separation=5.0,
            n_features=8,
        )
        config, arch, part = build_all(
            seed=0, strategy="fedavg", total_clients=5, active_per_round=5,
            downloads_per_client=0, **common,
        )
        fed = run_experiment(config, arch, part)
        config, arch, part = build_all(
            seed=0, strategy="local", total_clients=1, active_per_round=1,
            downloads_per_client=0, **common,
        )
        pooled = run_experiment(config, arch, part)
        assert abs(fed.mean_test_accuracy - pooled.mean_test_accuracy) <= 0.05

    def test_empty_val_under_fomo_is_config_error(self):
        config, arch, part = build_all(**SMALL)
        part.client_val[2] = np.empty(0, dtype=np.int64)
        with pytest.raises(ConfigError):
            run_experiment(config, arch, part)

    def test_model_avg_strategy_runs(self):
        config, arch, part = build_all(strategy="fedfomo_model_avg", **SMALL)
        result = run_experiment(config, arch, part)
        assert 0.0 <= result.mean_test_accuracy <= 1.0
        assert len(result.rounds) == config.rounds

    def test_fedprox_and_share_strategies_run(self):
        for strategy, extra in (("fedprox", {}), ("fedavg_share", {"share_fraction": 0.05})):
            config, arch, part = build_all(strategy=strategy, **{**SMALL, **extra})
            result = run_experiment(config, arch, part)
            assert len(result.rounds) == config.rounds
