"""Command-line entry point: run experiments, sweeps, and reports.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration. All
output files are written atomically (temp file + rename) so an interrupted
run never leaves truncated artifacts. The FOMO_FED_SEED environment
variable, when set, overrides the seed in any spec file.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import (
    ExperimentSpec,
    build_architecture,
    build_dataset,
    build_partition,
    parse_spec_file,
    render_spec,
)
from .core import ConfigError, FederationError
from .datasets import partition_to_dict
from .orchestrator import ExperimentResult, run_experiment

SEED_ENV_VAR = "FOMO_FED_SEED"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


# ------------------------------------------------------------------
# Atomic file helpers
# ------------------------------------------------------------------

def _atomic_write(path: str, data: str) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _prepare_out_dir(out_dir: str, force: bool) -> None:
    if os.path.exists(out_dir) and os.listdir(out_dir):
        if not force:
            raise FederationError(
                f"output directory {out_dir!r} is not empty; pass --force to overwrite"
            )
    os.makedirs(out_dir, exist_ok=True)


# ------------------------------------------------------------------
# Single run
# ------------------------------------------------------------------

def execute_run(spec: ExperimentSpec, out_dir: str) -> ExperimentResult:
    """Run one experiment and persist all artifacts into ``out_dir``."""
    config = spec.federation()
    dataset = build_dataset(spec)
    partition = build_partition(spec, dataset)
    arch = build_architecture(spec, dataset)

    result = run_experiment(config, arch, partition)

    _atomic_write(os.path.join(out_dir, "config.resolved.ini"), render_spec(spec))
    _atomic_write(
        os.path.join(out_dir, "partition.json"),
        _json_dumps(partition_to_dict(partition, seed=config.seed)) + "\n",
    )

    lines = []
    for rm in result.rounds:
        for rec in rm.records:
            lines.append(
                _json_dumps(
                    {
                        "round": rm.round_index,
                        "client": rec.client,
                        "strategy": config.strategy,
                        "val_loss": rec.val_loss,
                        "test_loss": rec.test_loss,
                        "test_acc": rec.test_acc,
                        "downloads": list(rec.downloads),
                        "weights": list(rec.weights),
                        "transfers": rec.transfers,
                    }
                )
            )
    _atomic_write(os.path.join(out_dir, "metrics.jsonl"), "\n".join(lines) + "\n")

    if config.strategy in ("fedfomo", "fedfomo_model_avg"):
        for rm in result.rounds:
            frame = "\n".join(
                ",".join(repr(float(v)) for v in row) for row in rm.affinity
            )
            _atomic_write(
                os.path.join(out_dir, f"affinity_round_{rm.round_index}.csv"), frame + "\n"
            )

    summary = {
        "strategy": config.strategy,
        "seed": config.seed,
        "n_clients": config.total_clients,
        "rounds": config.rounds,
        "mean_test_accuracy": result.mean_test_accuracy,
        "final_test_accuracy": result.final_test_accuracy.tolist(),
        "final_test_loss": result.final_test_loss.tolist(),
        "comm": {
            "upload_events": result.ledger.upload_events,
            "download_events": result.ledger.download_events,
            "models_transferred": result.ledger.models_transferred,
            "comm_rounds": result.ledger.comm_rounds,
            "per_round": [list(t) for t in result.ledger.per_round],
        },
        "emd": {"per_client": result.emd.per_client.tolist(), "mean": result.emd.mean},
        "epochs_per_client": result.epochs_per_client.tolist(),
        "n_distributions": partition.n_distributions,
        "distribution_of_client": partition.distribution_of_client.tolist(),
        "target_distribution_of_client": (
            None
            if partition.target_distribution_of_client is None
            else partition.target_distribution_of_client.tolist()
        ),
        "dp": (
            None
            if config.dp is None
            else {
                "clip_norm": config.dp.clip_norm,
                "noise_multiplier": config.dp.noise_multiplier,
                "delta": config.dp.delta,
                "steps_per_epoch": int(
                    np.ceil(
                        min(p.size for p in partition.client_train) / config.batch_size
                    )
                ),
                "sampling_rate": config.batch_size
                / max(p.size for p in partition.client_train),
            }
        ),
        "config": {k: spec.values[k] for k in sorted(spec.values)},
    }
    _atomic_write(
        os.path.join(out_dir, "summary.json"), json.dumps(summary, sort_keys=True, indent=2) + "\n"
    )
    return result


def cmd_run(args: argparse.Namespace) -> int:
    spec = parse_spec_file(args.spec)
    spec = _apply_env_seed(spec)
    out_dir = args.out or spec.out_dir
    _prepare_out_dir(out_dir, args.force)
    result = execute_run(spec, out_dir)
    print(f"run complete: mean test accuracy {result.mean_test_accuracy:.4f} -> {out_dir}")
    return EXIT_OK


def _apply_env_seed(spec: ExperimentSpec) -> ExperimentSpec:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return spec
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError("seed", f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
    return spec.with_values(seed=seed)


# ------------------------------------------------------------------
# Sweeps
# ------------------------------------------------------------------

def _cell_name(assignment: dict) -> str:
    return "__".join(f"{k}={v}" for k, v in assignment.items())


def _sweep_cell(payload: tuple[dict, dict, str]) -> tuple[dict, str, float | None, str]:
    values, assignment, cell_dir = payload
    try:
        spec = ExperimentSpec(values=values, sweep={}).with_values(**assignment)
        os.makedirs(cell_dir, exist_ok=True)
        result = execute_run(spec, cell_dir)
        return assignment, cell_dir, result.mean_test_accuracy, "ok"
    except Exception as err:  # noqa: BLE001 - cell failures must not kill the sweep
        return assignment, cell_dir, None, f"error: {err}"


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = parse_spec_file(args.spec)
    spec = _apply_env_seed(spec)
    if not spec.sweep:
        raise ConfigError("sweep", "sweep requires at least one axis in a [sweep] section")
    out_dir = args.out or spec.out_dir
    _prepare_out_dir(out_dir, args.force)

    axes = sorted(spec.sweep)
    cells = []
    for combo in itertools.product(*(spec.sweep[a] for a in axes)):
        assignment = dict(zip(axes, combo))
        cell_dir = os.path.join(out_dir, _cell_name(assignment))
        cells.append((dict(spec.values), assignment, cell_dir))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_sweep_cell, cells))
    else:
        outcomes = [_sweep_cell(c) for c in cells]

    header = axes + ["mean_test_accuracy", "status", "cell_dir"]
    rows = [",".join(header)]
    failures = 0
    for assignment, cell_dir, acc, status in outcomes:
        if acc is None:
            failures += 1
        rows.append(
            ",".join(
                [str(assignment[a]) for a in axes]
                + ["" if acc is None else repr(acc), status.split(":")[0], os.path.basename(cell_dir)]
            )
        )
        print(f"cell {_cell_name(assignment)}: {status}")
    _atomic_write(os.path.join(out_dir, "sweep_summary.csv"), "\n".join(rows) + "\n")
    print(f"sweep complete: {len(outcomes) - failures}/{len(outcomes)} cells ok -> {out_dir}")
    return EXIT_OK


# ------------------------------------------------------------------
# Reporting
# ------------------------------------------------------------------

def _load_summary(run_dir: str) -> dict:
    path = os.path.join(run_dir, "summary.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _final_affinity(run_dir: str, rounds: int) -> np.ndarray | None:
    path = os.path.join(run_dir, f"affinity_round_{rounds - 1}.csv")
    if not os.path.exists(path):
        return None
    return np.loadtxt(path, delimiter=",", ndmin=2)


def affinity_mass_split(
    affinity: np.ndarray, groups: list[int], target_groups: list[int] | None = None
) -> tuple[float, float]:
    """Mean off-diagonal affinity inside vs outside each client's group.

    With ``target_groups`` given, "inside" means the column client belongs to
    the row client's target group instead of its own.
    """
    k = affinity.shape[0]
    own = np.asarray(groups)
    tgt = own if target_groups is None else np.asarray(target_groups)
    intra, inter = [], []
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            (intra if own[j] == tgt[i] else inter).append(affinity[i, j])
    mean_intra = float(np.mean(intra)) if intra else float("nan")
    mean_inter = float(np.mean(inter)) if inter else float("nan")
    return mean_intra, mean_inter


def _collect_runs(root: str) -> list[str]:
    if not os.path.isdir(root):
        return []
    if os.path.exists(os.path.join(root, "summary.json")):
        return [root]
    runs = []
    for name in sorted(os.listdir(root)):
        sub = os.path.join(root, name)
        if os.path.isdir(sub) and os.path.exists(os.path.join(sub, "summary.json")):
            runs.append(sub)
    return runs


def cmd_report(args: argparse.Namespace) -> int:
    runs = _collect_runs(args.run_dir)
    if not runs:
        print(f"no summary.json found under {args.run_dir}", file=sys.stderr)
        return EXIT_RUNTIME

    # Group runs by their config minus the seed so multi-seed sweeps
    # aggregate into mean and standard deviation.
    groups: dict[tuple, dict] = {}
    for run in runs:
        try:
            summary = _load_summary(run)
        except (OSError, json.JSONDecodeError) as err:
            print(f"cannot read metrics in {run}: {err}", file=sys.stderr)
            return EXIT_RUNTIME
        cfg = summary.get("config", {})
        key_items = tuple(
            (k, v) for k, v in sorted(cfg.items()) if k not in ("seed", "dir")
        )
        group = groups.setdefault(
            key_items, {"strategy": summary["strategy"], "accs": [], "runs": []}
        )
        group["accs"].append(summary["mean_test_accuracy"])
        group["runs"].append((run, summary))

    base = dict(groups[next(iter(groups))]["runs"][0][1].get("config", {}))
    varying = sorted(
        {
            k
            for key_items in groups
            for k, v in key_items
            if any(dict(other).get(k) != v for other in groups)
        }
    )

    rows = []
    for key_items, group in sorted(groups.items(), key=lambda kv: str(kv[0])):
        cfg = dict(key_items)
        accs = np.asarray(group["accs"])
        run_dir, summary = group["runs"][0]
        intra = inter = ""
        if summary["strategy"] in ("fedfomo", "fedfomo_model_avg") and summary[
            "n_distributions"
        ] >= 2:
            affinity = _final_affinity(run_dir, summary["rounds"])
            if affinity is not None:
                mean_intra, mean_inter = affinity_mass_split(
                    affinity,
                    summary["distribution_of_client"],
                    summary["target_distribution_of_client"],
                )
                intra, inter = f"{mean_intra:.4f}", f"{mean_inter:.4f}"
        rows.append(
            {
                "strategy": group["strategy"],
                **{k: cfg.get(k, base.get(k)) for k in varying if k != "strategy"},
                "seeds": len(accs),
                "mean_acc": float(accs.mean()),
                "std_acc": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
                "intra_affinity": intra,
                "inter_affinity": inter,
            }
        )

    columns = list(rows[0].keys())
    widths = {c: max(len(c), *(len(_cell_str(r[c])) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        print("  ".join(_cell_str(r[c]).ljust(widths[c]) for c in columns))

    csv_lines = [",".join(columns)]
    for r in rows:
        csv_lines.append(",".join(_cell_str(r[c]) for c in columns))
    _atomic_write(os.path.join(args.run_dir, "report.csv"), "\n".join(csv_lines) + "\n")
    print(f"wrote {os.path.join(args.run_dir, 'report.csv')}")
    return EXIT_OK


def _cell_str(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ------------------------------------------------------------------
# Entry point
# ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim", description="Deterministic personalized federated learning simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a spec file")
    p_run.add_argument("spec", help="path to the spec file")
    p_run.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    p_run.add_argument("--out", default=None, help="override the spec's output directory")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the Cartesian product of the sweep axes")
    p_sweep.add_argument("spec", help="path to the spec file (needs a [sweep] section)")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p_sweep.add_argument("--force", action="store_true", help="overwrite a non-empty output dir")
    p_sweep.add_argument("--out", default=None, help="override the spec's output directory")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="summarize a run or sweep directory")
    p_report.add_argument("run_dir", help="directory produced by run or sweep")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FederationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
