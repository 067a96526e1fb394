"""Experiment specification: a flat, sectioned key-value config file.

The file format is INI-style with four data sections (federation, model,
dataset, output) plus an optional [sweep] section whose keys name any scalar
field and whose values are comma-separated lists. Unknown sections or keys
are rejected. Parsing resolves every default so a resolved spec can be
written back out and re-parsed to an identical object.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any

from .core import ConfigError, DPConfig, FederationConfig, STRATEGIES
from .datasets import (
    Dataset,
    PartitionedDataset,
    generate_synthetic,
    latent_partition,
    load_csv,
    load_idx_pairs,
    pathological_partition,
    share_data,
    shuffle_targets,
    split_train_val,
)
from .learner import ARCH_KINDS, Architecture
from .orchestrator import stream_seed

__all__ = [
    "ExperimentSpec",
    "parse_spec_file",
    "parse_spec_text",
    "spec_from_values",
    "render_spec",
    "build_dataset",
    "build_partition",
    "build_architecture",
]

_REQUIRED = object()

SOURCES = ("synthetic", "idx", "csv")
PARTITIONS = ("pathological", "latent")


@dataclass(frozen=True)
class _Field:
    section: str
    key: str
    kind: str  # int | float | bool | str
    default: Any
    choices: tuple | None = None


_FIELDS: list[_Field] = [
    _Field("federation", "strategy", "str", "fedfomo", STRATEGIES),
    _Field("federation", "total_clients", "int", 15),
    _Field("federation", "active_per_round", "int", 15),
    _Field("federation", "downloads_per_client", "int", 5),
    _Field("federation", "epsilon", "float", 0.3),
    _Field("federation", "epsilon_decay", "float", 0.05),
    _Field("federation", "local_epochs", "int", 5),
    _Field("federation", "rounds", "int", 20),
    _Field("federation", "lr", "float", 0.1),
    _Field("federation", "lr_decay", "float", 0.99),
    _Field("federation", "momentum", "float", 0.0),
    _Field("federation", "weight_decay", "float", 1e-4),
    _Field("federation", "val_fraction", "float", 0.2),
    _Field("federation", "batch_size", "int", 32),
    _Field("federation", "seed", "int", _REQUIRED),
    _Field("federation", "fedprox_mu", "float", 0.1),
    _Field("federation", "dp", "bool", False),
    _Field("federation", "dp_clip_norm", "float", 1.0),
    _Field("federation", "dp_noise_multiplier", "float", 1.0),
    _Field("federation", "dp_delta", "float", 1e-5),
    _Field("model", "arch", "str", "softmax_linear", ARCH_KINDS),
    _Field("model", "hidden_units", "int", 32),
    _Field("dataset", "source", "str", "synthetic", SOURCES),
    _Field("dataset", "partition", "str", "latent", PARTITIONS),
    _Field("dataset", "n_distributions", "int", 5),
    _Field("dataset", "pca_dims", "int", 16),
    _Field("dataset", "classes_per_client", "int", 2),
    _Field("dataset", "shuffle_targets", "bool", False),
    _Field("dataset", "share_fraction", "float", 0.0),
    _Field("dataset", "n_classes", "int", 10),
    _Field("dataset", "n_features", "int", 16),
    _Field("dataset", "samples_per_class", "int", 100),
    _Field("dataset", "class_separation", "float", 3.0),
    _Field("dataset", "train_images", "str", ""),
    _Field("dataset", "train_labels", "str", ""),
    _Field("dataset", "test_images", "str", ""),
    _Field("dataset", "test_labels", "str", ""),
    _Field("dataset", "csv_path", "str", ""),
    _Field("output", "dir", "str", "runs/experiment"),
]

_BY_KEY = {f.key: f for f in _FIELDS}
assert len(_BY_KEY) == len(_FIELDS), "config keys must be unique across sections"

_SWEEPABLE = {f.key for f in _FIELDS if f.section in ("federation", "model", "dataset")}


def _parse_value(f: _Field, text: str) -> Any:
    text = text.strip()
    try:
        if f.kind == "int":
            value: Any = int(text)
        elif f.kind == "float":
            value = float(text)
        elif f.kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                value = True
            elif low in ("false", "no", "0"):
                value = False
            else:
                raise ValueError(text)
        else:
            value = text
    except ValueError:
        raise ConfigError(f.key, f"cannot parse {text!r} as {f.kind}") from None
    if f.choices is not None and value not in f.choices:
        raise ConfigError(f.key, f"must be one of {f.choices}, got {value!r}")
    return value


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class ExperimentSpec:
    """A fully resolved experiment configuration plus optional sweep axes."""

    values: dict[str, Any]
    sweep: dict[str, list] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def out_dir(self) -> str:
        return self.values["dir"]

    def federation(self) -> FederationConfig:
        v = self.values
        dp = (
            DPConfig(
                clip_norm=v["dp_clip_norm"],
                noise_multiplier=v["dp_noise_multiplier"],
                delta=v["dp_delta"],
            )
            if v["dp"]
            else None
        )
        return FederationConfig(
            total_clients=v["total_clients"],
            active_per_round=v["active_per_round"],
            downloads_per_client=v["downloads_per_client"],
            seed=v["seed"],
            epsilon=v["epsilon"],
            epsilon_decay=v["epsilon_decay"],
            local_epochs=v["local_epochs"],
            rounds=v["rounds"],
            lr=v["lr"],
            lr_decay=v["lr_decay"],
            momentum=v["momentum"],
            weight_decay=v["weight_decay"],
            val_fraction=v["val_fraction"],
            batch_size=v["batch_size"],
            strategy=v["strategy"],
            dp=dp,
            fedprox_mu=v["fedprox_mu"],
            share_fraction=v["share_fraction"],
        )

    def with_values(self, **overrides: Any) -> "ExperimentSpec":
        unknown = set(overrides) - set(self.values)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        merged = dict(self.values)
        merged.update(overrides)
        out = ExperimentSpec(values=merged, sweep={})
        _validate(out)
        return out


def _validate(spec: ExperimentSpec) -> None:
    spec.federation()  # range checks live on the config dataclasses
    v = spec.values
    if v["source"] == "idx":
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not v[key]:
                raise ConfigError(key, "required when source = idx")
    if v["source"] == "csv" and not v["csv_path"]:
        raise ConfigError("csv_path", "required when source = csv")
    if v["partition"] == "latent":
        if v["n_distributions"] < 1:
            raise ConfigError("n_distributions", "must be >= 1")
        if v["n_distributions"] > v["total_clients"]:
            raise ConfigError("n_distributions", "cannot exceed total_clients")
        if v["pca_dims"] < 1:
            raise ConfigError("pca_dims", "must be >= 1")
    if v["partition"] == "pathological" and v["classes_per_client"] < 1:
        raise ConfigError("classes_per_client", "must be >= 1")
    if v["source"] == "synthetic":
        for key in ("n_classes", "n_features", "samples_per_class"):
            if v[key] < 1:
                raise ConfigError(key, "must be >= 1")
        if v["class_separation"] <= 0:
            raise ConfigError("class_separation", "must be positive")
    if v["hidden_units"] < 1:
        raise ConfigError("hidden_units", "must be >= 1")
    for key, vals in spec.sweep.items():
        if not vals:
            raise ConfigError(key, "sweep axis is empty")


def parse_spec_text(text: str, origin: str = "<config>") -> ExperimentSpec:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise ConfigError("<file>", f"cannot parse {origin}: {err}") from None

    known_sections = {f.section for f in _FIELDS} | {"sweep"}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(section, "unknown config section")

    values: dict[str, Any] = {}
    for f in _FIELDS:
        if parser.has_option(f.section, f.key):
            values[f.key] = _parse_value(f, parser.get(f.section, f.key))
        elif f.default is _REQUIRED:
            raise ConfigError(f.key, f"missing required field in section [{f.section}]")
        else:
            values[f.key] = f.default

    for section in parser.sections():
        if section == "sweep":
            continue
        for key in parser.options(section):
            if key not in _BY_KEY or _BY_KEY[key].section != section:
                raise ConfigError(key, f"unknown key in section [{section}]")

    sweep: dict[str, list] = {}
    if parser.has_section("sweep"):
        for key in parser.options("sweep"):
            if key not in _SWEEPABLE:
                raise ConfigError(key, "not a sweepable field")
            f = _BY_KEY[key]
            parts = [p for p in parser.get("sweep", key).split(",") if p.strip()]
            sweep[key] = [_parse_value(f, p) for p in parts]

    spec = ExperimentSpec(values=values, sweep=sweep)
    _validate(spec)
    return spec


def parse_spec_file(path: str) -> ExperimentSpec:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError("<file>", f"cannot read spec file: {err}") from None
    return parse_spec_text(text, origin=path)


def spec_from_values(**overrides: Any) -> ExperimentSpec:
    """Build a spec from defaults plus overrides; ``seed`` is required."""
    values: dict[str, Any] = {}
    for f in _FIELDS:
        values[f.key] = None if f.default is _REQUIRED else f.default
    unknown = set(overrides) - set(values)
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown config field")
    values.update(overrides)
    if values["seed"] is None:
        raise ConfigError("seed", "missing required field in section [federation]")
    spec = ExperimentSpec(values=values, sweep={})
    _validate(spec)
    return spec


def render_spec(spec: ExperimentSpec) -> str:
    """Canonical text form of a resolved spec; parses back to an equal spec."""
    lines: list[str] = []
    current = None
    for f in _FIELDS:
        if f.section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{f.section}]")
            current = f.section
        lines.append(f"{f.key} = {_format_value(spec.values[f.key])}")
    if spec.sweep:
        lines.append("")
        lines.append("[sweep]")
        for key, vals in spec.sweep.items():
            lines.append(f"{key} = " + ", ".join(_format_value(v) for v in vals))
    lines.append("")
    return "\n".join(lines)


# ------------------------------------------------------------------
# Building the experiment inputs from a spec
# ------------------------------------------------------------------

def build_dataset(spec: ExperimentSpec) -> Dataset:
    v = spec.values
    if v["source"] == "synthetic":
        seed = int(stream_seed(v["seed"], "data").generate_state(1)[0])
        return generate_synthetic(
            n_classes=v["n_classes"],
            n_features=v["n_features"],
            samples_per_class=v["samples_per_class"],
            class_separation=v["class_separation"],
            seed=seed,
        )
    if v["source"] == "idx":
        return load_idx_pairs(
            v["train_images"], v["train_labels"], v["test_images"], v["test_labels"]
        )
    return load_csv(v["csv_path"])


def build_partition(spec: ExperimentSpec, dataset: Dataset) -> PartitionedDataset:
    v = spec.values
    seed = v["seed"]
    if v["partition"] == "pathological":
        part = pathological_partition(
            dataset,
            n_clients=v["total_clients"],
            classes_per_client=v["classes_per_client"],
            seed=int(stream_seed(seed, "partition").generate_state(1)[0]),
        )
    else:
        part = latent_partition(
            dataset,
            n_distributions=v["n_distributions"],
            n_clients=v["total_clients"],
            pca_dims=min(v["pca_dims"], dataset.n_features),
            seed=int(stream_seed(seed, "partition").generate_state(1)[0]),
        )
    part = split_train_val(
        part, v["val_fraction"], seed=int(stream_seed(seed, "split").generate_state(1)[0])
    )
    if v["shuffle_targets"]:
        part = shuffle_targets(part, seed=int(stream_seed(seed, "shuffle").generate_state(1)[0]))
    if v["share_fraction"] > 0.0:
        part = share_data(
            part, v["share_fraction"], seed=int(stream_seed(seed, "share").generate_state(1)[0])
        )
    return part


def build_architecture(spec: ExperimentSpec, dataset: Dataset) -> Architecture:
    return Architecture(
        kind=spec.values["arch"],
        n_features=dataset.n_features,
        n_classes=dataset.n_classes,
        hidden_units=spec.values["hidden_units"],
    )
