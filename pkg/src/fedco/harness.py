"""Experiment configuration, dataset assembly and the round loop.

A run is described by one JSON document with four sections: ``dataset``
(synthetic source or IDX paths), ``partition`` (how heterogeneity is
induced), ``model`` and ``rounds``, plus a mandatory top-level ``seed`` and
optional ``ablation`` switches for the transfer mechanisms. Everything
downstream is derived deterministically from that seed.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .datagen import (FederatedDataset, load_idx, make_classification_store,
                      make_feature_skew, make_noise_skew, partition_dirichlet,
                      partition_pathological, split_train_test, Heterogeneity)
from .federation import ALGORITHMS, RoundConfig, init_run, run_round
from .models import MLPConfig
from .reporting import RoundReport

_DATASET_KINDS = ("synthetic", "idx")
_PARTITION_KINDS = ("dirichlet", "pathological", "iid", "feature_skew")


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


@dataclass
class ExperimentConfig:
    seed: int
    dataset: dict
    partition: dict
    model: MLPConfig
    rounds: RoundConfig
    raw: dict = field(default_factory=dict)


def _section(raw: Mapping, key: str, required: bool = True) -> dict:
    value = raw.get(key)
    if value is None:
        if required:
            raise ConfigError(f"missing config section {key!r}")
        return {}
    if not isinstance(value, Mapping):
        raise ConfigError(f"config section {key!r} must be an object")
    return dict(value)


def parse_config(raw: Mapping) -> ExperimentConfig:
    """Validate a raw config document into an ExperimentConfig."""
    known = {"seed", "dataset", "partition", "model", "rounds", "ablation"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in raw or not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError("config needs a non-negative integer 'seed'")
    seed = raw["seed"]

    dataset = _section(raw, "dataset", required=False)
    dataset.setdefault("kind", "synthetic")
    if dataset["kind"] not in _DATASET_KINDS:
        raise ConfigError(f"dataset.kind must be one of {_DATASET_KINDS}")

    partition = _section(raw, "partition")
    if partition.get("kind") not in _PARTITION_KINDS:
        raise ConfigError(f"partition.kind must be one of {_PARTITION_KINDS}")
    if not isinstance(partition.get("n_clients"), int) or partition["n_clients"] < 1:
        raise ConfigError("partition.n_clients must be a positive integer")

    model_raw = _section(raw, "model")
    try:
        model = MLPConfig(
            input_dim=int(model_raw["input_dim"]),
            hidden_widths=[int(w) for w in model_raw["hidden_widths"]],
            num_classes=int(model_raw["num_classes"]),
            bn_after_hidden=bool(model_raw.get("bn_after_hidden", True)))
        model.validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc

    rounds_raw = _section(raw, "rounds")
    ablation = _section(raw, "ablation", required=False)
    try:
        rounds = RoundConfig(
            algorithm=str(rounds_raw.get("algorithm", "")).lower(),
            rounds=int(rounds_raw.get("rounds", 1)),
            local_epochs=int(rounds_raw.get("local_epochs", 1)),
            mutual_epochs=int(rounds_raw.get("mutual_epochs", 1)),
            lr=float(rounds_raw.get("lr", 0.01)),
            mu=float(rounds_raw.get("mu", 1.0)),
            mu_prox=float(rounds_raw.get("mu_prox", 0.01)),
            sample_fraction=float(rounds_raw.get("sample_fraction", 1.0)),
            batch_size=int(rounds_raw.get("batch_size", 32)),
            seed=seed,
            intra_transfer=bool(ablation.get("intra_transfer", True)),
            inter_transfer=bool(ablation.get("inter_transfer", True)))
        rounds.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid rounds section: {exc}") from exc
    if ablation and rounds.algorithm != "fedco2-feature":
        raise ConfigError("ablation flags only apply to algorithm fedco2-feature")

    return ExperimentConfig(seed=seed, dataset=dataset, partition=partition,
                            model=model, rounds=rounds, raw=dict(raw))


def _derived_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence((seed, tag)).generate_state(1)[0])


def build_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    """Materialize the federated dataset described by the config."""
    part = cfg.partition
    n_clients = part["n_clients"]
    test_fraction = float(part.get("test_fraction", 0.2))

    if part["kind"] == "feature_skew":
        ds = make_feature_skew(
            n_clients=n_clients,
            n_per_client=int(part.get("n_per_client", 125)),
            dim=cfg.model.input_dim,
            num_classes=cfg.model.num_classes,
            seed=_derived_seed(cfg.seed, 21),
            test_fraction=test_fraction,
            class_sep=float(part.get("class_sep", 2.0)),
            scale_range=tuple(part.get("scale_range", (0.5, 2.0))))
    else:
        if cfg.dataset["kind"] == "idx":
            store = load_idx(cfg.dataset["features"], cfg.dataset["labels"])
        else:
            store = make_classification_store(
                n_samples=int(cfg.dataset.get("n_samples", 2000)),
                dim=cfg.dataset.get("input_dim", cfg.model.input_dim),
                num_classes=cfg.dataset.get("num_classes", cfg.model.num_classes),
                seed=_derived_seed(cfg.seed, 21),
                class_sep=float(cfg.dataset.get("class_sep", 2.0)))
        if store.dim != cfg.model.input_dim:
            raise ConfigError(
                f"dataset dim {store.dim} != model input_dim {cfg.model.input_dim}")
        labels = store.labels
        part_seed = _derived_seed(cfg.seed, 22)
        if part["kind"] == "dirichlet":
            assignments = partition_dirichlet(labels, n_clients,
                                              float(part.get("alpha", 0.3)), part_seed)
        elif part["kind"] == "pathological":
            assignments = partition_pathological(
                labels, n_clients, int(part.get("classes_per_client", 2)), part_seed)
        else:  # iid
            rng = np.random.default_rng(part_seed)
            perm = rng.permutation(store.n_samples)
            assignments = [np.sort(chunk) for chunk in np.array_split(perm, n_clients)]
        clients = split_train_test(assignments, labels, test_fraction,
                                   _derived_seed(cfg.seed, 23))
        ds = FederatedDataset(store, clients,
                              Heterogeneity(part["kind"], dict(part), part_seed))

    sigma_max = float(part.get("noise_sigma_max", 0.0))
    if sigma_max > 0.0:
        ds = make_noise_skew(ds, sigma_max, _derived_seed(cfg.seed, 24))
    ds.validate()
    return ds


def worker_count() -> int:
    """Worker cap from FEDCO_THREADS, defaulting to the available cores."""
    raw = os.environ.get("FEDCO_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"FEDCO_THREADS must be an integer, got {raw!r}") from exc
    return max(1, value)


def run_experiment(cfg: ExperimentConfig,
                   workers: int | None = None) -> tuple[list[RoundReport], dict]:
    """Execute all rounds; returns reports plus summary extras."""
    workers = worker_count() if workers is None else workers
    started = time.perf_counter()
    dataset = build_dataset(cfg)
    server, clients = init_run(dataset, cfg.model, cfg.rounds)
    reports: list[RoundReport] = []
    for _ in range(cfg.rounds.rounds):
        _server, _clients, round_reports = run_round(server, clients, cfg.rounds,
                                                     cfg.model, workers)
        reports.extend(round_reports)
    extra = {
        "wall_seconds": time.perf_counter() - started,
        "heterogeneity": dataset.heterogeneity.to_dict(),
        "workers": workers,
    }
    return reports, extra
