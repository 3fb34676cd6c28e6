"""Round-based server/client simulation.

One process plays the server and every client. Within a round, sampled
clients train independently (optionally on worker threads; each client owns
its state and a private RNG stream derived from (seed, round, client id), so
results are bitwise identical at any worker count), then the server
aggregates at a barrier. BN-role blocks never travel; the offline model
never travels except for its classifier head.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cooperation import (ClassifierSet, adaptation_loss, build_classifier_set,
                          fuse_predictions, mutual_learning_step)
from .datagen import FederatedDataset, SampleStore
from .models import (MLPConfig, ParamSet, clone_frozen, forward, init_mlp,
                     merge_params, predict_class, split_params)
from .numerics import (Tape, Tensor, add, backward, mul, scale, sgd_step,
                       softmax_cross_entropy, sub, sum_all)
from .reporting import RoundReport

FEDCO2_FEATURE = "fedco2-feature"
FEDCO2_PLAIN = "fedco2-plain"
FEDAVG = "fedavg"
FEDBN = "fedbn"
FEDPROX = "fedprox"
SINGLESET = "singleset"

ALGORITHMS = (FEDCO2_FEATURE, FEDCO2_PLAIN, FEDAVG, FEDBN, FEDPROX, SINGLESET)
_COOPERATIVE = (FEDCO2_FEATURE, FEDCO2_PLAIN)


@dataclass
class RoundConfig:
    algorithm: str
    rounds: int = 1
    local_epochs: int = 1
    mutual_epochs: int = 1
    lr: float = 0.01
    mu: float = 1.0
    mu_prox: float = 0.01
    sample_fraction: float = 1.0
    batch_size: int = 32
    seed: int = 0
    intra_transfer: bool = True
    inter_transfer: bool = True

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.rounds < 1 or self.local_epochs < 1 or self.mutual_epochs < 1:
            raise ValueError("rounds and epoch counts must be >= 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (train-mode BN)")
        if self.mu < 0 or self.mu_prox < 0 or self.lr < 0:
            raise ValueError("lr, mu and mu_prox must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class ClientState:
    id: int
    online: ParamSet
    offline: ParamSet | None
    store: SampleStore
    train_idx: np.ndarray
    test_idx: np.ndarray
    teacher_online: ParamSet | None = None
    teacher_offline: ParamSet | None = None
    classifier_set: ClassifierSet = field(default_factory=ClassifierSet)


@dataclass
class ServerState:
    shared: ParamSet
    classifier_pool: dict[int, ParamSet] = field(default_factory=dict)
    round: int = 0


def init_run(dataset: FederatedDataset, model_cfg: MLPConfig,
             cfg: RoundConfig) -> tuple[ServerState, list[ClientState]]:
    """Build the initial server and client states from one shared init."""
    cfg.validate()
    base = init_mlp(model_cfg, cfg.seed)
    if cfg.algorithm in (FEDAVG, FEDPROX):
        shared = base.clone()
    elif cfg.algorithm == SINGLESET:
        shared = ParamSet()
    else:  # FedBN and both cooperative modes share only non-BN blocks
        _bn, rest = split_params(base, "bn")
        shared = rest.clone()
    clients = []
    for cid in range(dataset.n_clients):
        train, test = dataset.clients[cid]
        clients.append(ClientState(
            id=cid,
            online=base.clone(),
            offline=base.clone() if cfg.algorithm in _COOPERATIVE else None,
            store=dataset.store,
            train_idx=np.asarray(train),
            test_idx=np.asarray(test)))
    return ServerState(shared=shared), clients


def aggregate_mean(param_sets: list[ParamSet]) -> ParamSet:
    """Blockwise arithmetic mean with equal weights 1/N."""
    if not param_sets:
        raise ValueError("nothing to aggregate")
    first = param_sets[0]
    names = list(first.blocks)
    for ps in param_sets[1:]:
        if set(ps.blocks) != set(names):
            raise ValueError("aggregation schema mismatch: differing block names")
        for name in names:
            if ps.blocks[name].data.shape != first.blocks[name].data.shape:
                raise ValueError(f"aggregation schema mismatch on block {name!r}")
    out = ParamSet()
    for name in names:
        stacked = np.stack([ps.blocks[name].data for ps in param_sets])
        out.add_block(name, Tensor(stacked.mean(axis=0),
                                   requires_grad=first.blocks[name].requires_grad),
                      first.roles[name])
    return out


def sample_clients(n_clients: int, fraction: float, round_idx: int,
                   seed: int) -> list[int]:
    """ceil(fraction*N) distinct ids, deterministic given (seed, round)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    count = math.ceil(fraction * n_clients)
    rng = np.random.default_rng(np.random.SeedSequence((seed, round_idx)))
    return sorted(rng.choice(n_clients, size=count, replace=False).tolist())


def client_upload(client: ClientState, algorithm: str) -> dict[str, ParamSet]:
    """What a client sends after local training.

    FedAvg/FedProx send the full online model, FedBN and both cooperative
    modes send only the non-BN blocks, and the feature-skew protocol adds the
    offline classifier head. SingleSet sends nothing.
    """
    if algorithm == SINGLESET:
        return {}
    if algorithm in (FEDAVG, FEDPROX):
        return {"model": client.online}
    _bn, rest = split_params(client.online, "bn")
    payload = {"model": rest}
    if algorithm == FEDCO2_FEATURE:
        head, _ = split_params(client.offline, "classifier")
        payload["classifier"] = head.clone()
    return payload


# ---------------------------------------------------------------------------
# local training helpers


def _client_rng(cfg: RoundConfig, round_idx: int, cid: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, round_idx, cid)))


def _batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batch slices; a trailing singleton is folded into the
    previous batch so train-mode BN always sees >= 2 rows."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _batches(client: ClientState, cfg: RoundConfig, rng: np.random.Generator):
    order = client.train_idx[rng.permutation(len(client.train_idx))]
    feats = client.store.features.data
    labels = client.store.labels
    for sl in _batch_slices(len(order), cfg.batch_size):
        rows = order[sl]
        yield Tensor(feats[rows]), labels[rows]


def _sync_online_with_broadcast(client: ClientState, server: ServerState) -> None:
    """Initialize the round-start online model: broadcast shared blocks plus
    the client's own personalized BN blocks."""
    bn_local, _ = split_params(client.online, "bn")
    client.online = merge_params(server.shared.clone(), bn_local)


def _train_ce(model: ParamSet, model_cfg: MLPConfig, client: ClientState,
              cfg: RoundConfig, rng: np.random.Generator,
              prox_ref: ParamSet | None = None) -> None:
    """Plain cross-entropy SGD epochs, optionally with a proximal pull
    toward the broadcast parameters (FedProx)."""
    for _ in range(cfg.local_epochs):
        for x, y in _batches(client, cfg, rng):
            tape = Tape()
            out = forward(model, model_cfg, x, mode="train", tape=tape)
            loss = softmax_cross_entropy(out.logits, y, tape)
            if prox_ref is not None and cfg.mu_prox > 0:
                penalty = None
                for name, block in model.trainable():
                    ref = Tensor(prox_ref.blocks[name].data)
                    diff = sub(block, ref, tape)
                    term = sum_all(mul(diff, diff, tape), tape)
                    penalty = term if penalty is None else add(penalty, term, tape)
                if penalty is not None:
                    loss = add(loss, scale(penalty, cfg.mu_prox / 2.0, tape), tape)
            backward(tape, loss)
            sgd_step(model, model.take_grads(), cfg.lr)


def _map_clients(task, ids: list[int], workers: int) -> dict[int, object]:
    if workers <= 1 or len(ids) <= 1:
        return {cid: task(cid) for cid in ids}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {cid: pool.submit(task, cid) for cid in ids}
        return {cid: fut.result() for cid, fut in futures.items()}


# ---------------------------------------------------------------------------
# rounds


def run_round_baseline(server: ServerState, clients: list[ClientState],
                       cfg: RoundConfig, model_cfg: MLPConfig,
                       workers: int = 1):
    """One FedAvg/FedBN/FedProx/SingleSet round."""
    if cfg.algorithm not in (FEDAVG, FEDBN, FEDPROX, SINGLESET):
        raise ValueError(f"not a baseline algorithm: {cfg.algorithm!r}")
    server.round += 1
    participants = sample_clients(len(clients), cfg.sample_fraction, server.round, cfg.seed)

    def train(cid: int):
        client = clients[cid]
        rng = _client_rng(cfg, server.round, cid)
        prox_ref = None
        if cfg.algorithm in (FEDAVG, FEDPROX):
            client.online = server.shared.clone()
            if cfg.algorithm == FEDPROX:
                prox_ref = server.shared
        elif cfg.algorithm == FEDBN:
            _sync_online_with_broadcast(client, server)
        _train_ce(client.online, model_cfg, client, cfg, rng, prox_ref=prox_ref)
        return client_upload(client, cfg.algorithm)

    uploads = _map_clients(train, participants, workers)
    if cfg.algorithm != SINGLESET:
        server.shared = aggregate_mean([uploads[cid]["model"] for cid in participants])
    reports = _evaluate_round(server, clients, cfg, model_cfg)
    return server, clients, reports


def run_round_fedco2_plain(server: ServerState, clients: list[ClientState],
                           cfg: RoundConfig, model_cfg: MLPConfig,
                           workers: int = 1):
    """Cooperative round without transfer phases: both models train locally
    on cross-entropy; only the online model's non-BN blocks are aggregated."""
    if cfg.algorithm != FEDCO2_PLAIN:
        raise ValueError(f"expected algorithm {FEDCO2_PLAIN!r}, got {cfg.algorithm!r}")
    server.round += 1
    participants = sample_clients(len(clients), cfg.sample_fraction, server.round, cfg.seed)

    def train(cid: int):
        client = clients[cid]
        rng = _client_rng(cfg, server.round, cid)
        _sync_online_with_broadcast(client, server)
        for _ in range(cfg.local_epochs):
            for x, y in _batches(client, cfg, rng):
                for model in (client.online, client.offline):
                    tape = Tape()
                    out = forward(model, model_cfg, x, mode="train", tape=tape)
                    loss = softmax_cross_entropy(out.logits, y, tape)
                    backward(tape, loss)
                    sgd_step(model, model.take_grads(), cfg.lr)
        return client_upload(client, cfg.algorithm)

    uploads = _map_clients(train, participants, workers)
    server.shared = aggregate_mean([uploads[cid]["model"] for cid in participants])
    reports = _evaluate_round(server, clients, cfg, model_cfg)
    return server, clients, reports


def run_round_fedco2_feature(server: ServerState, clients: list[ClientState],
                             cfg: RoundConfig, model_cfg: MLPConfig,
                             workers: int = 1):
    """Cooperative round with the two-phase local process: frozen-teacher
    mutual distillation, then local adaptation against the received
    classifier set. Uploads online non-BN blocks plus the offline head."""
    if cfg.algorithm != FEDCO2_FEATURE:
        raise ValueError(f"expected algorithm {FEDCO2_FEATURE!r}, got {cfg.algorithm!r}")
    server.round += 1
    participants = sample_clients(len(clients), cfg.sample_fraction, server.round, cfg.seed)
    pool_entries = sorted(server.classifier_pool.items())

    def train(cid: int):
        client = clients[cid]
        rng = _client_rng(cfg, server.round, cid)
        _sync_online_with_broadcast(client, server)
        client.classifier_set = build_classifier_set(pool_entries)
        client.teacher_online = clone_frozen(client.online)
        client.teacher_offline = clone_frozen(client.offline)
        if cfg.intra_transfer:
            for _ in range(cfg.mutual_epochs):
                for x, _y in _batches(client, cfg, rng):
                    mutual_learning_step(model_cfg, client.online, client.offline,
                                         client.teacher_online, client.teacher_offline,
                                         x, cfg.lr)
        cset = client.classifier_set if cfg.inter_transfer else ClassifierSet()
        for _ in range(cfg.local_epochs):
            for x, y in _batches(client, cfg, rng):
                for model in (client.online, client.offline):
                    tape = Tape()
                    loss, _out = adaptation_loss(model, model_cfg, cset, cid,
                                                 (x, y), cfg.mu, tape)
                    backward(tape, loss)
                    sgd_step(model, model.take_grads(), cfg.lr)
        return client_upload(client, cfg.algorithm)

    uploads = _map_clients(train, participants, workers)
    server.shared = aggregate_mean([uploads[cid]["model"] for cid in participants])
    for cid in participants:
        server.classifier_pool[cid] = uploads[cid]["classifier"]
    reports = _evaluate_round(server, clients, cfg, model_cfg)
    return server, clients, reports


def run_round(server: ServerState, clients: list[ClientState], cfg: RoundConfig,
              model_cfg: MLPConfig, workers: int = 1):
    """Dispatch one communication round by algorithm."""
    if cfg.algorithm == FEDCO2_FEATURE:
        return run_round_fedco2_feature(server, clients, cfg, model_cfg, workers)
    if cfg.algorithm == FEDCO2_PLAIN:
        return run_round_fedco2_plain(server, clients, cfg, model_cfg, workers)
    return run_round_baseline(server, clients, cfg, model_cfg, workers)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_client(client: ClientState, model_cfg: MLPConfig,
                    mode: str = "fused") -> tuple[float, float]:
    """Eval-mode accuracy and cross-entropy on the client's test split."""
    if len(client.test_idx) == 0:
        raise ValueError(f"client {client.id} has an empty test split")
    x = Tensor(client.store.features.data[client.test_idx])
    y = client.store.labels[client.test_idx]
    logits = _mode_logits(client, model_cfg, x, mode)
    accuracy = float((predict_class(logits) == y).mean())
    loss = softmax_cross_entropy(logits, y).item()
    return accuracy, loss


def _mode_logits(client: ClientState, model_cfg: MLPConfig, x: Tensor,
                 mode: str) -> Tensor:
    if mode == "online" or client.offline is None:
        return forward(client.online, model_cfg, x, mode="eval").logits
    if mode == "offline":
        return forward(client.offline, model_cfg, x, mode="eval").logits
    if mode == "fused":
        on = forward(client.online, model_cfg, x, mode="eval").logits
        off = forward(client.offline, model_cfg, x, mode="eval").logits
        return fuse_predictions(on, off)
    raise ValueError(f"unknown evaluation mode {mode!r}")


def _evaluate_round(server: ServerState, clients: list[ClientState],
                    cfg: RoundConfig, model_cfg: MLPConfig) -> list[RoundReport]:
    modes = ("fused", "online", "offline") if cfg.algorithm in _COOPERATIVE else ("online",)
    reports = []
    for client in clients:
        x = Tensor(client.store.features.data[client.test_idx])
        y = client.store.labels[client.test_idx]
        for mode in modes:
            logits = _mode_logits(client, model_cfg, x, mode)
            reports.append(RoundReport(
                round=server.round,
                algorithm=cfg.algorithm,
                client_id=client.id,
                split="test",
                mode=mode,
                accuracy=float((predict_class(logits) == y).mean()),
                loss=softmax_cross_entropy(logits, y).item(),
                wall_ms=0.0))
    return reports
