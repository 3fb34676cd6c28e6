import copy

import numpy as np
import pytest

from fedco.datagen import make_feature_skew
from fedco.federation import (FEDCO2_FEATURE, FEDCO2_PLAIN, ClientState,
                              RoundConfig, aggregate_mean, evaluate_client,
                              init_run, run_round, sample_clients)
from fedco.models import (MLPConfig, ParamSet, init_mlp, params_equal,
                          split_params)
from fedco.numerics import Tape, Tensor, backward, sgd_step, softmax_cross_entropy
from fedco.models import forward

MODEL = MLPConfig(input_dim=6, hidden_widths=[10], num_classes=3)


def _dataset(seed=0, n_clients=3, n_per_client=30):
    return make_feature_skew(n_clients=n_clients, n_per_client=n_per_client,
                             dim=6, num_classes=3, seed=seed)


def _cfg(algorithm, **kw):
    base = dict(rounds=2, lr=0.05, seed=0, batch_size=8)
    base.update(kw)
    return RoundConfig(algorithm=algorithm, **base)


def _run(ds, cfg, rounds=None, workers=1):
    server, clients = init_run(ds, MODEL, cfg)
    reports = []
    for _ in range(rounds or cfg.rounds):
        server, clients, rep = run_round(server, clients, cfg, MODEL, workers)
        reports.extend(rep)
    return server, clients, reports


def _trainable(params):
    return {n: t.data.copy() for n, t in params.blocks.items() if t.requires_grad}


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_single_is_identity():
    p = init_mlp(MODEL, seed=0)
    assert params_equal(aggregate_mean([p]), p, check_meta=False)


def test_aggregate_midpoint():
    a, b = init_mlp(MODEL, seed=0), init_mlp(MODEL, seed=0)
    for t in a.blocks.values():
        t.data[...] = 0.0
    for t in b.blocks.values():
        t.data[...] = 2.0
    out = aggregate_mean([a, b])
    assert all((t.data == 1.0).all() for t in out.blocks.values())


def test_aggregate_against_summation_oracle():
    sets = [init_mlp(MODEL, seed=s) for s in range(3)]
    out = aggregate_mean(sets)
    for name in out.blocks:
        acc = np.zeros_like(out.blocks[name].data)
        for ps in sets:
            acc = acc + ps.blocks[name].data
        np.testing.assert_allclose(out.blocks[name].data, acc / 3.0, atol=1e-12)


def test_aggregate_convex_hull():
    sets = [init_mlp(MODEL, seed=s) for s in range(4)]
    out = aggregate_mean(sets)
    for name in out.blocks:
        stack = np.stack([ps.blocks[name].data for ps in sets])
        assert (out.blocks[name].data >= stack.min(axis=0) - 1e-15).all()
        assert (out.blocks[name].data <= stack.max(axis=0) + 1e-15).all()


def test_aggregate_schema_mismatch():
    a = init_mlp(MODEL, seed=0)
    b = init_mlp(MLPConfig(input_dim=6, hidden_widths=[11], num_classes=3), seed=0)
    with pytest.raises(ValueError):
        aggregate_mean([a, b])
    with pytest.raises(ValueError):
        aggregate_mean([])


# ---------------------------------------------------------------------------
# client sampling


def test_sample_full_fraction():
    assert sample_clients(7, 1.0, round_idx=3, seed=0) == list(range(7))


def test_sample_deterministic():
    a = sample_clients(100, 0.05, round_idx=9, seed=4)
    b = sample_clients(100, 0.05, round_idx=9, seed=4)
    assert a == b and len(a) == 5 and len(set(a)) == 5


def test_sample_varies_across_rounds():
    seen = {tuple(sample_clients(100, 0.05, round_idx=r, seed=1))
            for r in range(1, 101)}
    assert len(seen) >= 2


# ---------------------------------------------------------------------------
# cooperative rounds


def test_plain_round_zero_lr_keeps_trainable_params():
    ds = _dataset()
    cfg = _cfg(FEDCO2_PLAIN, lr=0.0, rounds=1)
    server, clients = init_run(ds, MODEL, cfg)
    before = [_trainable(c.online) for c in clients]
    shared_before = {n: t.data.copy() for n, t in server.shared.blocks.items()}
    server, clients, _ = run_round(server, clients, cfg, MODEL)
    for client, snap in zip(clients, before):
        for name, prev in snap.items():
            assert np.array_equal(client.online.blocks[name].data, prev)
    for name, prev in shared_before.items():
        np.testing.assert_allclose(server.shared.blocks[name].data, prev, atol=1e-15)


def test_plain_single_client_reduces_to_local_sgd():
    ds = _dataset(n_clients=1, n_per_client=24)
    cfg = _cfg(FEDCO2_PLAIN, rounds=3)
    server, clients, _ = _run(ds, cfg)

    # direct SGD oracle replaying the same RNG schedule on the online model
    model = init_mlp(MODEL, seed=cfg.seed)
    feats = ds.store.features.data
    labels = ds.store.labels
    train_idx = np.asarray(ds.clients[0][0])
    for round_idx in range(1, 4):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, round_idx, 0)))
        order = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            if len(rows) == 1:
                continue
            tape = Tape()
            out = forward(model, MODEL, Tensor(feats[rows]), mode="train", tape=tape)
            backward(tape, softmax_cross_entropy(out.logits, labels[rows], tape))
            sgd_step(model, model.take_grads(), cfg.lr)
    assert params_equal(clients[0].online, model, check_meta=False)


def test_bn_blocks_never_reach_server():
    ds = _dataset()
    for algo in (FEDCO2_PLAIN, FEDCO2_FEATURE, "fedbn"):
        server, _clients, _ = _run(ds, _cfg(algo))
        assert all(role[0] != "bn" for role in server.shared.roles.values())


def test_feature_round_first_round_matches_intra_only():
    ds = _dataset()
    cfg_full = _cfg(FEDCO2_FEATURE, rounds=1)
    cfg_nointer = _cfg(FEDCO2_FEATURE, rounds=1, inter_transfer=False)
    _s1, clients_full, _ = _run(ds, cfg_full)
    _s2, clients_nointer, _ = _run(ds, cfg_nointer)
    for a, b in zip(clients_full, clients_nointer):
        assert params_equal(a.online, b.online, check_meta=False)
        assert params_equal(a.offline, b.offline, check_meta=False)


def test_feature_round_teachers_frozen_for_whole_round():
    ds = _dataset()
    cfg = _cfg(FEDCO2_FEATURE, rounds=2)
    server, clients = init_run(ds, MODEL, cfg)
    server, clients, _ = run_round(server, clients, cfg, MODEL)
    snapshots = [{n: t.data.tobytes() for n, t in c.teacher_online.blocks.items()}
                 for c in clients]
    for client, snap in zip(clients, snapshots):
        assert all(client.teacher_online.blocks[n].data.tobytes() == b
                   for n, b in snap.items())
        assert set(client.teacher_online.frozen) == set(client.teacher_online.blocks)


def test_feature_round_classifier_pool_contents():
    ds = _dataset()
    cfg = _cfg(FEDCO2_FEATURE, rounds=1)
    server, clients, _ = _run(ds, cfg)
    assert sorted(server.classifier_pool) == [0, 1, 2]
    for cid, stored in server.classifier_pool.items():
        end_head, _ = split_params(clients[cid].offline, "classifier")
        assert params_equal(stored, end_head, check_meta=False)
        assert set(stored.blocks) == {"head.weight", "head.bias"}


def test_offline_extractor_never_uploaded():
    ds = _dataset()
    server, _clients, _ = _run(ds, _cfg(FEDCO2_FEATURE))
    pooled_names = {n for ps in server.classifier_pool.values() for n in ps.blocks}
    assert pooled_names == {"head.weight", "head.bias"}
    assert all(role[1] == "classifier"
               for ps in server.classifier_pool.values()
               for role in ps.roles.values())


def test_bn_locality_between_clients():
    ds = _dataset()
    cfg = _cfg("fedbn", rounds=1)
    server, clients = init_run(ds, MODEL, cfg)
    server, clients, _ = run_round(server, clients, cfg, MODEL)

    twin_server, twin_clients = copy.deepcopy((server, clients))
    # perturb client 0's personalized BN blocks before the next round
    for name, role in twin_clients[0].online.roles.items():
        if role[0] == "bn":
            twin_clients[0].online.blocks[name].data += 3.0
    run_round(server, clients, cfg, MODEL)
    run_round(twin_server, twin_clients, cfg, MODEL)
    bn_names = [n for n, r in clients[1].online.roles.items() if r[0] == "bn"]
    assert bn_names
    for name in bn_names:
        assert np.array_equal(clients[1].online.blocks[name].data,
                              twin_clients[1].online.blocks[name].data)


def test_schedule_independence_across_workers():
    ds = _dataset(n_clients=4, n_per_client=24)
    cfg = _cfg(FEDCO2_FEATURE, rounds=2)
    _s1, seq_clients, seq_rep = _run(ds, cfg, workers=1)
    _s2, par_clients, par_rep = _run(ds, cfg, workers=4)
    for a, b in zip(seq_clients, par_clients):
        assert params_equal(a.online, b.online, check_meta=False)
        assert params_equal(a.offline, b.offline, check_meta=False)
    assert [(r.client_id, r.mode, r.accuracy, r.loss) for r in seq_rep] == \
           [(r.client_id, r.mode, r.accuracy, r.loss) for r in par_rep]


# ---------------------------------------------------------------------------
# baselines


def test_fedbn_without_bn_equals_fedavg():
    ds = _dataset()
    model = MLPConfig(input_dim=6, hidden_widths=[10], num_classes=3,
                      bn_after_hidden=False)

    def run(algo):
        cfg = _cfg(algo, rounds=3)
        server, clients = init_run(ds, model, cfg)
        for _ in range(3):
            server, clients, _ = run_round(server, clients, cfg, model)
        return server, clients

    s_avg, c_avg = run("fedavg")
    s_bn, c_bn = run("fedbn")
    assert params_equal(s_avg.shared, s_bn.shared, check_meta=False)
    for a, b in zip(c_avg, c_bn):
        assert params_equal(a.online, b.online, check_meta=False)


def test_fedprox_zero_mu_equals_fedavg():
    ds = _dataset()

    def run(algo, mu_prox):
        cfg = _cfg(algo, rounds=3, mu_prox=mu_prox)
        server, clients = init_run(ds, MODEL, cfg)
        for _ in range(3):
            server, clients, _ = run_round(server, clients, cfg, MODEL)
        return server, clients

    s_avg, c_avg = run("fedavg", 0.01)
    s_prox, c_prox = run("fedprox", 0.0)
    assert params_equal(s_avg.shared, s_prox.shared, check_meta=False)
    for a, b in zip(c_avg, c_prox):
        assert params_equal(a.online, b.online, check_meta=False)


def test_fedprox_penalty_changes_trajectory():
    ds = _dataset()

    def run(mu_prox):
        cfg = _cfg("fedprox", rounds=2, mu_prox=mu_prox)
        return _run(ds, cfg)[1]

    free, pulled = run(0.0), run(5.0)
    assert not params_equal(free[0].online, pulled[0].online, check_meta=False)


def test_singleset_server_never_changes():
    ds = _dataset()
    cfg = _cfg("singleset", rounds=3)
    server, clients = init_run(ds, MODEL, cfg)
    assert len(server.shared) == 0
    for _ in range(3):
        server, clients, _ = run_round(server, clients, cfg, MODEL)
    assert len(server.shared) == 0 and not server.classifier_pool


# ---------------------------------------------------------------------------
# evaluation


def _zero_logit_client(ds, labels_value=0):
    params = init_mlp(MODEL, seed=0)
    for name, block in params.blocks.items():
        if "weight" in name or "bias" in name:
            block.data[...] = 0.0
    client = ClientState(id=0, online=params, offline=params.clone(),
                         store=ds.store, train_idx=np.asarray(ds.clients[0][0]),
                         test_idx=np.asarray(ds.clients[0][1]))
    client.store.labels[client.test_idx] = labels_value
    return client


def test_evaluate_perfect_predictor():
    ds = _dataset()
    client = _zero_logit_client(ds, labels_value=0)  # argmax of zeros is 0
    client.test_idx = client.test_idx[:1]
    acc, _loss = evaluate_client(client, MODEL, mode="online")
    assert acc == 1.0


def test_evaluate_fused_with_zero_offline_matches_online():
    ds = _dataset()
    cfg = _cfg(FEDCO2_PLAIN, rounds=1)
    server, clients, _ = _run(ds, cfg)
    client = clients[0]
    for name, block in client.offline.blocks.items():
        if "weight" in name or "bias" in name:
            block.data[...] = 0.0
        if "gamma" in name:
            block.data[...] = 1.0
    on_acc, _ = evaluate_client(client, MODEL, mode="online")
    fused_acc, _ = evaluate_client(client, MODEL, mode="fused")
    assert fused_acc == on_acc


def test_evaluate_untrained_net_near_chance():
    counts = 0
    total = 0
    for seed in range(8):
        ds = make_feature_skew(n_clients=1, n_per_client=300, dim=6,
                               num_classes=3, seed=seed, test_fraction=0.5)
        cfg = _cfg("singleset", rounds=1, seed=seed)
        server, clients = init_run(ds, MODEL, cfg)
        acc, _ = evaluate_client(clients[0], MODEL, mode="online")
        n_test = len(clients[0].test_idx)
        counts += acc * n_test
        total += n_test
    p = 1.0 / 3.0
    sigma = np.sqrt(p * (1 - p) / total)
    assert abs(counts / total - p) < 3 * sigma + 0.05


def test_evaluate_empty_test_split():
    ds = _dataset()
    cfg = _cfg(FEDCO2_PLAIN, rounds=1)
    server, clients = init_run(ds, MODEL, cfg)
    clients[0].test_idx = np.array([], dtype=int)
    with pytest.raises(ValueError):
        evaluate_client(clients[0], MODEL, mode="online")
