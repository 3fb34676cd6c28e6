import numpy as np
import pytest

from fedco.datagen import (load_idx, make_classification_store,
                           make_feature_skew, make_noise_skew,
                           make_regression_clients, mean_label_tv,
                           partition_dirichlet, partition_pathological,
                           save_idx, split_train_test)


def _labels(n, classes, seed):
    return np.random.default_rng(seed).integers(0, classes, size=n)


# ---------------------------------------------------------------------------
# Dirichlet partition


def test_dirichlet_single_client_gets_everything():
    labels = _labels(100, 4, 0)
    parts = partition_dirichlet(labels, 1, alpha=0.3, seed=0)
    np.testing.assert_array_equal(parts[0], np.arange(100))


def test_dirichlet_is_a_partition():
    labels = _labels(500, 10, 1)
    parts = partition_dirichlet(labels, 7, alpha=0.3, seed=1)
    merged = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(merged, np.arange(500))
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            assert not np.intersect1d(parts[i], parts[j]).size


def test_dirichlet_high_alpha_is_balanced():
    labels = np.repeat(np.arange(10), 200)  # balanced 10-class source
    for seed in range(10):
        parts = partition_dirichlet(labels, 10, alpha=1000.0, seed=seed)
        for idx in parts:
            share = np.bincount(labels[idx], minlength=10) / len(idx)
            assert np.abs(share - 0.1).max() < 0.05


def test_dirichlet_deterministic():
    labels = _labels(300, 5, 2)
    a = partition_dirichlet(labels, 4, alpha=0.3, seed=9)
    b = partition_dirichlet(labels, 4, alpha=0.3, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_dirichlet_infeasible():
    with pytest.raises(ValueError):
        partition_dirichlet(_labels(3, 2, 0), 10, alpha=1.0, seed=0)


def test_heterogeneity_monotone_in_alpha():
    labels = np.repeat(np.arange(10), 300)
    tv = {alpha: [] for alpha in (0.3, 1.0, 1000.0)}
    for seed in range(5):
        for alpha in tv:
            parts = partition_dirichlet(labels, 10, alpha=alpha, seed=seed)
            tv[alpha].append(mean_label_tv(labels, parts))
    means = {alpha: np.mean(vals) for alpha, vals in tv.items()}
    assert means[0.3] > means[1.0] > means[1000.0]


# ---------------------------------------------------------------------------
# pathological partition


def test_pathological_single_client_full_dataset():
    labels = _labels(80, 4, 3)
    parts = partition_pathological(labels, 1, classes_per_client=4, seed=0)
    np.testing.assert_array_equal(parts[0], np.arange(80))


def test_pathological_support_size():
    labels = np.repeat(np.arange(10), 100)
    parts = partition_pathological(labels, 20, classes_per_client=2, seed=4)
    merged = np.sort(np.concatenate(parts))
    np.testing.assert_array_equal(merged, np.arange(len(labels)))
    for idx in parts:
        assert len(np.unique(labels[idx])) == 2


def test_pathological_share_rule():
    # with rates drawn from U(0.4, 0.6) a two-holder class splits roughly
    # in half: each holder's share lies in the normalized-rate range
    labels = np.repeat(np.arange(6), 300)
    parts = partition_pathological(labels, 6, classes_per_client=2, seed=5)
    holders = {c: [i for i, idx in enumerate(parts)
                   if (labels[idx] == c).any()] for c in range(6)}
    for c, who in holders.items():
        if len(who) != 2:
            continue
        counts = [int((labels[parts[i]] == c).sum()) for i in who]
        share = counts[0] / sum(counts)
        assert 0.30 <= share <= 0.70
        assert sum(counts) == 300


def test_pathological_infeasible():
    with pytest.raises(ValueError):
        partition_pathological(_labels(50, 10, 0), 2, classes_per_client=3, seed=0)


# ---------------------------------------------------------------------------
# train/test split consistency


def test_split_label_distribution_consistency():
    labels = _labels(2000, 8, 6)
    parts = partition_dirichlet(labels, 10, alpha=0.3, seed=6)
    splits = split_train_test(parts, labels, test_fraction=0.25, seed=6)
    for train, test in splits:
        assert len(train) >= 1 and len(test) >= 1
        assert not np.intersect1d(train, test).size
        classes = np.unique(labels[np.concatenate([train, test])])
        h_train = np.array([(labels[train] == c).mean() for c in classes])
        h_test = np.array([(labels[test] == c).mean() for c in classes])
        assert 0.5 * np.abs(h_train - h_test).sum() < 0.1


# ---------------------------------------------------------------------------
# feature skew


def test_feature_skew_balanced_labels():
    ds = make_feature_skew(n_clients=3, n_per_client=40, dim=4, num_classes=4, seed=7)
    ds.validate()
    for train, test in ds.clients:
        idx = np.concatenate([train, test])
        counts = np.bincount(ds.store.labels[idx], minlength=4)
        assert (counts == 10).all()


def test_feature_skew_identity_transforms_are_iid():
    dim = 6
    ds = make_feature_skew(n_clients=2, n_per_client=3000, dim=dim, num_classes=3,
                           seed=8, transforms=[np.eye(dim)] * 2)
    xa, _ = ds.train_xy(0)
    xb, _ = ds.train_xy(1)
    pooled_std = np.sqrt(xa.var(axis=0) / len(xa) + xb.var(axis=0) / len(xb))
    z = np.abs(xa.mean(axis=0) - xb.mean(axis=0)) / pooled_std
    assert z.max() < 4.0  # two-sample mean test, ~3 sigma with slack


def test_feature_skew_covariance_follows_transform():
    dim = 5
    rng = np.random.default_rng(9)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    a = q @ np.diag(rng.uniform(0.6, 1.8, dim))
    big = 4000
    ds_id = make_feature_skew(n_clients=2, n_per_client=big, dim=dim, num_classes=4,
                              seed=10, transforms=[np.eye(dim)] * 2)
    pooled = np.vstack([ds_id.train_xy(0)[0], ds_id.train_xy(1)[0]])
    sigma_mix = np.cov(pooled.T)
    ds_a = make_feature_skew(n_clients=2, n_per_client=big, dim=dim, num_classes=4,
                             seed=10, transforms=[np.eye(dim), a])
    x1 = np.vstack([ds_a.train_xy(1)[0], ds_a.test_xy(1)[0]])
    emp = np.cov(x1.T)
    expected = a @ sigma_mix @ a.T
    rel = np.linalg.norm(emp - expected) / np.linalg.norm(expected)
    assert rel < 0.15


def test_feature_skew_transforms_differ_across_clients():
    ds = make_feature_skew(n_clients=3, n_per_client=2000, dim=4, num_classes=2,
                           seed=11)
    covs = [np.cov(ds.train_xy(i)[0].T) for i in range(3)]
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(covs[i] - covs[j]) > 0.5


def test_feature_skew_needs_divisible_labels():
    with pytest.raises(ValueError):
        make_feature_skew(n_clients=2, n_per_client=10, dim=4, num_classes=3, seed=0)


# ---------------------------------------------------------------------------
# noise skew


def test_noise_skew_client_zero_untouched():
    base = make_feature_skew(n_clients=3, n_per_client=40, dim=4, num_classes=4,
                             seed=12)
    noisy = make_noise_skew(base, sigma_max=2.0, seed=12)
    rows0 = np.concatenate(base.clients[0])
    assert np.array_equal(noisy.store.features.data[rows0],
                          base.store.features.data[rows0])


def test_noise_skew_last_client_std():
    base = make_feature_skew(n_clients=3, n_per_client=1200, dim=4, num_classes=4,
                             seed=13)
    sigma_max = 1.5
    noisy = make_noise_skew(base, sigma_max=sigma_max, seed=13)
    rows = np.concatenate(base.clients[2])
    delta = noisy.store.features.data[rows] - base.store.features.data[rows]
    assert abs(delta.std() - sigma_max) < 0.05 * sigma_max


def test_noise_skew_zero_sigma_is_identity():
    base = make_feature_skew(n_clients=2, n_per_client=40, dim=4, num_classes=4,
                             seed=14)
    noisy = make_noise_skew(base, sigma_max=0.0, seed=14)
    assert np.array_equal(noisy.store.features.data, base.store.features.data)


def test_noise_skew_needs_two_clients():
    base = make_feature_skew(n_clients=2, n_per_client=40, dim=4, num_classes=4,
                             seed=15)
    base.clients = base.clients[:1]
    with pytest.raises(ValueError):
        make_noise_skew(base, sigma_max=1.0, seed=0)


# ---------------------------------------------------------------------------
# regression clients


def test_regression_centered_training_inputs():
    ds = make_regression_clients(3, 6, 5, seed=16)
    for i in range(3):
        x, _ = ds.train_xy(i)
        assert np.abs(x.mean(axis=0)).max() < 1e-12


def test_regression_no_collinear_pair():
    ds = make_regression_clients(3, 6, 5, seed=17)
    x = np.vstack([ds.train_xy(i)[0] for i in range(3)])
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    cos = np.abs(unit @ unit.T)
    np.fill_diagonal(cos, 0.0)
    assert cos.max() <= 1.0 - 1e-9


def test_regression_nonidentity_covariance():
    ds = make_regression_clients(3, 6, 5, seed=18)
    covs = ds.heterogeneity.params["covariances"]
    assert any(np.linalg.norm(c - np.eye(5)) > 0.1 for c in covs)


def test_regression_covariance_matches_draws():
    ds = make_regression_clients(2, 4000, 4, seed=19)
    for i in range(2):
        x, _ = ds.train_xy(i)
        emp = (x.T @ x) / len(x)
        target = ds.heterogeneity.params["covariances"][i]
        assert np.linalg.norm(emp - target) / np.linalg.norm(target) < 0.1


def test_regression_needs_two_samples():
    with pytest.raises(ValueError):
        make_regression_clients(2, 1, 4, seed=0)


# ---------------------------------------------------------------------------
# IDX format


def test_idx_hand_built_file(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(bytes([0, 0, 8, 3]) +
                    (2).to_bytes(4, "big") + (2).to_bytes(4, "big") +
                    (2).to_bytes(4, "big") +
                    bytes([0, 255, 128, 64, 255, 0, 32, 16]))
    lab.write_bytes(bytes([0, 0, 8, 1]) + (2).to_bytes(4, "big") + bytes([3, 1]))
    store = load_idx(str(img), str(lab))
    assert store.features.data.shape == (2, 4)
    np.testing.assert_allclose(store.features.data[0],
                               [0.0, 1.0, 128 / 255, 64 / 255])
    np.testing.assert_array_equal(store.labels, [3, 1])


def test_idx_count_mismatch(tmp_path):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(bytes([0, 0, 8, 2]) + (2).to_bytes(4, "big") +
                    (3).to_bytes(4, "big") + bytes(6))
    lab.write_bytes(bytes([0, 0, 8, 1]) + (3).to_bytes(4, "big") + bytes(3))
    with pytest.raises(ValueError, match="count mismatch"):
        load_idx(str(img), str(lab))


def test_idx_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(bytes([1, 0, 8, 1]) + (1).to_bytes(4, "big") + bytes(1))
    with pytest.raises(ValueError, match="magic"):
        load_idx(str(bad), str(bad))
    short = tmp_path / "short.idx"
    short.write_bytes(bytes([0, 0, 8, 1]) + (10).to_bytes(4, "big") + bytes(3))
    with pytest.raises(ValueError, match="truncated"):
        load_idx(str(short), str(short))


def test_idx_round_trip(tmp_path):
    store = make_classification_store(20, 6, 3, seed=20)
    store.features.data[...] = np.abs(store.features.data)
    store.features.data[...] /= store.features.data.max()
    img, lab = str(tmp_path / "f.idx"), str(tmp_path / "l.idx")
    save_idx(store, img, lab)
    loaded = load_idx(img, lab)
    assert np.abs(loaded.features.data - store.features.data).max() <= 1.0 / 255
    np.testing.assert_array_equal(loaded.labels, store.labels)
