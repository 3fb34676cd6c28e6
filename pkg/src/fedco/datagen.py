"""Seeded construction of heterogeneous federated datasets.

Covers label-distribution skew (Dirichlet and pathological class
assignment), feature skew (per-client linear domain transforms), additive
Gaussian noise skew, theory-side regression clients with per-client SPD
covariances, plus IDX flat-binary ingestion for small real datasets.
All generators are pure functions of (inputs, seed).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Tensor

_MAX_RETRIES = 100


@dataclass
class SampleStore:
    """A flat sample table: features n x d plus aligned labels."""

    features: Tensor
    labels: np.ndarray

    def __post_init__(self):
        if self.features.data.ndim != 2:
            raise ValueError(f"features must be n x d, got {self.features.data.shape}")
        n = self.features.data.shape[0]
        if n < 1 or len(self.labels) != n:
            raise ValueError(f"labels length {len(self.labels)} != sample count {n}")

    @property
    def n_samples(self) -> int:
        return self.features.data.shape[0]

    @property
    def dim(self) -> int:
        return self.features.data.shape[1]


@dataclass
class Heterogeneity:
    kind: str
    params: dict
    seed: int

    def to_dict(self) -> dict:
        plain = {k: v for k, v in self.params.items() if not isinstance(v, np.ndarray)}
        return {"kind": self.kind, "params": plain, "seed": self.seed}


@dataclass
class FederatedDataset:
    store: SampleStore
    clients: list[tuple[np.ndarray, np.ndarray]]  # (train indices, test indices)
    heterogeneity: Heterogeneity = field(
        default_factory=lambda: Heterogeneity("none", {}, 0))

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    def train_xy(self, client: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.clients[client][0]
        return self.store.features.data[idx], self.store.labels[idx]

    def test_xy(self, client: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.clients[client][1]
        return self.store.features.data[idx], self.store.labels[idx]

    def validate(self) -> None:
        for i, (train, test) in enumerate(self.clients):
            if len(train) < 1 or len(test) < 1:
                raise ValueError(f"client {i} is missing train or test samples")
            if np.intersect1d(train, test).size:
                raise ValueError(f"client {i} train/test splits overlap")


# ---------------------------------------------------------------------------
# partitions over an existing label array


def partition_dirichlet(labels: np.ndarray, n_clients: int, alpha: float,
                        seed: int) -> list[np.ndarray]:
    """Per class, sample client proportions ~ Dir(alpha) and split that
    class's indices accordingly. Resamples the whole assignment if any client
    would end up empty (bounded retries)."""
    labels = np.asarray(labels)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > len(labels):
        raise ValueError(f"cannot spread {len(labels)} samples over {n_clients} clients")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(_MAX_RETRIES):
        shares: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for cls in classes:
            idx = np.flatnonzero(labels == cls)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                shares[client].append(part)
        assignments = [np.sort(np.concatenate(parts)) for parts in shares]
        if all(len(a) > 0 for a in assignments):
            return assignments
    raise RuntimeError(
        f"could not produce a Dirichlet partition without empty clients in {_MAX_RETRIES} tries")


def partition_pathological(labels: np.ndarray, n_clients: int,
                           classes_per_client: int, seed: int) -> list[np.ndarray]:
    """Assign each client a fixed number of classes; split each class across
    its holders proportionally to normalized U(0.4, 0.6) rate draws."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes_per_client > len(classes):
        raise ValueError("classes_per_client exceeds the number of classes")
    if n_clients * classes_per_client < len(classes):
        raise ValueError("not enough client-class slots to cover every class")
    rng = np.random.default_rng(seed)
    class_values = [int(c) for c in classes]

    for _ in range(_MAX_RETRIES):
        held = [set(rng.choice(class_values, size=classes_per_client,
                               replace=False).tolist())
                for _ in range(n_clients)]
        if set().union(*held) == set(class_values):
            break
    else:
        raise RuntimeError(f"class coverage failed after {_MAX_RETRIES} reshuffles")

    shares: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in class_values:
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        who = [i for i, h in enumerate(held) if cls in h]
        q = rng.uniform(0.4, 0.6, size=len(who))
        rates = q / q.sum()
        cuts = (np.cumsum(rates)[:-1] * len(idx)).astype(int)
        for client, part in zip(who, np.split(idx, cuts)):
            shares[client].append(part)
    return [np.sort(np.concatenate(parts)) for parts in shares]


def split_train_test(assignments: Sequence[np.ndarray], labels: np.ndarray,
                     test_fraction: float, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified per-client train/test split.

    The split is done class-by-class inside each client so its train and test
    label distributions stay consistent. Every client ends up with at least
    one train and one test sample.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    splits: list[tuple[np.ndarray, np.ndarray]] = []
    for idx in assignments:
        train_parts, test_parts = [], []
        for cls in np.unique(labels[idx]):
            members = idx[labels[idx] == cls]
            rng.shuffle(members)
            if len(members) < 2:
                train_parts.append(members)
                continue
            n_test = int(round(test_fraction * len(members)))
            n_test = min(max(n_test, 1), len(members) - 1)
            test_parts.append(members[:n_test])
            train_parts.append(members[n_test:])
        train = np.sort(np.concatenate(train_parts)) if train_parts else np.array([], dtype=int)
        test = np.sort(np.concatenate(test_parts)) if test_parts else np.array([], dtype=int)
        if len(test) == 0 and len(train) > 1:
            # every class was a singleton: peel one sample off for testing
            train, test = train[:-1], train[-1:]
        if len(train) == 0 or len(test) == 0:
            raise ValueError("a client has too few samples for a train/test split")
        splits.append((train, test))
    return splits


def mean_label_tv(labels: np.ndarray, assignments: Sequence[np.ndarray]) -> float:
    """Mean total-variation distance between client label histograms and the
    global histogram; the heterogeneity scalar used in monotonicity checks."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    global_hist = np.array([(labels == c).mean() for c in classes])
    tvs = []
    for idx in assignments:
        local = labels[idx]
        hist = np.array([(local == c).mean() for c in classes])
        tvs.append(0.5 * np.abs(hist - global_hist).sum())
    return float(np.mean(tvs))


# ---------------------------------------------------------------------------
# synthetic sources


def make_classification_store(n_samples: int, dim: int, num_classes: int,
                              seed: int, class_sep: float = 2.0) -> SampleStore:
    """Gaussian-blob classification source with shared class means."""
    if n_samples < num_classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(num_classes, dim))
    labels = rng.integers(0, num_classes, size=n_samples)
    features = means[labels] + rng.normal(size=(n_samples, dim))
    return SampleStore(Tensor(features), labels.astype(np.int64))


def make_feature_skew(n_clients: int, n_per_client: int, dim: int,
                      num_classes: int, seed: int, test_fraction: float = 0.2,
                      class_sep: float = 2.0,
                      transforms: Sequence[np.ndarray] | None = None,
                      scale_range: tuple[float, float] = (0.5, 2.0)) -> FederatedDataset:
    """Clients draw from one class-mean mixture pushed through per-client
    invertible transforms (random rotation x diagonal scaling).

    Labels are exactly balanced within each client, so ``n_per_client`` must
    be divisible by ``num_classes``. Passing explicit ``transforms`` (e.g.
    identities) disables the domain shift.
    """
    if dim < 2:
        raise ValueError("feature skew needs dim >= 2")
    if n_per_client % num_classes != 0:
        raise ValueError("n_per_client must be divisible by num_classes")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, class_sep, size=(num_classes, dim))
    if transforms is None:
        transforms = []
        for _ in range(n_clients):
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            scales = rng.uniform(scale_range[0], scale_range[1], size=dim)
            transforms.append(q @ np.diag(scales))
    elif len(transforms) != n_clients:
        raise ValueError("need one transform per client")

    per_class = n_per_client // num_classes
    features, labels, clients = [], [], []
    offset = 0
    for i in range(n_clients):
        y = np.repeat(np.arange(num_classes), per_class)
        rng.shuffle(y)
        raw = means[y] + rng.normal(size=(n_per_client, dim))
        features.append(raw @ transforms[i].T)
        labels.append(y)
        # per-class split keeps both sides exactly balanced
        train_parts, test_parts = [], []
        for cls in range(num_classes):
            rows = offset + np.flatnonzero(y == cls)
            rng.shuffle(rows)
            n_test = min(max(int(round(test_fraction * per_class)), 1), per_class - 1)
            test_parts.append(rows[:n_test])
            train_parts.append(rows[n_test:])
        clients.append((np.sort(np.concatenate(train_parts)),
                        np.sort(np.concatenate(test_parts))))
        offset += n_per_client

    store = SampleStore(Tensor(np.vstack(features)),
                        np.concatenate(labels).astype(np.int64))
    het = Heterogeneity("feature_skew",
                        {"n_clients": n_clients, "n_per_client": n_per_client,
                         "scale_range": list(scale_range), "class_sep": class_sep},
                        seed)
    return FederatedDataset(store, clients, het)


def make_noise_skew(base: FederatedDataset, sigma_max: float, seed: int) -> FederatedDataset:
    """Additive Gaussian noise ramped over clients: sigma_i = sigma_max*i/(N-1).

    Client 0 is left bitwise untouched. Returns a new dataset over a copied
    sample store.
    """
    n = base.n_clients
    if n < 2:
        raise ValueError("noise skew needs at least 2 clients")
    rng = np.random.default_rng(seed)
    features = base.store.features.data.copy()
    for i, (train, test) in enumerate(base.clients):
        sigma = sigma_max * i / (n - 1)
        if sigma > 0.0:
            rows = np.concatenate([train, test])
            features[rows] += rng.normal(0.0, sigma, size=(len(rows), features.shape[1]))
    store = SampleStore(Tensor(features), base.store.labels.copy())
    het = Heterogeneity("noise_skew",
                        {"sigma_max": sigma_max, "base": base.heterogeneity.to_dict()},
                        seed)
    return FederatedDataset(store, [(t.copy(), s.copy()) for t, s in base.clients], het)


def make_regression_clients(n_clients: int, samples_per_client: int, dim: int,
                            seed: int, noise_std: float = 0.01) -> FederatedDataset:
    """Regression clients with per-client SPD input covariances.

    Inputs are drawn N(0, S_i) with S_i = Q diag(u) Q^T, then explicitly
    centered per client; targets come from one shared smooth map plus small
    noise. Draws are rejected wholesale if any two inputs are collinear.
    Needs samples_per_client >= 2 (centering a single sample would zero it).
    """
    if dim < 2:
        raise ValueError("regression clients need dim >= 2")
    if samples_per_client < 2:
        raise ValueError("need samples_per_client >= 2 for empirical centering")
    rng = np.random.default_rng(seed)
    target_w = rng.normal(size=dim) / np.sqrt(dim)
    covariances = []
    for _ in range(n_clients):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        covariances.append(q @ np.diag(rng.uniform(0.5, 2.0, size=dim)) @ q.T)

    n_test = max(1, samples_per_client // 4)
    for _ in range(_MAX_RETRIES):
        feats, ys, clients, train_rows = [], [], [], []
        offset = 0
        for i in range(n_clients):
            sqrt_cov = np.linalg.cholesky(covariances[i])
            x = rng.normal(size=(samples_per_client + n_test, dim)) @ sqrt_cov.T
            # empirical centering applies to the training inputs, which are
            # the points entering the Gram matrices; held-out rows stay as
            # drawn (their distribution is centered already)
            x[:samples_per_client] -= x[:samples_per_client].mean(axis=0)
            y = np.sin(x @ target_w) + noise_std * rng.normal(size=len(x))
            feats.append(x)
            ys.append(y)
            idx = offset + np.arange(samples_per_client + n_test)
            clients.append((idx[:samples_per_client], idx[samples_per_client:]))
            train_rows.append(x[:samples_per_client])
            offset += samples_per_client + n_test
        x_train = np.vstack(train_rows)
        norms = np.linalg.norm(x_train, axis=1)
        if norms.min() < 1e-12:
            continue
        cosines = np.abs((x_train / norms[:, None]) @ (x_train / norms[:, None]).T)
        np.fill_diagonal(cosines, 0.0)
        if cosines.max() <= 1.0 - 1e-9:
            x_all = np.vstack(feats)
            store = SampleStore(Tensor(x_all), np.concatenate(ys))
            het = Heterogeneity("regression",
                                {"n_clients": n_clients, "samples_per_client": samples_per_client,
                                 "noise_std": noise_std, "covariances": covariances},
                                seed)
            return FederatedDataset(store, clients, het)
    raise RuntimeError("could not draw non-collinear regression inputs")


def regression_points(ds: FederatedDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Training points of a regression dataset in client-major order.

    Returns (X, client_ids, y); this ordering gives the Gram matrices their
    client-block structure.
    """
    xs, ids, ys = [], [], []
    for i, (train, _test) in enumerate(ds.clients):
        xs.append(ds.store.features.data[train])
        ys.append(ds.store.labels[train])
        ids.append(np.full(len(train), i))
    return np.vstack(xs), np.concatenate(ids), np.concatenate(ys)


# ---------------------------------------------------------------------------
# IDX flat binary format


def _read_idx(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: bad IDX magic")
    if raw[2] != 0x08:
        raise ValueError(f"{path}: unsupported IDX type byte 0x{raw[2]:02x} (want 0x08)")
    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    expected = int(np.prod(dims)) if dims else 0
    body = np.frombuffer(raw, dtype=np.uint8, offset=header_end)
    if body.size != expected:
        raise ValueError(f"{path}: truncated IDX data ({body.size} bytes, expected {expected})")
    return body.reshape(dims)


def load_idx(features_path: str, labels_path: str) -> SampleStore:
    """Parse an IDX image/label file pair into a sample store.

    Pixel bytes are scaled to [0, 1]; images are flattened row-major.
    """
    images = _read_idx(features_path)
    labels = _read_idx(labels_path)
    if images.ndim < 2:
        raise ValueError(f"{features_path}: expected at least 2 dimensions")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: labels must be one-dimensional")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return SampleStore(Tensor(flat), labels.astype(np.int64))


def save_idx(store: SampleStore, features_path: str, labels_path: str) -> None:
    """Write a sample store as an IDX pair (features quantized to bytes)."""
    feats = np.clip(np.round(store.features.data * 255.0), 0, 255).astype(np.uint8)
    with open(features_path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, 2))
        fh.write(struct.pack(">2I", *feats.shape))
        fh.write(feats.tobytes())
    labels = store.labels.astype(np.uint8)
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, 0x08, 1))
        fh.write(struct.pack(">I", labels.shape[0]))
        fh.write(labels.tobytes())
