"""Two-layer BN regression networks and the kernel-eigenvalue verifier.

This module numerically grounds the convergence comparison between the
shared online model, the fully local offline model, and their average:

* auxiliary Gram matrices are estimated by Monte Carlo over first-layer
  weight draws, with common random numbers so the offline matrix is exactly
  the client-block-diagonal restriction of the online one;
* the minimum-eigenvalue ordering (offline >= online, average >= online)
  then follows from eigenvalue interlacing and concavity of the minimum
  eigenvalue, and is checked per trial with a deterministic tolerance;
* full-batch gradient-descent trajectories of the three models embody the
  predicted rate ordering.

Two finite-width evaluations coexist. ``gram_time_t`` evaluates the exact
NTK kernel formulas (with activation indicators and data-norm factors) used
for diagnostics of the evolution matrix V(t)/alpha^2 + G(t).
``gram_width_estimate`` instead averages the auxiliary-matrix integrand over
the net's own first-layer draws; at initialization those draws are i.i.d.
N(0, alpha^2 I), which makes it the finite-sample counterpart of the Monte
Carlo estimate and the right object for cross-validating the two estimators.
The kernel formula at t=0 is *not* an unbiased estimate of the auxiliary
matrix (its indicator and norm factors do not integrate away), so the two
evaluations answer different questions and both are kept.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .datagen import FederatedDataset, make_regression_clients, regression_points
from .numerics import NumericalError, jacobi_eigenvalues, sym_eig_min

_MC_SHARD = 16384
_DATA_TAG, _NET_TAG, _VON_TAG, _VOFF_TAG = 11, 13, 0, 1


@dataclass
class TheoryConfig:
    n_clients: int = 3
    samples_per_client: int = 4
    input_dim: int = 5
    width: int = 256
    alpha: float = 0.5
    mc_samples: int = 100_000
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.mc_samples < 1000:
            raise ValueError("mc_samples must be >= 1000")
        if min(self.n_clients, self.samples_per_client, self.input_dim, self.width) < 1:
            raise ValueError("dimensions must be positive")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class TwoLayerBNNet:
    """First-layer weights, BN scales and sign outputs of one model.

    ``kind`` is "online" (v: width x d shared, c: width) or "offline"
    (v: N x width x d per client, c: width x N). ``gamma`` is width x N for
    both. ``covariances`` holds the per-client SPD input covariances that
    define the normalizing norms.
    """

    kind: str
    v: np.ndarray
    gamma: np.ndarray
    c: np.ndarray
    covariances: np.ndarray

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    @property
    def n_clients(self) -> int:
        return self.gamma.shape[1]

    def copy(self) -> "TwoLayerBNNet":
        return TwoLayerBNNet(self.kind, self.v.copy(), self.gamma.copy(),
                             self.c.copy(), self.covariances)


def _seed_ints(*entropy: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(entropy).generate_state(4)]


def init_theory_net(cfg: TheoryConfig,
                    covariances: np.ndarray) -> tuple[TwoLayerBNNet, TwoLayerBNNet]:
    """Tied initialization of the online and offline nets.

    First-layer rows are N(0, alpha^2 I) and copied into every offline
    client; signs are uniform in {-1, +1} and shared; every BN scale starts
    at ||v_k(0)||_2 / alpha.
    """
    cfg.validate()
    covariances = np.asarray(covariances, dtype=np.float64)
    n, d = cfg.n_clients, cfg.input_dim
    if covariances.shape != (n, d, d):
        raise ValueError(f"covariances shape {covariances.shape} != {(n, d, d)}")
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _NET_TAG)))
    v0 = rng.normal(0.0, cfg.alpha, size=(cfg.width, d))
    c0 = rng.choice(np.array([-1.0, 1.0]), size=cfg.width)
    gamma0 = np.tile(np.linalg.norm(v0, axis=1) / cfg.alpha, (n, 1)).T
    online = TwoLayerBNNet("online", v0.copy(), gamma0.copy(), c0.copy(), covariances)
    offline = TwoLayerBNNet("offline",
                            np.repeat(v0[None, :, :], n, axis=0),
                            gamma0.copy(),
                            np.tile(c0[:, None], (1, n)),
                            covariances)
    return online, offline


def _s_norms(v: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Row-wise induced norms sqrt(v_k^T S v_k)."""
    return np.sqrt(np.einsum("kd,de,ke->k", v, cov, v))


def forward_theory(net, kind: str, x: np.ndarray, client: int) -> float:
    """Evaluate one model on a single input belonging to ``client``.

    ``kind`` selects the online net, the offline net, or their arithmetic
    mean ("fedco2"); for the mean pass the (online, offline) pair as ``net``.
    """
    x = np.asarray(x, dtype=np.float64)
    if kind == "fedco2":
        online, offline = net
        return 0.5 * (forward_theory(online, "online", x, client)
                      + forward_theory(offline, "offline", x, client))
    if kind == "online":
        v, c = net.v, net.c
    elif kind == "offline":
        v, c = net.v[client], net.c[:, client]
    else:
        raise ValueError(f"unknown forward kind {kind!r}")
    norms = _s_norms(v, net.covariances[client])
    if norms.min() <= 0.0:
        raise NumericalError("degenerate first-layer weight: zero induced norm")
    act = np.maximum(net.gamma[:, client] * (v @ x) / norms, 0.0)
    return float(c @ act / np.sqrt(net.width))


def _forward_batch(online: TwoLayerBNNet, offline: TwoLayerBNNet | None,
                   x_pts: np.ndarray, ids: np.ndarray,
                   kind: str) -> np.ndarray:
    """Vectorized forward over all points (client-major not required)."""
    out = np.zeros(len(x_pts))
    if kind in ("online", "fedco2"):
        norms = np.stack([_s_norms(online.v, online.covariances[i])
                          for i in range(online.n_clients)], axis=1)  # m x N
        z = x_pts @ online.v.T  # P x m
        act = np.maximum(z * (online.gamma[:, ids] / norms[:, ids]).T, 0.0)
        f_on = act @ online.c / np.sqrt(online.width)
        out = f_on if kind == "online" else out
    if kind in ("offline", "fedco2"):
        f_off = np.zeros(len(x_pts))
        for i in range(offline.n_clients):
            rows = np.flatnonzero(ids == i)
            if rows.size == 0:
                continue
            v_i = offline.v[i]
            norms_i = _s_norms(v_i, offline.covariances[i])
            act = np.maximum((x_pts[rows] @ v_i.T) * (offline.gamma[:, i] / norms_i), 0.0)
            f_off[rows] = act @ offline.c[:, i] / np.sqrt(offline.width)
        out = f_off if kind == "offline" else 0.5 * (f_on + f_off)
    return out


def mse_loss(nets: tuple[TwoLayerBNNet, TwoLayerBNNet],
             dataset: FederatedDataset) -> float:
    """Mean squared error of the averaged (ensemble) model on the training
    points of a regression dataset."""
    online, offline = nets
    x_pts, ids, y = regression_points(dataset)
    pred = _forward_batch(online, offline, x_pts, ids, "fedco2")
    return float(np.mean((pred - y) ** 2))


def perp_projection(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Component of x orthogonal to v."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    n2 = float(v @ v)
    if n2 == 0.0:
        raise ValueError("cannot project against the zero vector")
    return x - v * (float(v @ x) / n2)


# ---------------------------------------------------------------------------
# auxiliary Gram matrices


@dataclass
class GramEstimate:
    matrix: np.ndarray
    stderr: float
    mc_samples: int


def block_mask(ids: np.ndarray) -> np.ndarray:
    """1.0 where two points share a client, else 0.0."""
    ids = np.asarray(ids)
    return (ids[:, None] == ids[None, :]).astype(np.float64)


def _draw_directions(rng: np.random.Generator, count: int, dim: int,
                     alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Weight draws with their squared norms; degenerate rows are redrawn."""
    v = rng.normal(0.0, alpha, size=(count, dim))
    n2 = np.einsum("sd,sd->s", v, v)
    for _ in range(100):
        bad = np.flatnonzero(n2 < 1e-24)
        if bad.size == 0:
            return v, n2
        v[bad] = rng.normal(0.0, alpha, size=(bad.size, dim))
        n2[bad] = np.einsum("sd,sd->s", v[bad], v[bad])
    raise NumericalError("could not draw non-degenerate weight samples")


def _mc_gram(x_pts: np.ndarray, alpha: float, mc_samples: int, seed: int,
             stream_tag: int) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo mean and per-entry standard error of the auxiliary
    integrand alpha^2 <x_p perp v, x_q perp v> over v ~ N(0, alpha^2 I).

    Deterministic for a fixed shard size: shard s uses the RNG stream
    (seed, stream_tag, s) and shards are reduced in order.
    """
    p, dim = x_pts.shape
    if dim == 1:
        # perpendicular components vanish identically in one dimension
        return np.zeros((p, p)), np.zeros((p, p))
    base = x_pts @ x_pts.T
    sum_proj = np.zeros((p, p))
    sum_proj_sq = np.zeros((p, p))
    done = 0
    shard = 0
    while done < mc_samples:
        count = min(_MC_SHARD, mc_samples - done)
        rng = np.random.default_rng(np.random.SeedSequence((seed, stream_tag, shard)))
        v, n2 = _draw_directions(rng, count, dim, alpha)
        u = x_pts @ v.T  # P x count
        w = u / np.sqrt(n2)
        q = u * u / n2
        sum_proj += w @ w.T
        sum_proj_sq += q @ q.T
        done += count
        shard += 1
    mean_proj = sum_proj / mc_samples
    mean = alpha ** 2 * (base - mean_proj)
    var = alpha ** 4 * np.maximum(sum_proj_sq / mc_samples - mean_proj ** 2, 0.0)
    stderr = np.sqrt(var / mc_samples)
    return (mean + mean.T) / 2.0, stderr


def estimate_gram_von(x_pts: np.ndarray, ids: np.ndarray,
                      cfg: TheoryConfig) -> GramEstimate:
    """Monte-Carlo estimate of the online auxiliary Gram matrix."""
    cfg.validate()
    _check_points(x_pts, ids)
    mean, stderr = _mc_gram(np.asarray(x_pts, dtype=np.float64), cfg.alpha,
                            cfg.mc_samples, cfg.seed, _VON_TAG)
    return GramEstimate(mean, float(stderr.max()), cfg.mc_samples)


def estimate_gram_voff(x_pts: np.ndarray, ids: np.ndarray, cfg: TheoryConfig,
                       shared_draws: bool = True) -> GramEstimate:
    """Monte-Carlo estimate of the offline auxiliary Gram matrix.

    With ``shared_draws`` (the default) the exact weight samples of the
    paired online estimate are reused, so the result is bitwise the
    client-block-diagonal restriction of ``estimate_gram_von``'s matrix.
    """
    cfg.validate()
    _check_points(x_pts, ids)
    mask = block_mask(ids)
    if shared_draws:
        von = estimate_gram_von(x_pts, ids, cfg)
        return GramEstimate(von.matrix * mask, von.stderr, von.mc_samples)
    mean, stderr = _mc_gram(np.asarray(x_pts, dtype=np.float64), cfg.alpha,
                            cfg.mc_samples, cfg.seed, _VOFF_TAG)
    return GramEstimate(mean * mask, float((stderr * mask).max()), cfg.mc_samples)


def _check_points(x_pts: np.ndarray, ids: np.ndarray) -> None:
    x_pts = np.asarray(x_pts)
    ids = np.asarray(ids)
    if x_pts.ndim != 2 or len(ids) != len(x_pts):
        raise ValueError("points must be P x d with one client id per point")
    norms = np.linalg.norm(x_pts, axis=1)
    if norms.min() < 1e-12:
        raise ValueError("a sample point is (numerically) zero")
    if x_pts.shape[1] > 1:
        unit = x_pts / norms[:, None]
        cos = np.abs(unit @ unit.T)
        np.fill_diagonal(cos, 0.0)
        if cos.max() > 1.0 - 1e-9:
            raise ValueError("collinear sample pair violates the data assumption")


def gram_width_estimate(net: TwoLayerBNNet, x_pts: np.ndarray, ids: np.ndarray,
                        which: str) -> GramEstimate:
    """Average of the auxiliary-matrix integrand over the net's own
    first-layer rows.

    At initialization the rows are i.i.d. N(0, alpha^2 I) draws, making this
    a width-sample Monte-Carlo estimate of the corresponding infinite-width
    matrix (the cross-validation partner of ``estimate_gram_von``).
    """
    x_pts = np.asarray(x_pts, dtype=np.float64)
    p, dim = x_pts.shape
    if which == "V_on":
        v = net.v if net.kind == "online" else net.v[0]
        rows = [(np.arange(p), v)]
    elif which == "V_off":
        if net.kind != "offline":
            raise ValueError("V_off needs the offline net")
        rows = [(np.flatnonzero(ids == i), net.v[i]) for i in range(net.n_clients)]
    else:
        raise ValueError(f"unknown matrix kind {which!r}")
    m = net.width
    mean = np.zeros((p, p))
    var = np.zeros((p, p))
    if dim == 1:
        return GramEstimate(mean, 0.0, m)
    alpha2 = _infer_alpha_sq(net)
    for idx, v in rows:
        if idx.size == 0:
            continue
        x_sub = x_pts[idx]
        n2 = np.einsum("kd,kd->k", v, v)
        u = x_sub @ v.T
        w = u / np.sqrt(n2)
        q = u * u / n2
        base = x_sub @ x_sub.T
        mean_proj = (w @ w.T) / m
        sub_mean = alpha2 * (base - mean_proj)
        sub_var = alpha2 ** 2 * np.maximum((q @ q.T) / m - mean_proj ** 2, 0.0)
        mean[np.ix_(idx, idx)] = (sub_mean + sub_mean.T) / 2.0
        var[np.ix_(idx, idx)] = sub_var
    return GramEstimate(mean, float(np.sqrt(var / m).max()), m)


def _infer_alpha_sq(net: TwoLayerBNNet) -> float:
    """alpha^2 recovered from the tied initialization gamma = ||v||/alpha."""
    if net.kind == "online":
        v0, g0 = net.v[0], net.gamma[0, 0]
    else:
        v0, g0 = net.v[0, 0], net.gamma[0, 0]
    return float(v0 @ v0) / float(g0 * g0)


def gram_time_t(net: TwoLayerBNNet, x_pts: np.ndarray, ids: np.ndarray,
                which: str) -> np.ndarray:
    """Exact finite-width kernel matrices of the evolution decomposition.

    ``V_on``/``G_on`` need the online net; ``V_off`` the offline net. These
    carry the activation indicators and the per-client induced-norm factors,
    i.e. they are the time-t kernels, not the auxiliary matrices.
    """
    x_pts = np.asarray(x_pts, dtype=np.float64)
    ids = np.asarray(ids)
    p = len(x_pts)
    m = net.width
    alpha2 = _infer_alpha_sq(net)
    if which in ("V_on", "G_on"):
        if net.kind != "online":
            raise ValueError(f"{which} needs the online net")
        norms = np.stack([_s_norms(net.v, net.covariances[i])
                          for i in range(net.n_clients)], axis=1)  # m x N
        if norms.min() <= 0.0:
            raise NumericalError("degenerate first-layer weight: zero induced norm")
        z = x_pts @ net.v.T  # P x m
        inv_row = 1.0 / norms[:, ids].T  # P x m
        if which == "G_on":
            r = np.maximum(z, 0.0) * inv_row
            return (r @ r.T) / m * block_mask(ids)
        ind = (z >= 0.0).astype(np.float64)
        s = np.sqrt(alpha2) * net.gamma[:, ids].T * inv_row * ind
        n2 = np.einsum("kd,kd->k", net.v, net.v)
        t1 = (x_pts @ x_pts.T) * (s @ s.T)
        w = s * z / np.sqrt(n2)
        return (t1 - w @ w.T) / m
    if which == "V_off":
        if net.kind != "offline":
            raise ValueError("V_off needs the offline net")
        out = np.zeros((p, p))
        for i in range(net.n_clients):
            rows = np.flatnonzero(ids == i)
            if rows.size == 0:
                continue
            v_i = net.v[i]
            norms_i = _s_norms(v_i, net.covariances[i])
            if norms_i.min() <= 0.0:
                raise NumericalError("degenerate first-layer weight: zero induced norm")
            x_sub = x_pts[rows]
            z = x_sub @ v_i.T
            ind = (z >= 0.0).astype(np.float64)
            s = np.sqrt(alpha2) * (net.gamma[:, i] / norms_i) * ind
            n2 = np.einsum("kd,kd->k", v_i, v_i)
            t1 = (x_sub @ x_sub.T) * (s @ s.T)
            w = s * z / np.sqrt(n2)
            out[np.ix_(rows, rows)] = (t1 - w @ w.T) / m
        return out
    raise ValueError(f"unknown matrix kind {which!r}")


def evolution_matrix(online: TwoLayerBNNet, x_pts: np.ndarray,
                     ids: np.ndarray) -> np.ndarray:
    """Diagnostic evolution kernel V_on(t)/alpha^2 + G_on(t)."""
    alpha2 = _infer_alpha_sq(online)
    return (gram_time_t(online, x_pts, ids, "V_on") / alpha2
            + gram_time_t(online, x_pts, ids, "G_on"))


# ---------------------------------------------------------------------------
# theorem check


@dataclass
class TrialResult:
    trial: int
    data_seed: int
    lambda_on: float
    lambda_off: float
    lambda_mix: float
    stderr: float
    off_ok: bool
    mix_ok: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Theorem1Report:
    config: dict
    tolerance: float
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def all_passed(self) -> bool:
        return all(t.off_ok and t.mix_ok for t in self.trials)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "tolerance": self.tolerance,
            "all_passed": self.all_passed,
            "trials": [t.to_dict() for t in self.trials],
            "failures": [t.to_dict() for t in self.trials if not (t.off_ok and t.mix_ok)],
        }


def verify_theorem1(cfg: TheoryConfig, trials: int,
                    tolerance: float = 1e-9) -> Theorem1Report:
    """Check the minimum-eigenvalue ordering on fresh instances.

    Each trial draws new regression clients, estimates the online matrix by
    Monte Carlo, restricts it to client blocks under shared draws, and
    verifies lambda_min(V_off) >= lambda_min(V_on) - tol and
    lambda_min((V_on + V_off)/2) >= lambda_min(V_on) - tol. Under common
    random numbers both are consequences of exact linear algebra, so the
    tolerance only absorbs eigensolver round-off.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    cfg.validate()
    report = Theorem1Report(config=dataclasses.asdict(cfg), tolerance=tolerance)
    for trial in range(trials):
        data_seed, mc_seed = _seed_ints(cfg.seed, trial)[:2]
        ds = make_regression_clients(cfg.n_clients, cfg.samples_per_client,
                                     cfg.input_dim, seed=data_seed)
        x_pts, ids, _y = regression_points(ds)
        trial_cfg = dataclasses.replace(cfg, seed=mc_seed)
        von = estimate_gram_von(x_pts, ids, trial_cfg)
        voff = estimate_gram_voff(x_pts, ids, trial_cfg, shared_draws=True)
        lam_on = sym_eig_min(von.matrix)
        lam_off = sym_eig_min(voff.matrix)
        lam_mix = sym_eig_min((von.matrix + voff.matrix) / 2.0)
        report.trials.append(TrialResult(
            trial=trial,
            data_seed=data_seed,
            lambda_on=lam_on,
            lambda_off=lam_off,
            lambda_mix=lam_mix,
            stderr=von.stderr,
            off_ok=lam_off >= lam_on - tolerance,
            mix_ok=lam_mix >= lam_on - tolerance))
    return report


# ---------------------------------------------------------------------------
# training trajectories


@dataclass
class TrajectoryResult:
    online: np.ndarray
    offline: np.ndarray
    ensemble: np.ndarray
    lr: float


def _online_grads(net: TwoLayerBNNet, x_pts: np.ndarray, ids: np.ndarray,
                  resid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum_p resid_p * F_on(x_p) w.r.t. (v, gamma)."""
    m = net.width
    norms = np.stack([_s_norms(net.v, net.covariances[i])
                      for i in range(net.n_clients)], axis=1)  # m x N
    z = x_pts @ net.v.T
    gam_row = net.gamma[:, ids].T
    norm_row = norms[:, ids].T
    act_pos = (z * gam_row / norm_row) > 0.0
    d = resid[:, None] * net.c[None, :] * act_pos / np.sqrt(m)
    e = d * gam_row / norm_row
    grad_v = e.T @ x_pts
    grad_gamma = np.zeros_like(net.gamma)
    coef = e * z / norm_row ** 2  # d * gamma * z / n^3
    for i in range(net.n_clients):
        rows = np.flatnonzero(ids == i)
        if rows.size == 0:
            continue
        grad_gamma[:, i] = (d[rows] * z[rows]).sum(axis=0) / norms[:, i]
        w = coef[rows].sum(axis=0)  # per-unit scalar weights
        grad_v -= w[:, None] * (net.v @ net.covariances[i])
    return grad_v, grad_gamma


def _offline_grads(net: TwoLayerBNNet, x_pts: np.ndarray, ids: np.ndarray,
                   resid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum_p resid_p * F_off(x_p) w.r.t. (v, gamma)."""
    m = net.width
    grad_v = np.zeros_like(net.v)
    grad_gamma = np.zeros_like(net.gamma)
    for i in range(net.n_clients):
        rows = np.flatnonzero(ids == i)
        if rows.size == 0:
            continue
        v_i = net.v[i]
        norms_i = _s_norms(v_i, net.covariances[i])
        x_sub = x_pts[rows]
        z = x_sub @ v_i.T
        act_pos = (z * (net.gamma[:, i] / norms_i)) > 0.0
        d = resid[rows][:, None] * net.c[:, i][None, :] * act_pos / np.sqrt(m)
        grad_gamma[:, i] = (d * z).sum(axis=0) / norms_i
        e = d * (net.gamma[:, i] / norms_i)
        w = (e * z).sum(axis=0) / norms_i ** 2
        grad_v[i] = e.T @ x_sub - w[:, None] * (v_i @ net.covariances[i])
    return grad_v, grad_gamma


def theory_instance(cfg: TheoryConfig):
    """Dataset, client-major points and tied nets for one seeded instance."""
    data_seed = _seed_ints(cfg.seed, _DATA_TAG)[0]
    ds = make_regression_clients(cfg.n_clients, cfg.samples_per_client,
                                 cfg.input_dim, seed=data_seed)
    x_pts, ids, y = regression_points(ds)
    covs = np.stack(ds.heterogeneity.params["covariances"])
    online, offline = init_theory_net(cfg, covs)
    return ds, x_pts, ids, y, online, offline


def default_step_size(online: TwoLayerBNNet, x_pts: np.ndarray,
                      ids: np.ndarray) -> float:
    """0.05 over the largest eigenvalue of the initial evolution kernel."""
    lam_max = float(jacobi_eigenvalues(evolution_matrix(online, x_pts, ids))[-1])
    return 0.05 / max(lam_max, 1e-12)


def train_theory_trajectories(cfg: TheoryConfig, steps: int,
                              lr: float | None = None) -> TrajectoryResult:
    """Full-batch gradient descent losses for the three models.

    Trains (v, gamma) with the sign outputs held fixed; all three models
    start from the same tied initialization. Raises NumericalError if a loss
    exceeds 1000x its initial value (step size too large).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    _ds, x_pts, ids, y, online0, offline0 = theory_instance(cfg)
    if lr is None:
        lr = default_step_size(online0, x_pts, ids)

    nets = {
        "online": online0.copy(),
        "offline": offline0.copy(),
        "ens_on": online0.copy(),
        "ens_off": offline0.copy(),
    }
    p = len(y)
    losses = {"online": [], "offline": [], "ensemble": []}

    def record():
        f_on = _forward_batch(nets["online"], None, x_pts, ids, "online")
        f_off = _forward_batch(None, nets["offline"], x_pts, ids, "offline")
        f_ens = _forward_batch(nets["ens_on"], nets["ens_off"], x_pts, ids, "fedco2")
        losses["online"].append(float(np.mean((f_on - y) ** 2)))
        losses["offline"].append(float(np.mean((f_off - y) ** 2)))
        losses["ensemble"].append(float(np.mean((f_ens - y) ** 2)))

    record()
    initial = {k: v[0] for k, v in losses.items()}
    for _ in range(steps):
        f_on = _forward_batch(nets["online"], None, x_pts, ids, "online")
        gv, gg = _online_grads(nets["online"], x_pts, ids, 2.0 * (f_on - y) / p)
        nets["online"].v -= lr * gv
        nets["online"].gamma -= lr * gg

        f_off = _forward_batch(None, nets["offline"], x_pts, ids, "offline")
        gv, gg = _offline_grads(nets["offline"], x_pts, ids, 2.0 * (f_off - y) / p)
        nets["offline"].v -= lr * gv
        nets["offline"].gamma -= lr * gg

        f_ens = _forward_batch(nets["ens_on"], nets["ens_off"], x_pts, ids, "fedco2")
        # each constituent descends on the full fused residual; the averaged
        # output then evolves under the mean of the two kernels on the same
        # time scale as the stand-alone models
        resid = 2.0 * (f_ens - y) / p
        gv, gg = _online_grads(nets["ens_on"], x_pts, ids, resid)
        nets["ens_on"].v -= lr * gv
        nets["ens_on"].gamma -= lr * gg
        gv, gg = _offline_grads(nets["ens_off"], x_pts, ids, resid)
        nets["ens_off"].v -= lr * gv
        nets["ens_off"].gamma -= lr * gg

        record()
        for name, series in losses.items():
            if not np.isfinite(series[-1]) or series[-1] > 1e3 * max(initial[name], 1e-300):
                raise NumericalError(f"{name} trajectory diverged; reduce the step size")

    return TrajectoryResult(online=np.array(losses["online"]),
                            offline=np.array(losses["offline"]),
                            ensemble=np.array(losses["ensemble"]),
                            lr=float(lr))
