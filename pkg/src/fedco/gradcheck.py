"""Finite-difference verification of every differentiable primitive.

Builds randomized configurations per op, computes analytic gradients through
the tape, and compares against central finite differences (h = 1e-5).
Inputs feeding ReLU are kept away from the kink so the difference quotient
stays valid. The ``perturb`` hook lets tests corrupt a computed gradient to
prove the check actually bites.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import (Tape, Tensor, add, backward, batch_norm, kl_divergence,
                       matmul, mul, relu, scale, softmax_cross_entropy, sub,
                       sum_all)

FD_STEP = 1e-5
TOLERANCE = 1e-4

PerturbHook = Callable[[str, int, np.ndarray], np.ndarray]


@dataclass
class OpCheck:
    op: str
    config: int
    rel_error: float


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: OpCheck
    checks: list[OpCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _away_from_kink(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def _fd_gradient(loss_fn, leaves: list[Tensor]) -> list[np.ndarray]:
    grads = []
    for leaf in leaves:
        g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + FD_STEP
            up = loss_fn()
            flat[j] = orig - FD_STEP
            down = loss_fn()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * FD_STEP)
        grads.append(g)
    return grads


def _analytic_gradient(graph_fn, leaves: list[Tensor]) -> list[np.ndarray]:
    for leaf in leaves:
        leaf.zero_grad()
    tape = Tape()
    loss = graph_fn(tape)
    backward(tape, loss)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for leaf in leaves]


def _case(rng: np.random.Generator, op: str):
    """Build (graph_fn, leaves) for one randomized configuration of ``op``.

    graph_fn(tape) must rebuild the computation from the leaves' current
    data so the same closure serves both analytic and FD evaluation.
    """
    b = int(rng.integers(3, 6))
    if op == "matmul":
        a = Tensor(rng.normal(size=(b, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def graph(tape):
            m = matmul(a, w, tape)
            return scale(sum_all(mul(m, m, tape), tape), 0.5, tape)

        return graph, [a, w]
    if op == "add_bias":
        a = Tensor(rng.normal(size=(b, 4)), requires_grad=True)
        bias = Tensor(rng.normal(size=4), requires_grad=True)

        def graph(tape):
            s = add(a, bias, tape)
            return sum_all(mul(s, s, tape), tape)

        return graph, [a, bias]
    if op == "sub_mul":
        a = Tensor(rng.normal(size=(b, 3)), requires_grad=True)
        c = Tensor(rng.normal(size=(b, 3)), requires_grad=True)
        return (lambda tape: scale(sum_all(mul(sub(a, c, tape), sub(a, c, tape), tape),
                                           tape), 0.5, tape), [a, c])
    if op == "relu":
        a = Tensor(_away_from_kink(rng, (b, 5)), requires_grad=True)
        return lambda tape: sum_all(relu(a, tape), tape), [a]
    if op == "batch_norm_train" or op == "batch_norm_eval":
        mode = "train" if op.endswith("train") else "eval"
        a = Tensor(rng.normal(size=(b, 3)) * 2.0, requires_grad=True)
        gamma = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        rmean = rng.normal(size=3)
        rvar = rng.uniform(0.5, 2.0, size=3)
        labels = rng.integers(0, 3, size=b)

        def graph(tape):
            # fresh running-stat state per evaluation: train mode mutates it
            out = batch_norm(a, gamma, beta, Tensor(rmean.copy()), Tensor(rvar.copy()),
                             mode=mode, tape=tape)
            return softmax_cross_entropy(out, labels, tape)

        return graph, [a, gamma, beta]
    if op == "softmax_ce":
        logits = Tensor(rng.normal(size=(b, 4)) * 3.0, requires_grad=True)
        labels = rng.integers(0, 4, size=b)
        return lambda tape: softmax_cross_entropy(logits, labels, tape), [logits]
    if op == "kl":
        p = Tensor(rng.normal(size=(b, 4)))
        q = Tensor(rng.normal(size=(b, 4)), requires_grad=True)
        return lambda tape: kl_divergence(p, q, tape), [q]
    if op == "two_layer_net":
        # resample until every BN output clears the ReLU kink by a margin
        # much wider than the FD step, so the difference quotient is valid
        for _ in range(100):
            xd = rng.normal(size=(b, 4))
            w1d = rng.normal(size=(4, 6)) * 0.7
            b1d = rng.normal(size=6) * 0.1
            gammad = rng.uniform(0.5, 1.5, size=6)
            betad = rng.normal(size=6)
            z1 = xd @ w1d + b1d
            xhat = (z1 - z1.mean(0)) / np.sqrt(z1.var(0) + 1e-5)
            if np.abs(gammad * xhat + betad).min() > 1e-3:
                break
        else:
            raise RuntimeError("could not sample a kink-free two-layer config")
        x = Tensor(xd)
        w1 = Tensor(w1d, requires_grad=True)
        b1 = Tensor(b1d, requires_grad=True)
        gamma = Tensor(gammad, requires_grad=True)
        beta = Tensor(betad, requires_grad=True)
        w2 = Tensor(rng.normal(size=(6, 3)) * 0.7, requires_grad=True)
        b2 = Tensor(rng.normal(size=3) * 0.1, requires_grad=True)
        labels = rng.integers(0, 3, size=b)

        def graph(tape):
            h = add(matmul(x, w1, tape), b1, tape)
            h = batch_norm(h, gamma, beta, Tensor(np.zeros(6)), Tensor(np.ones(6)),
                           mode="train", tape=tape)
            h = relu(h, tape)
            logits = add(matmul(h, w2, tape), b2, tape)
            return softmax_cross_entropy(logits, labels, tape)

        return graph, [w1, b1, gamma, beta, w2, b2]
    raise ValueError(f"unknown gradcheck op {op!r}")


_OPS = ("matmul", "add_bias", "sub_mul", "relu", "batch_norm_train",
        "batch_norm_eval", "softmax_ce", "kl", "two_layer_net")


def run_gradcheck(seed: int = 0, n_configs: int = 50,
                  perturb: PerturbHook | None = None) -> GradcheckResult:
    """Compare analytic and finite-difference gradients on random configs.

    Cycles through the op list until ``n_configs`` configurations have been
    checked; reports the per-config maximum array-level relative error.
    """
    rng = np.random.default_rng(seed)
    checks: list[OpCheck] = []
    for config in range(n_configs):
        op = _OPS[config % len(_OPS)]
        graph_fn, leaves = _case(rng, op)
        analytic = _analytic_gradient(graph_fn, leaves)
        if perturb is not None:
            analytic = [perturb(op, i, g) for i, g in enumerate(analytic)]
        numeric = _fd_gradient(lambda: graph_fn(None).item(), leaves)
        worst = 0.0
        for a, f in zip(analytic, numeric):
            denom = max(np.abs(a).max(), np.abs(f).max(), 1e-6)
            worst = max(worst, float(np.abs(a - f).max() / denom))
        checks.append(OpCheck(op=op, config=config, rel_error=worst))
    worst_check = max(checks, key=lambda c: c.rel_error)
    return GradcheckResult(max_rel_error=worst_check.rel_error,
                           worst=worst_check, checks=checks)
