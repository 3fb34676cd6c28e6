"""Dense float-64 tensors with tape-based reverse-mode gradients.

Everything downstream (models, distillation losses, the theory verifier)
runs on this module. Arrays are numpy float64 throughout; the Tape records
primitive applications so ``backward`` can replay them in reverse. Ops are
free functions: they compute eagerly and register a backward closure on the
tape only when a tape is supplied and some input requires a gradient.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateBatchError(ValueError):
    """Train-mode batch statistics need at least two rows."""


class NumericalError(ArithmeticError):
    """An iterative numerical routine failed to converge."""


class Tensor:
    """A float-64 array with an optional accumulated gradient.

    ``grad`` starts as None and is lazily allocated by ``backward``;
    repeated backward passes accumulate into it until cleared.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded primitive: op id, operand refs, output ref, and the
    closure that maps the output adjoint to operand adjoints."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[tuple[Tensor, np.ndarray]]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    __slots__ = ("nodes", "_produced")

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._produced: set[int] = set()

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward_fn) -> None:
        output.requires_grad = True
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def _recording(tape: Tape | None, inputs: Iterable[Tensor]) -> bool:
    return tape is not None and any(t.requires_grad for t in inputs)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss over the tape.

    Visits each recorded node exactly once in reverse order. Adjoints of
    intermediate tensors are kept in a scratch table; leaves (tensors with
    ``requires_grad`` that were not produced on this tape) accumulate into
    their ``grad`` buffer, so repeated calls without zeroing add up.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node.output), None)
        if g is None:
            continue
        for tensor, contrib in node.backward_fn(g):
            if id(tensor) in tape._produced:
                prev = adjoint.get(id(tensor))
                adjoint[id(tensor)] = contrib if prev is None else prev + contrib
            elif tensor.requires_grad:
                tensor.accumulate_grad(contrib)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)
    if _recording(tape, (a, b)):
        ad, bd = a.data, b.data

        def bwd(g):
            return ((a, g @ bd.T), (b, ad.T @ g))

        tape.record("matmul", (a, b), out, bwd)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise sum; also accepts a rank-1 bias broadcast over rows."""
    bias_broadcast = (a.data.ndim == 2 and b.data.ndim == 1
                      and b.data.shape[0] == a.data.shape[1])
    if not bias_broadcast and a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} + {b.data.shape}")
    out = Tensor(a.data + b.data)
    if _recording(tape, (a, b)):
        def bwd(g):
            gb = g.sum(axis=0) if bias_broadcast else g
            return ((a, g), (b, gb))

        tape.record("add", (a, b), out, bwd)
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes {a.data.shape} - {b.data.shape}")
    out = Tensor(a.data - b.data)
    if _recording(tape, (a, b)):
        def bwd(g):
            return ((a, g), (b, -g))

        tape.record("sub", (a, b), out, bwd)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} * {b.data.shape}")
    out = Tensor(a.data * b.data)
    if _recording(tape, (a, b)):
        ad, bd = a.data, b.data

        def bwd(g):
            return ((a, g * bd), (b, g * ad))

        tape.record("mul", (a, b), out, bwd)
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data * c)
    if _recording(tape, (a,)):
        def bwd(g):
            return ((a, g * c),)

        tape.record("scale", (a,), out, bwd)
    return out


def sum_all(a: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(a.data.sum())
    if _recording(tape, (a,)):
        shape = a.data.shape

        def bwd(g):
            return ((a, np.broadcast_to(g, shape).copy()),)

        tape.record("sum_all", (a,), out, bwd)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is taken as 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    if _recording(tape, (x,)):
        mask = x.data > 0.0

        def bwd(g):
            return ((x, g * mask),)

        tape.record("relu", (x,), out, bwd)
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: Tensor, running_var: Tensor,
               mode: str = "train", tape: Tape | None = None,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Batch normalization over the rows of a B x C tensor.

    Train mode normalizes by the batch moments (biased variance, eps added)
    and folds them into the running statistics with the given momentum;
    eval mode normalizes by the running statistics. Output is gamma*xhat+beta.
    Running statistics are plain state, not differentiated through.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects B x C input, got {x.data.shape}")
    n_features = x.data.shape[1]
    for t, name in ((gamma, "gamma"), (beta, "beta"),
                    (running_mean, "running_mean"), (running_var, "running_var")):
        if t.data.shape != (n_features,):
            raise ShapeError(f"batch_norm {name} shape {t.data.shape} != ({n_features},)")
    if mode == "train":
        if x.data.shape[0] < 2:
            raise DegenerateBatchError("train-mode batch_norm needs a batch of >= 2 rows")
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean.data[...] = (1.0 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1.0 - momentum) * running_var.data + momentum * var
    elif mode == "eval":
        mean = running_mean.data
        var = running_var.data
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)
    if _recording(tape, (x, gamma, beta)):
        xd = x.data
        gd = gamma.data
        batch = xd.shape[0]
        centered = xd - mean
        train = mode == "train"

        def bwd(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gd
            if train:
                dvar = (dxhat * centered).sum(axis=0) * (-0.5) * inv_std ** 3
                dmean = (-dxhat * inv_std).sum(axis=0) + dvar * (-2.0 * centered).sum(axis=0) / batch
                dx = dxhat * inv_std + dvar * 2.0 * centered / batch + dmean / batch
            else:
                dx = dxhat * inv_std
            return ((x, dx), (gamma, dgamma), (beta, dbeta))

        tape.record("batch_norm", (x, gamma, beta), out, bwd)
    return out


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          tape: Tape | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Stabilized by max subtraction; gradient is (softmax - onehot)/B.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross entropy expects B x C logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    batch, n_classes = logits.data.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError("class label out of range")
    labels = labels.astype(np.intp)
    logp = _log_softmax(logits.data)
    out = Tensor(-logp[np.arange(batch), labels].mean())
    if _recording(tape, (logits,)):
        probs = np.exp(logp)

        def bwd(g):
            dz = probs.copy()
            dz[np.arange(batch), labels] -= 1.0
            return ((logits, dz * (g / batch)),)

        tape.record("softmax_cross_entropy", (logits,), out, bwd)
    return out


def kl_divergence(p_logits: Tensor, q_logits: Tensor,
                  tape: Tape | None = None) -> Tensor:
    """Mean over the batch of KL(softmax(p) || softmax(q)) at temperature 1.

    The p side is the (frozen) teacher: gradients flow only into q_logits.
    """
    if p_logits.data.shape != q_logits.data.shape or p_logits.data.ndim != 2:
        raise ShapeError(
            f"kl shapes {p_logits.data.shape} vs {q_logits.data.shape}")
    batch = p_logits.data.shape[0]
    logp = _log_softmax(p_logits.data)
    logq = _log_softmax(q_logits.data)
    p = np.exp(logp)
    terms = np.where(p > 0.0, p * (logp - logq), 0.0)
    out = Tensor(terms.sum() / batch)
    if _recording(tape, (q_logits,)):
        q = np.exp(logq)

        def bwd(g):
            return ((q_logits, (q - p) * (g / batch)),)

        tape.record("kl_divergence", (q_logits,), out, bwd)
    return out


def sgd_step(params, grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In-place theta <- theta - lr*g for every unfrozen block named in grads.

    ``params`` is any object with a ``blocks`` name->Tensor mapping and a
    ``frozen`` set of names. A gradient for an unknown block is a misalignment
    error; blocks without gradients are left untouched.
    """
    for name, g in grads.items():
        block = params.blocks.get(name)
        if block is None:
            raise KeyError(f"gradient for unknown block {name!r}")
        if g.shape != block.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} misaligned with block {name!r} {block.data.shape}")
        if name in params.frozen:
            continue
        block.data -= lr * g


# ---------------------------------------------------------------------------
# symmetric eigensolver


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-10,
                       max_sweeps: int = 100) -> np.ndarray:
    """All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate every off-diagonal pair until the off-diagonal Frobenius
    norm drops below ``tol``. Raises NumericalError if that does not happen
    within ``max_sweeps`` sweeps.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    asym = np.abs(a - a.T).max() if a.size else 0.0
    if asym > 1e-9:
        raise ValueError(f"matrix is not symmetric within 1e-9 (max asymmetry {asym:.3e})")
    m = (a + a.T) / 2.0
    n = m.shape[0]
    if n == 1:
        return m.diagonal().copy()

    def off_norm(mat):
        off = mat.copy()
        np.fill_diagonal(off, 0.0)
        return float(np.linalg.norm(off))

    for _ in range(max_sweeps):
        if off_norm(m) <= tol:
            return np.sort(m.diagonal())
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                # symmetric Schur decomposition of the 2x2 pivot block
                tau = (m[q, q] - m[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:  # keep tau*tau from overflowing
                    t = 1.0 / (2.0 * tau)
                elif tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                old_p = m[:, p].copy()
                old_q = m[:, q].copy()
                new_p = c * old_p - s * old_q
                new_q = s * old_p + c * old_q
                m[:, p] = new_p
                m[p, :] = new_p
                m[:, q] = new_q
                m[q, :] = new_q
                m[p, p] = old_p[p] - t * apq
                m[q, q] = old_q[q] + t * apq
                m[p, q] = 0.0
                m[q, p] = 0.0
    if off_norm(m) <= tol:
        return np.sort(m.diagonal())
    raise NumericalError(
        f"Jacobi sweep limit {max_sweeps} reached (off-diagonal norm {off_norm(m):.3e})")


def sym_eig_min(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> float:
    """Smallest eigenvalue of a symmetric matrix (cyclic Jacobi)."""
    return float(jacobi_eigenvalues(a, tol=tol, max_sweeps=max_sweeps)[0])
