"""Walk through the tensor engine: taped ops, gradients, and the eigensolver.

Builds a tiny BN network by hand, differentiates a cross-entropy loss
through it, verifies one gradient entry against a finite difference, and
finishes with the Jacobi eigensolver on a random PSD matrix.
"""

import numpy as np

from fedco.numerics import (Tape, Tensor, add, backward, batch_norm,
                            jacobi_eigenvalues, matmul, relu,
                            softmax_cross_entropy, sym_eig_min)

rng = np.random.default_rng(0)

x = Tensor(rng.normal(size=(8, 4)))
w1 = Tensor(rng.normal(size=(4, 6)) * 0.5, requires_grad=True)
b1 = Tensor(np.zeros(6), requires_grad=True)
gamma = Tensor(np.ones(6), requires_grad=True)
beta = Tensor(np.zeros(6), requires_grad=True)
w2 = Tensor(rng.normal(size=(6, 3)) * 0.5, requires_grad=True)
labels = rng.integers(0, 3, size=8)


def loss_graph(tape=None):
    h = add(matmul(x, w1, tape), b1, tape)
    h = batch_norm(h, gamma, beta, Tensor(np.zeros(6)), Tensor(np.ones(6)),
                   mode="train", tape=tape)
    h = relu(h, tape)
    return softmax_cross_entropy(matmul(h, w2, tape), labels, tape)


tape = Tape()
loss = loss_graph(tape)
backward(tape, loss)
print(f"loss = {loss.item():.6f}")
print(f"tape recorded {len(tape)} primitive applications")
print(f"dL/dw1[0,0] (analytic) = {w1.grad[0, 0]: .8f}")

h = 1e-5
orig = w1.data[0, 0]
w1.data[0, 0] = orig + h
up = loss_graph().item()
w1.data[0, 0] = orig - h
down = loss_graph().item()
w1.data[0, 0] = orig
print(f"dL/dw1[0,0] (central FD) = {(up - down) / (2 * h): .8f}")

b = rng.normal(size=(6, 6))
psd = b @ b.T
eigs = jacobi_eigenvalues(psd)
print(f"\nJacobi eigenvalues of a random PSD matrix: {np.round(eigs, 4)}")
print(f"smallest eigenvalue {sym_eig_min(psd):.6f} (PSD, so >= 0)")
