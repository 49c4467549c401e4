"""
A tiny reverse-mode engine
==========================

Everything in the package trains on ``c2r.diffcore``: numpy arrays wrapped
in a Tensor that remembers how it was made.
"""
import numpy as np
import scipy.sparse as sp

from c2r import diffcore as dc
from c2r.diffcore import Tensor

rng = np.random.default_rng(0)

# a two-layer classifier on random data
x = Tensor(rng.normal(size=(16, 5)))
y = rng.integers(0, 3, size=16)
W1 = Tensor(rng.normal(size=(5, 8)) * 0.3, requires_grad=True)
W2 = Tensor(rng.normal(size=(8, 3)) * 0.3, requires_grad=True)


def loss():
    return dc.cross_entropy_with_logits(dc.matmul(dc.relu(dc.matmul(x, W1)), W2), y)


# gradients land in .grad; intermediates get one as well
dc.backward(loss())
print("dL/dW2 shape:", W2.grad.shape)

# every op is checked against central differences the same way
rep = dc.gradient_check(loss, {"W1": W1, "W2": W2})
print(f"gradient check: max rel err {rep.max_rel_err:.2e} over {rep.n_checked} entries")

# Adam keeps per-parameter moments and refuses NaN gradients by name
opt = dc.Adam({"W1": W1, "W2": W2}, lr=5e-2)
for step in range(50):
    opt.zero_grad()
    L = loss()
    dc.backward(L)
    opt.step()
    if step % 10 == 0:
        print(f"step {step:2d}  loss {float(L.data):.4f}")

# sparse propagation: a path graph summing neighbour rows
adj = sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float))
h = Tensor(np.eye(3), requires_grad=True)
out = dc.spmm(adj, h, symmetric=True)
print(out.data)
