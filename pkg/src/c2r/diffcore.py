"""Dense float64 tensors with reverse-mode gradients, Adam, and seeded streams.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients.  Calling
:func:`backward` on a scalar walks the recorded graph once in reverse
topological order and *adds* the result into ``.grad`` of every tensor that
requires a gradient.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ValueError):
    """Op evaluated outside its mathematical domain."""


class ContractError(ValueError):
    """Caller violated a precondition (e.g. backward from a non-scalar)."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __array_ufunc__ = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("hadamard", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0) or np.any(np.isnan(a.data)):
        raise DomainError(f"log of non-positive entry (min={np.nanmin(a.data)!r})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ------------------------------------------------------------------ reductions

def tsum(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ContractError("mean of empty tensor")
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


# ------------------------------------------------------------------- matrices

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def spmm(adj: sp.spmatrix, h: Tensor, symmetric: bool = False) -> Tensor:
    """Constant sparse matrix times tensor; gradient flows into ``h`` only."""
    if adj.shape[1] != h.shape[0]:
        raise DimensionError("spmm", adj.shape, h.shape)

    def bw(g):
        return (np.asarray((adj if symmetric else adj.T) @ g),)

    return _make(np.asarray(adj @ h.data), (h,), bw)


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    safe = np.maximum(norm, eps)
    y = a.data / safe
    clipped = norm < eps

    def bw(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(clipped, g / safe, (g - y * proj) / safe),)

    return _make(y, (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError("concat_rows", *(p.shape for p in parts))
    cuts = np.cumsum([p.shape[0] for p in parts])[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=0), parts,
                 lambda g: tuple(np.split(g, cuts, axis=0)))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    heights = {p.shape[0] for p in parts}
    if len(heights) != 1:
        raise DimensionError("concat_cols", *(p.shape for p in parts))
    cuts = np.cumsum([p.shape[1] for p in parts])[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=1), parts,
                 lambda g: tuple(np.split(g, cuts, axis=1)))


def select_col(a: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix, kept as an ``n x 1`` tensor."""
    if a.data.ndim != 2 or not 0 <= j < a.shape[1]:
        raise DimensionError("select_col", a.shape, detail=f"column {j}")

    def bw(g):
        out = np.zeros(a.shape)
        out[:, j:j + 1] = g
        return (out,)

    return _make(a.data[:, j:j + 1], (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError("gather_rows", a.shape, detail="row index out of range")

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def _pool_matrix(segment_ids: np.ndarray, n_segments: int, op: str) -> sp.csr_matrix:
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= n_segments):
        raise DimensionError(op, segment_ids.shape, detail="segment id out of range")
    n = segment_ids.size
    return sp.csr_matrix((np.ones(n), (segment_ids, np.arange(n))), shape=(n_segments, n))


def segment_sum(a: Tensor, segment_ids, n_segments: int) -> Tensor:
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.shape[0]:
        raise DimensionError("segment_sum", a.shape, seg.shape)
    return spmm(_pool_matrix(seg, n_segments, "segment_sum"), a)


def segment_mean(a: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Per-segment row mean; empty segments produce zero rows."""
    seg = np.asarray(segment_ids, dtype=np.intp)
    if seg.shape[0] != a.shape[0]:
        raise DimensionError("segment_mean", a.shape, seg.shape)
    pool = _pool_matrix(seg, n_segments, "segment_mean")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    inv = 1.0 / np.maximum(counts, 1.0)
    return spmm(sp.diags(inv) @ pool, a)


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``n x C`` logits against integer labels."""
    y = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.data.ndim != 2 or y.shape[0] != logits.shape[0]:
        raise DimensionError("cross_entropy_with_logits", logits.shape, y.shape)
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise DimensionError("cross_entropy_with_logits", logits.shape, detail="label out of range")
    n = y.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), y]))

    def bw(g):
        s = np.exp(z - lse[:, None])
        s[np.arange(n), y] -= 1.0
        return (s * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), bw)


# --------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``t``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    upstream: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = upstream.pop(id(node))
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> None:
    """In-place bias-corrected Adam update.

    Parameters whose gradient is ``None`` are left untouched and keep their
    moment estimates.  All gradients are checked for finiteness before any
    parameter moves.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise DimensionError("adam_step", params[name].shape, g.shape, detail=name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over a named parameter dict; reads gradients from ``Tensor.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-2,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())

    def step(self) -> None:
        adam_step({k: p.data for k, p in self.params.items()},
                  {k: p.grad for k, p in self.params.items()}, self.state)


# ------------------------------------------------------------------------ RNG

STREAMS = ("data-gen", "gumbel", "init", "kmeans", "shuffle")


def _stream_key(stream) -> int:
    if isinstance(stream, (int, np.integer)):
        return int(stream)
    return zlib.crc32(str(stream).encode("utf-8"))


class Rng:
    """Seeded source of independent, named, counter-based generators.

    ``Rng(seed).stream("gumbel")`` always yields the same sequence, whatever
    other streams have drawn.  ``child(stream, i)`` gives a further
    sub-generator (e.g. one per graph index).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def _gen(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *key])
        return np.random.Generator(np.random.Philox(ss))

    def stream(self, name) -> np.random.Generator:
        return self._gen(_stream_key(name))

    def child(self, name, index: int) -> np.random.Generator:
        return self._gen(_stream_key(name), int(index))


# ------------------------------------------------------------ initialization

def uniform_init(rng: np.random.Generator, fan_in: int, shape, name: str | None = None) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


# ------------------------------------------------------------ gradient check

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple[str, tuple] | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def gradient_check(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
                   h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph on each call from the current values of
    ``params`` (and use fixed noise).  The elementwise error is
    ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps round-off on
    near-zero gradients from reading as large relative error.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (np.zeros(p.shape) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    worst_err, worst, count = 0.0, None, 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(a_flat[i] - num) / max(abs(a_flat[i]), abs(num), floor)
            count += 1
            if err > worst_err:
                worst_err = err
                worst = (name, np.unravel_index(i, p.shape))
    for p in params.values():
        p.grad = None
    return GradCheckReport(worst_err, worst, count, tol)
