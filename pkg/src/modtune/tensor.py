"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Graph` (entered with ``with``)
whenever at least one operand requires a gradient. Outside a graph, ops run
forward only, which is what evaluation uses.

Broadcasting is limited to adding a 1-D bias over the last dimension; every
other op requires conforming shapes, so each backward rule stays short.
"""

from __future__ import annotations

from contextvars import ContextVar

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphError(RuntimeError):
    pass


_ACTIVE: ContextVar["Graph | None"] = ContextVar("modtune_graph", default=None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0.0)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def constant(data):
    return Tensor(data, requires_grad=False)


class Graph:
    """Ordered tape of recorded operations.

    Each node holds the output, its operands and a closure mapping the output
    gradient to operand gradients. :meth:`backward` may run once per forward.
    """

    def __init__(self):
        self.nodes = []
        self._token = None
        self._consumed = False

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def record(self, out, parents, rule):
        self.nodes.append((out, parents, rule))

    def backward(self, loss):
        if self._consumed:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if loss.data.size != 1:
            raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        produced = {id(out) for out, _, _ in self.nodes}
        # intermediates start clean; leaf parameters accumulate
        for out, _, _ in self.nodes:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, parents, rule in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = rule(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if id(p) in produced:
                    # intermediates never mutate in place, so sharing g is safe
                    p.grad = g if p.grad is None else p.grad + g
                elif p.grad is None:
                    p.grad = np.array(g, dtype=np.float64).reshape(p.shape)
                else:
                    p.grad += g
        return loss


def backward(graph, loss):
    return graph.backward(loss)


def _out(data, parents, rule):
    needs = any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = needs
    t.name = None
    if needs:
        g = _ACTIVE.get()
        if g is not None:
            g.record(t, parents, rule)
        else:
            t.requires_grad = False
    return t


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"{what}: non-finite input")


# ---------------------------------------------------------------- core ops


def matmul(a, b):
    """``a[..., M, K] @ b[..., K, N]`` with identical leading dims, or ``b`` 2-D."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {A.shape} @ {B.shape}")
    if B.ndim != 2 and A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"matmul leading dims differ: {A.shape} @ {B.shape}")
    if B.ndim == 2:
        # fold leading dims so BLAS sees one gemm
        A2 = A.reshape(-1, A.shape[-1])
        out = (A2 @ B).reshape(A.shape[:-1] + (B.shape[1],))

        def rule(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A2.T @ g2 if b.requires_grad else None
            return ga, gb
    else:
        out = A @ B

        def rule(g):
            ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(A, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _out(out, (a, b), rule)


def linear(x, weight, bias):
    """``x @ weight + bias`` as one node; same result as matmul then add."""
    X, W, b = x.data, weight.data, bias.data
    if W.ndim != 2 or X.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"linear shapes do not conform: {X.shape}, {W.shape}, {b.shape}")
    X2 = X.reshape(-1, X.shape[-1])
    out = X2 @ W
    out += b
    out_shape = X.shape[:-1] + (W.shape[1],)

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.T).reshape(X.shape) if x.requires_grad else None
        gw = X2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _out(out.reshape(out_shape), (x, weight, bias), rule)


def add(a, b):
    """Elementwise sum; ``b`` may also be a 1-D bias matching the last dim."""
    A, B = a.data, b.data
    if A.shape == B.shape:
        bias = False
    elif B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        bias = True
    else:
        raise DimensionError(f"add shapes do not conform: {A.shape} + {B.shape}")

    def rule(g):
        gb = g.reshape(-1, B.shape[0]).sum(axis=0) if bias else g
        return g, gb

    return _out(A + B, (a, b), rule)


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _out(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x, c):
    c = float(c)
    return _out(x.data * c, (x,), lambda g: (g * c,))


def sum_all(x):
    shape = x.shape
    return _out(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _out(data, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _out(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def select(x, axis, index):
    """Take one position along ``axis`` (rank drops by one)."""
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _out(np.ascontiguousarray(np.take(x.data, index, axis=axis)), (x,), rule)


def gather_rows(x, rows):
    """Rows of a 2-D tensor by integer index."""
    if x.data.ndim != 2:
        raise DimensionError("gather_rows expects a 2-D tensor")
    rows = np.asarray(rows, dtype=np.intp)
    shape = x.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return _out(x.data[rows], (x,), rule)


def gelu(x):
    """GELU, tanh approximation."""
    X = x.data
    y, th = kernels.gelu_forward(X)
    return _out(y, (x,), lambda g: (kernels.gelu_backward(X, th, g),))


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``."""
    X = x.data
    ax = axis % X.ndim
    moved = np.ascontiguousarray(np.moveaxis(X, ax, -1))
    mshape = moved.shape
    y2 = kernels.softmax_forward(moved.reshape(-1, mshape[-1]))
    y = np.moveaxis(y2.reshape(mshape), -1, ax)

    def rule(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(-1, mshape[-1])
        dx = kernels.softmax_backward(y2, gm)
        return (np.moveaxis(dx.reshape(mshape), -1, ax),)

    return _out(np.ascontiguousarray(y), (x,), rule)


def embed(table, ids):
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding id out of range [0, {table.shape[0]})")
    tshape = table.shape

    def rule(g):
        full = np.zeros(tshape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tshape[1]))
        return (full,)

    return _out(table.data[ids], (table,), rule)


def dropout(x, p, rng=None, train=True):
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return _out(x.data * keep, (x,), lambda g: (g * keep,))


def layer_norm(x, gamma, beta, eps=1e-12):
    """Normalize over the last dim with biased variance, then scale and shift."""
    H = x.shape[-1]
    if gamma.shape != (H,) or beta.shape != (H,):
        raise DimensionError(f"layer_norm: gamma/beta must have shape ({H},)")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    _check_finite(x.data, "layer_norm")
    shape = x.shape
    x2 = np.ascontiguousarray(x.data).reshape(-1, H)
    y, xhat, rstd = kernels.layer_norm_forward(x2, gamma.data, beta.data, float(eps))
    G = gamma.data

    def rule(g):
        dx, dg, db = kernels.layer_norm_backward(
            np.ascontiguousarray(g).reshape(-1, H), xhat, rstd, G
        )
        return dx.reshape(shape), dg, db

    return _out(np.asarray(y).reshape(shape), (x, gamma, beta), rule)


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, gold):
    """Mean negative log-likelihood of ``gold`` under row-wise softmax."""
    L = logits.data
    if L.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects [B, C] logits")
    gold = np.asarray(gold, dtype=np.intp)
    B, C = L.shape
    if gold.shape != (B,):
        raise DimensionError(f"gold must have shape ({B},)")
    if B and (gold.min() < 0 or gold.max() >= C):
        raise ValueError(f"gold class id out of range [0, {C})")
    z = L - L.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    nll = logz - z[np.arange(B), gold]
    probs = np.exp(z - logz[:, None])

    def rule(g):
        d = probs.copy()
        d[np.arange(B), gold] -= 1.0
        return (d * (float(g) / B),)

    return _out(np.array(nll.mean()), (logits,), rule)


def mse_loss(pred, target):
    P = pred.data.reshape(-1)
    T = np.asarray(target, dtype=np.float64).reshape(-1)
    if P.shape != T.shape:
        raise DimensionError(f"mse_loss length mismatch: {P.size} vs {T.size}")
    diff = P - T
    n = P.size
    shape = pred.shape
    return _out(
        np.array((diff * diff).mean()),
        (pred,),
        lambda g: ((2.0 * float(g) / n * diff).reshape(shape),),
    )

