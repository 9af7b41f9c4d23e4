"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every primitive applied to ``Var`` handles; ``backward``
replays the records in reverse and accumulates vector-Jacobian products.
The primitive set is exactly what the ELBO graph needs: broadcasting
arithmetic, elementwise transcendentals, matmul, reductions, triangular
solves, Cholesky factorization and a reparameterized Gaussian sample whose
noise input never receives gradient.

Ops accept raw numpy arrays or scalars in place of ``Var``; such operands are
treated as constants and do not enter the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NonScalarRoot, UnsupportedOp
from .gauss import DEFAULT_JITTER, chol_psd


class Var:
    """Handle to a tape node. Supports the usual arithmetic operators."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> "Var":
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Var":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.shape})"


@dataclass
class Node:
    value: np.ndarray
    # (parent index, vjp closure mapping output grad -> parent grad)
    parents: list = field(default_factory=list)


class Tape:
    """Append-only record of primitive applications.

    Node ids are strictly increasing, so the graph is acyclic by
    construction. Leaves registered through :meth:`leaf` are the named
    differentiation targets of :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    def _record(self, value, parents) -> Var:
        self.nodes.append(Node(np.asarray(value, dtype=float), parents))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> Var:
        v = self._record(value, [])
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = v.idx
        return v

    def apply(self, op: str, *args, **kwargs) -> Var:
        """String-dispatched forward of a primitive (errors on unknown ops)."""
        fn = _PRIMITIVES.get(op)
        if fn is None:
            raise UnsupportedOp(f"unknown primitive {op!r}")
        return fn(*args, **kwargs)

    def backward(self, root: Var) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar root; returns grads per named leaf."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        root_val = self.nodes[root.idx].value
        if root_val.shape != ():
            raise NonScalarRoot(f"root has shape {root_val.shape}, expected scalar")
        grads: list[np.ndarray | None] = [None] * (root.idx + 1)
        grads[root.idx] = np.asarray(1.0)
        for i in range(root.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for pidx, vjp in self.nodes[i].parents:
                pg = vjp(g)
                if grads[pidx] is None:
                    grads[pidx] = pg
                else:
                    grads[pidx] = grads[pidx] + pg
        out = {}
        for name, idx in self.leaves.items():
            if idx <= root.idx and grads[idx] is not None:
                out[name] = np.asarray(grads[idx], dtype=float)
            else:
                out[name] = np.zeros_like(self.nodes[idx].value)
        return out

    def grad_of(self, root: Var, var: Var) -> np.ndarray:
        """Gradient of root w.r.t. an arbitrary node (test helper)."""
        marker = f"__probe_{var.idx}"
        self.leaves[marker] = var.idx
        try:
            return self.backward(root)[marker]
        finally:
            del self.leaves[marker]


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum the gradient of a broadcast value back to the operand's shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b, fwd, vjp_a, vjp_b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = fwd(av, bv)
    parents = []
    if isinstance(a, Var):
        parents.append((a.idx, lambda g, av=av, bv=bv: _unbroadcast(vjp_a(g, av, bv), av.shape)))
    if isinstance(b, Var):
        parents.append((b.idx, lambda g, av=av, bv=bv: _unbroadcast(vjp_b(g, av, bv), bv.shape)))
    return tape._record(out, parents)


def add(a, b) -> Var:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Var:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Var:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Var:
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def _unary(a, fwd, vjp) -> Var:
    tape = _tape_of(a)
    av = _value(a)
    out = fwd(av)
    return tape._record(out, [(a.idx, lambda g, av=av, out=out: vjp(g, av, out))])


def exp(a) -> Var:
    return _unary(a, np.exp, lambda g, x, y: g * y)


def log(a) -> Var:
    return _unary(a, np.log, lambda g, x, y: g / x)


def sqrt(a) -> Var:
    return _unary(a, np.sqrt, lambda g, x, y: 0.5 * g / y)


def square(a) -> Var:
    return _unary(a, np.square, lambda g, x, y: 2.0 * g * x)


def softplus(a) -> Var:
    return _unary(a, lambda x: np.logaddexp(0.0, x),
                  lambda g, x, y: g / (1.0 + np.exp(-x)))


def maximum_const(a, floor: float) -> Var:
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    return _unary(a, lambda x: np.maximum(x, floor),
                  lambda g, x, y: g * (x > floor))


def transpose(a) -> Var:
    return _unary(a, lambda x: x.T.copy(), lambda g, x, y: g.T)


def reshape(a, shape) -> Var:
    tape = _tape_of(a)
    av = _value(a)
    out = av.reshape(shape)
    return tape._record(out, [(a.idx, lambda g, s=av.shape: g.reshape(s))])


def vsum(a, axis=None, keepdims=False) -> Var:
    tape = _tape_of(a)
    av = _value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g, shape=av.shape, axis=axis, keepdims=keepdims):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return tape._record(out, [(a.idx, vjp)])


def mean(a, axis=None, keepdims=False) -> Var:
    av = _value(a)
    if axis is None:
        n = av.size
    else:
        n = av.shape[axis] if isinstance(axis, int) else int(
            np.prod([av.shape[i] for i in axis]))
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def dot(a, b) -> Var:
    return _binary(a, b, lambda x, y: np.dot(x, y),
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.ndim > 2 or bv.ndim > 2:
        raise UnsupportedOp("matmul supports 1-D and 2-D operands only")
    out = av @ bv
    parents = []
    if isinstance(a, Var):
        def vjp_a(g, av=av, bv=bv):
            if av.ndim == 2 and bv.ndim == 2:
                return g @ bv.T
            if av.ndim == 1 and bv.ndim == 2:
                return bv @ g
            if av.ndim == 2 and bv.ndim == 1:
                return np.outer(g, bv)
            return g * bv
        parents.append((a.idx, vjp_a))
    if isinstance(b, Var):
        def vjp_b(g, av=av, bv=bv):
            if av.ndim == 2 and bv.ndim == 2:
                return av.T @ g
            if av.ndim == 1 and bv.ndim == 2:
                return np.outer(av, g)
            if av.ndim == 2 and bv.ndim == 1:
                return av.T @ g
            return g * av
        parents.append((b.idx, vjp_b))
    return tape._record(out, parents)


def concat_cols(*parts) -> Var:
    """Column-wise concatenation of 2-D operands (at least one Var)."""
    tape = _tape_of(*parts)
    values = [_value(p) for p in parts]
    out = np.concatenate(values, axis=1)
    parents = []
    offset = 0
    for p, v in zip(parts, values):
        lo, hi = offset, offset + v.shape[1]
        if isinstance(p, Var):
            parents.append((p.idx, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
        offset = hi
    return tape._record(out, parents)


def stack_cols(parts) -> Var:
    """Stack 1-D operands of length n into an (n, len(parts)) matrix."""
    tape = _tape_of(*parts)
    values = [_value(p) for p in parts]
    out = np.stack(values, axis=1)
    parents = []
    for j, p in enumerate(parts):
        if isinstance(p, Var):
            parents.append((p.idx, lambda g, j=j: g[:, j]))
    return tape._record(out, parents)


def slice_cols(a, start: int, stop: int) -> Var:
    tape = _tape_of(a)
    av = _value(a)
    out = av[:, start:stop].copy()

    def vjp(g, shape=av.shape, start=start, stop=stop):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return full

    return tape._record(out, [(a.idx, vjp)])


def diag_part(a) -> Var:
    tape = _tape_of(a)
    av = _value(a)
    out = np.diag(av).copy()

    def vjp(g, n=av.shape[0]):
        full = np.zeros((n, n))
        np.fill_diagonal(full, g)
        return full

    return tape._record(out, [(a.idx, vjp)])


def diag_embed(a) -> Var:
    tape = _tape_of(a)
    av = _value(a)
    out = np.diag(av)
    return tape._record(out, [(a.idx, lambda g: np.diag(g).copy())])


def triangular_solve(L, b, trans: bool = False) -> Var:
    """Solve L x = b (or L^T x = b when trans) for lower-triangular L."""
    tape = _tape_of(L, b)
    Lv, bv = _value(L), _value(b)
    x = solve_triangular(Lv, bv, lower=True, trans="T" if trans else "N")
    parents = []

    def grad_b(g, Lv=Lv, trans=trans):
        return solve_triangular(Lv, g, lower=True, trans="N" if trans else "T")

    if isinstance(b, Var):
        parents.append((b.idx, grad_b))
    if isinstance(L, Var):
        def vjp_L(g, Lv=Lv, x=x, trans=trans):
            bbar = grad_b(g)
            if x.ndim == 1:
                outer = np.outer(x, bbar) if trans else np.outer(bbar, x)
            else:
                outer = x @ bbar.T if trans else bbar @ x.T
            return -np.tril(outer)
        parents.append((L.idx, vjp_L))
    return tape._record(x, parents)


def _chol_backward(L: np.ndarray, Lbar: np.ndarray) -> np.ndarray:
    """VJP of A -> chol((A + A^T)/2) via the triangular differential identity."""
    P = np.tril(L.T @ Lbar)
    P[np.diag_indices_from(P)] *= 0.5
    X = solve_triangular(L, P, lower=True, trans="T")
    S = solve_triangular(L, X.T, lower=True, trans="T").T
    return 0.5 * (S + S.T)


def cholesky(a, jitter=DEFAULT_JITTER) -> Var:
    """Lower Cholesky factor of a symmetric(ized) PSD matrix.

    Jitter added by the retry ladder is treated as a constant shift.
    """
    tape = _tape_of(a)
    av = _value(a)
    L = chol_psd(av, jitter)
    return tape._record(L, [(a.idx, lambda g, L=L: _chol_backward(L, g))])


def logdet_from_chol(L: Var) -> Var:
    """log det(A) = 2 sum(log diag L) for A = L L^T."""
    return mul(vsum(log(diag_part(L))), 2.0)


def reparam_sample(mean, scale_tril, z: np.ndarray) -> Var:
    """Gaussian reparameterization mean + z @ L^T with constant noise z.

    Only the lower triangle of the scale factor is used. Gradient flows to
    the mean and the scale factor; z is treated as a constant even when
    passed as a Var.
    """
    tape = _tape_of(mean, scale_tril)
    mv, Lv = _value(mean), np.tril(_value(scale_tril))
    zv = _value(z)
    out = mv + zv @ Lv.T
    parents = []
    if isinstance(mean, Var):
        parents.append((mean.idx, lambda g, s=mv.shape: _unbroadcast(g, s)))
    if isinstance(scale_tril, Var):
        parents.append((scale_tril.idx, lambda g, zv=zv: np.tril(g.T @ zv)))
    return tape._record(out, parents)


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "square": square,
    "softplus": softplus,
    "maximum_const": maximum_const,
    "transpose": transpose,
    "reshape": reshape,
    "sum": vsum,
    "mean": mean,
    "dot": dot,
    "matmul": matmul,
    "concat_cols": concat_cols,
    "stack_cols": stack_cols,
    "slice_cols": slice_cols,
    "diag_part": diag_part,
    "diag_embed": diag_embed,
    "triangular_solve": triangular_solve,
    "cholesky": cholesky,
    "logdet_from_chol": logdet_from_chol,
    "reparam_sample": reparam_sample,
}


# ---------------------------------------------------------------------------
# Unconstrained parameter vectors


def softplus_np(x):
    return np.logaddexp(0.0, x)


def inv_softplus_np(y):
    y = np.asarray(y, dtype=float)
    out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out


@dataclass(frozen=True)
class BlockSpec:
    """One named parameter block with its positivity/triangular transform."""

    name: str
    shape: tuple
    transform: str = "identity"  # identity | softplus | chol

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class ParamVector:
    """Flat unconstrained view of a set of named parameter blocks.

    ``chol`` blocks store a full square matrix whose strict lower triangle is
    used as-is and whose diagonal passes through softplus; the strict upper
    triangle is ignored (and receives zero gradient).
    """

    def __init__(self, specs: list[BlockSpec]):
        self.specs = list(specs)
        self.offsets = {}
        off = 0
        for s in self.specs:
            self.offsets[s.name] = (off, off + s.size)
            off += s.size
        self.size = off

    def split(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for s in self.specs:
            lo, hi = self.offsets[s.name]
            out[s.name] = theta[lo:hi].reshape(s.shape)
        return out

    def join(self, blocks: dict[str, np.ndarray]) -> np.ndarray:
        theta = np.empty(self.size)
        for s in self.specs:
            lo, hi = self.offsets[s.name]
            theta[lo:hi] = np.asarray(blocks[s.name], dtype=float).ravel()
        return theta

    def constrain(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        for s in self.specs:
            raw = self.split(theta)[s.name]
            if s.transform == "identity":
                out[s.name] = raw
            elif s.transform == "softplus":
                out[s.name] = softplus_np(raw)
            elif s.transform == "chol":
                L = np.tril(raw, k=-1)
                L[np.diag_indices_from(L)] = softplus_np(np.diag(raw))
                out[s.name] = L
            else:
                raise ValueError(f"unknown transform {s.transform!r}")
        return out

    def unconstrain(self, blocks: dict[str, np.ndarray]) -> np.ndarray:
        raw = {}
        for s in self.specs:
            v = np.asarray(blocks[s.name], dtype=float)
            if s.transform == "identity":
                raw[s.name] = v
            elif s.transform == "softplus":
                raw[s.name] = inv_softplus_np(v)
            elif s.transform == "chol":
                W = np.tril(v, k=-1)
                W[np.diag_indices_from(W)] = inv_softplus_np(np.diag(v))
                raw[s.name] = W
            else:
                raise ValueError(f"unknown transform {s.transform!r}")
        return self.join(raw)

    def constrained_vars(self, tape: Tape, theta: np.ndarray) -> dict[str, Var]:
        """Register leaves for every block and apply the transforms on-tape."""
        out = {}
        for s in self.specs:
            raw = self.split(theta)[s.name]
            leaf = tape.leaf(raw, name=s.name)
            if s.transform == "identity":
                out[s.name] = leaf
            elif s.transform == "softplus":
                out[s.name] = softplus(leaf)
            elif s.transform == "chol":
                n = s.shape[0]
                strict = mul(leaf, np.tril(np.ones((n, n)), k=-1))
                diag = softplus(diag_part(leaf))
                out[s.name] = add(strict, diag_embed(diag))
            else:
                raise ValueError(f"unknown transform {s.transform!r}")
        return out


def check_grad(f, theta: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f(theta)`` must return ``(value, grad)``; only the value is used for the
    finite-difference probes. Coordinates where |g| + |g_fd| <= 1e-8 are
    skipped.
    """
    theta = np.asarray(theta, dtype=float)
    _, grad = f(theta)
    grad = np.asarray(grad, dtype=float)
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        tp = theta.copy()
        tp[i] += h
        vp, _ = f(tp)
        tm = theta.copy()
        tm[i] -= h
        vm, _ = f(tm)
        fd[i] = (vp - vm) / (2.0 * h)
    denom = np.abs(grad) + np.abs(fd)
    mask = denom > 1e-8
    if not np.any(mask):
        return 0.0
    rel = np.abs(grad - fd)[mask] / denom[mask]
    return float(np.max(rel))
