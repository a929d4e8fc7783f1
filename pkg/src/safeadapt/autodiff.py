"""Minimal reverse-mode differentiation over float64 numpy arrays.

The tape covers exactly the operations the training losses compose:
affine maps, tanh/relu, 1-D convolution, batched matrix-vector products,
elementwise square, concatenation/reshape and summation. Values are
always ``np.float64``; batches live on the leading axis.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "leaf",
    "lift",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "bmatvec",
    "tanh",
    "relu",
    "square",
    "vsum",
    "mean",
    "reshape",
    "concat",
    "slice_cols",
    "slice_rows",
    "conv1d",
    "backward",
    "finite_difference_gradient",
]


def _asarray(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise FloatingPointError("non-finite value entered the tape")
    return a


class Var:
    """A tape node: a value plus links to its parents' vector-Jacobian products."""

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value, parents=()):
        self.value = value
        self.grad = None
        # parents: tuple of (Var, vjp) where vjp maps the output cotangent
        # to this parent's cotangent contribution.
        self.parents = parents

    @property
    def shape(self):
        return self.value.shape


def leaf(value) -> Var:
    """Create a differentiable leaf (gradients accumulate here)."""
    return Var(_asarray(value))


def lift(x) -> Var:
    """Wrap a constant; constants participate in the graph but keep no parents."""
    if isinstance(x, Var):
        return x
    return Var(_asarray(x))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value)
    out.parents = (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(g, b.value.shape)),
    )
    return out


def sub(a: Var, b: Var) -> Var:
    out = Var(a.value - b.value)
    out.parents = (
        (a, lambda g: _unbroadcast(g, a.value.shape)),
        (b, lambda g: _unbroadcast(-g, b.value.shape)),
    )
    return out


def mul(a: Var, b: Var) -> Var:
    out = Var(a.value * b.value)
    out.parents = (
        (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
    )
    return out


def scale(a: Var, s: float) -> Var:
    s = float(s)
    out = Var(a.value * s)
    out.parents = ((a, lambda g: g * s),)
    return out


def matmul(a: Var, b: Var) -> Var:
    """2-D matrix product; used as ``(batch, in) @ (in, out)``."""
    out = Var(a.value @ b.value)
    out.parents = (
        (a, lambda g: g @ b.value.T),
        (b, lambda g: a.value.T @ g),
    )
    return out


def bmatvec(m: Var, v: Var) -> Var:
    """Batched matrix-vector product: (B, n, m) x (B, m) -> (B, n)."""
    out = Var(np.einsum("bnm,bm->bn", m.value, v.value))
    out.parents = (
        (m, lambda g: np.einsum("bn,bm->bnm", g, v.value)),
        (v, lambda g: np.einsum("bnm,bn->bm", m.value, g)),
    )
    return out


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    out = Var(y)
    out.parents = ((a, lambda g: g * (1.0 - y * y)),)
    return out


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    out = Var(np.where(mask, a.value, 0.0))
    out.parents = ((a, lambda g: g * mask),)
    return out


def square(a: Var) -> Var:
    out = Var(a.value * a.value)
    out.parents = ((a, lambda g: g * (2.0 * a.value)),)
    return out


def vsum(a: Var) -> Var:
    out = Var(np.asarray(a.value.sum()))
    out.parents = ((a, lambda g: np.broadcast_to(g, a.value.shape).copy()),)
    return out


def mean(a: Var) -> Var:
    return scale(vsum(a), 1.0 / a.value.size)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    out = Var(a.value.reshape(shape))
    out.parents = ((a, lambda g: g.reshape(old)),)
    return out


def concat(parts, axis: int = -1) -> Var:
    parts = list(parts)
    values = [p.value for p in parts]
    out = Var(np.concatenate(values, axis=axis))
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    out.parents = tuple((p, make_vjp(i)) for i, p in enumerate(parts))
    return out


def slice_cols(a: Var, start: int, stop: int) -> Var:
    """Select columns [start, stop) of a 2-D value; gradient scatters back."""
    out = Var(a.value[:, start:stop])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        return full

    out.parents = ((a, vjp),)
    return out


def slice_rows(a: Var, start: int, stop: int) -> Var:
    """Select rows [start, stop) of a 2-D value; gradient scatters back."""
    out = Var(a.value[start:stop, :])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[start:stop, :] = g
        return full

    out.parents = ((a, vjp),)
    return out


def _conv1d_patches(xv: np.ndarray, k: int, stride: int) -> np.ndarray:
    """im2col: (B, C, T) -> (B * T_out, C * K) patch matrix."""
    batch, c_in, t_len = xv.shape
    t_out = (t_len - k) // stride + 1
    cols = np.empty((batch, c_in, k, t_out))
    for kk in range(k):
        cols[:, :, kk, :] = xv[:, :, kk : kk + stride * t_out : stride]
    # (B, T_out, C, K) -> (B*T_out, C*K)
    return cols.transpose(0, 3, 1, 2).reshape(batch * t_out, c_in * k)


def conv1d_forward(xv: np.ndarray, wv: np.ndarray, stride: int = 1):
    """Shared forward used by both the plain and the taped evaluation.

    Returns (out (B, C_out, T_out), patches) so the two paths are
    bit-identical and the backward pass can reuse the patch matrix.
    """
    batch, c_in, t_len = xv.shape
    c_out, c_in_w, k = wv.shape
    if c_in_w != c_in:
        raise ValueError(f"channel mismatch: input {c_in}, kernel {c_in_w}")
    t_out = (t_len - k) // stride + 1
    if t_out < 1:
        raise ValueError(f"kernel {k} (stride {stride}) exceeds input length {t_len}")
    patches = _conv1d_patches(xv, k, stride)
    w_mat = wv.reshape(c_out, c_in * k)
    out = (patches @ w_mat.T).reshape(batch, t_out, c_out).transpose(0, 2, 1)
    return out, patches


def conv1d(x: Var, w: Var, stride: int = 1) -> Var:
    """1-D correlation: x (B, C_in, T), w (C_out, C_in, K) -> (B, C_out, T_out).

    T_out = (T - K) // stride + 1; no padding.
    """
    xv, wv = x.value, w.value
    batch, c_in, t_len = xv.shape
    c_out, _, k = wv.shape
    out_val, patches = conv1d_forward(xv, wv, stride)
    t_out = out_val.shape[2]

    def vjp_x(g):
        g_mat = g.transpose(0, 2, 1).reshape(batch * t_out, c_out)
        g_patches = (g_mat @ wv.reshape(c_out, c_in * k)).reshape(batch, t_out, c_in, k)
        gx = np.zeros_like(xv)
        for kk in range(k):
            gx[:, :, kk : kk + stride * t_out : stride] += g_patches[:, :, :, kk].transpose(0, 2, 1)
        return gx

    def vjp_w(g):
        g_mat = g.transpose(0, 2, 1).reshape(batch * t_out, c_out)
        return (g_mat.T @ patches).reshape(c_out, c_in, k)

    out = Var(out_val)
    out.parents = ((x, vjp_x), (w, vjp_w))
    return out


def _topo_order(root: Var):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into every reachable node's ``grad``.

    ``root`` must be scalar-valued. Existing ``grad`` fields on reachable
    nodes are overwritten.
    """
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")
    if not np.isfinite(root.value):
        raise FloatingPointError("non-finite loss")
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = contrib.copy() if isinstance(contrib, np.ndarray) else contrib
            else:
                parent.grad = parent.grad + contrib


def finite_difference_gradient(fn, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    Independent of the tape; used as the reference oracle in tests.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    work = theta.copy()
    for i in range(theta.size):
        orig = work[i]
        work[i] = orig + h
        f_plus = float(fn(work))
        work[i] = orig - h
        f_minus = float(fn(work))
        work[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
