"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The graph is define-by-run: every op returns a new Tensor that remembers its
inputs and a closure computing input gradients from the output gradient.
Calling backward() on a scalar loss walks the graph once in reverse
topological order and deposits gradients on leaf tensors created with
requires_grad=True.

Values are float32 by default. Ops preserve the dtype of their inputs so the
finite-difference checker can run the same graph in float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, dtype=np.float32):
        self.values = np.asarray(values, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(values, parents, backward_fn):
    """Build an op output; the graph is only recorded if some input needs it."""
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x, dtype=np.float32) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Repeated calls keep accumulating; clear grads (set to None) between steps.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")

    # Iterative post-order DFS so deep chains do not hit the recursion limit.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# elementwise ops


def _binary_shapes(a, b, opname):
    """Same shape, or one operand is a scalar (size-1) tensor."""
    if a.shape == b.shape:
        return None
    if b.size == 1:
        return "b"
    if a.size == 1:
        return "a"
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    return g.sum().reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    vals = a.values + b.values

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(vals, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    vals = a.values * b.values

    def bw(g):
        return _reduce_to(g * b.values, a.shape), _reduce_to(g * a.values, b.shape)

    return _result(vals, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    return _result(a.values * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor, c) -> Tensor:
    """Add a plain array/float; no gradient flows to the constant."""
    vals = a.values + np.asarray(c, dtype=a.values.dtype)
    if vals.shape != a.shape:
        raise ShapeError(f"add_const: constant shape {np.shape(c)} vs tensor {a.shape}")
    return _result(vals, (a,), lambda g: (g,))


def sum_all(a: Tensor) -> Tensor:
    vals = a.values.sum(dtype=a.values.dtype).reshape(())

    def bw(g):
        return (np.full_like(a.values, g.reshape(())),)

    return _result(vals, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    vals = np.abs(a.values)

    def bw(g):
        return (g * np.sign(a.values),)

    return _result(vals, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0

    def bw(g):
        return (g * mask,)

    return _result(a.values * mask, (a,), bw)


def div_by_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Elementwise a / s where s is a scalar tensor."""
    if s.size != 1:
        raise ShapeError(f"div_by_scalar: divisor must be scalar, got {s.shape}")
    sval = s.values.reshape(())
    vals = a.values / sval

    def bw(g):
        ga = g / sval
        gs = -(g * a.values).sum(dtype=a.values.dtype) / (sval * sval)
        return ga, gs.reshape(s.shape)

    return _result(vals, (a, s), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Value passthrough that contributes zero gradient upstream."""
    return Tensor(a.values, requires_grad=False, dtype=a.values.dtype)


def reshape(a: Tensor, shape) -> Tensor:
    vals = a.values.reshape(shape)
    return _result(vals, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# linear algebra ops


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: (N, D_in) @ (D_out, D_in)^T + (D_out,)."""
    if x.values.ndim != 2 or w.values.ndim != 2:
        raise ShapeError(f"linear: need 2-d operands, got {x.shape} and {w.shape}")
    n, d_in = x.shape
    d_out, d_in_w = w.shape
    if d_in != d_in_w or b.shape != (d_out,):
        raise ShapeError(
            f"linear: x {x.shape}, w {w.shape}, b {b.shape} do not agree"
        )
    vals = x.values @ w.values.T + b.values

    def bw(g):
        return g @ w.values, g.T @ x.values, g.sum(axis=0)

    return _result(vals, (x, w, b), bw)


def _im2col(xp, k, stride, out_h, out_w):
    c = xp.shape[0]
    cols = np.empty((c, k, k, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride]
    return cols.reshape(c * k * k, out_h * out_w)


def _col2im(dcols, c, hp, wp, k, stride, out_h, out_w):
    dxp = np.zeros((c, hp, wp), dtype=dcols.dtype)
    dc = dcols.reshape(c, k, k, out_h, out_w)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += dc[:, i, j]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation: (C_in, H, W) * (C_out, C_in, k, k) + (C_out,)."""
    if x.values.ndim != 3 or w.values.ndim != 4:
        raise ShapeError(f"conv2d: need 3-d input and 4-d weight, got {x.shape}, {w.shape}")
    c_in, h, wd = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if c_in != c_in_w or k != k2:
        raise ShapeError(f"conv2d: input channels {c_in} vs weight {w.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size {k} must be odd")
    if b.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {b.shape} vs {c_out} output channels")
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wd + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape}, k={k}, stride={stride}")

    if padding:
        xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.values
    cols = _im2col(xp, k, stride, out_h, out_w)
    w_flat = w.values.reshape(c_out, c_in * k * k)
    vals = (w_flat @ cols + b.values[:, None]).reshape(c_out, out_h, out_w)

    def bw(g):
        g_flat = g.reshape(c_out, out_h * out_w)
        dw = (g_flat @ cols.T).reshape(w.shape)
        db = g_flat.sum(axis=1)
        dcols = w_flat.T @ g_flat
        dxp = _col2im(dcols, c_in, xp.shape[1], xp.shape[2], k, stride, out_h, out_w)
        if padding:
            dx = dxp[:, padding:-padding, padding:-padding]
        else:
            dx = dxp
        return dx, dw, db

    return _result(vals, (x, w, b), bw)


def _resize_matrix(n_in, n_out, dtype):
    """Align-corners 1-d linear interpolation as an (n_out, n_in) matrix."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1:
        m[0, 0] = 1.0
        return m
    src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.floor(src).astype(int)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resize of a (C, H, W) tensor."""
    if x.values.ndim != 3:
        raise ShapeError(f"bilinear_resize: need (C, H, W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target size {out_h}x{out_w}")
    c, h, wd = x.shape
    ry = _resize_matrix(h, out_h, x.values.dtype)
    rx = _resize_matrix(wd, out_w, x.values.dtype)
    # out[c] = ry @ x[c] @ rx.T, done as two batched matmuls
    vals = ry @ x.values @ rx.T

    def bw(g):
        return (ry.T @ g @ rx,)

    return _result(vals, (x,), bw)


def concat_channels(inputs) -> Tensor:
    """Stack (C_i, H, W) tensors along the channel axis."""
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("concat_channels: empty input list")
    hw = inputs[0].shape[1:]
    for t in inputs:
        if t.values.ndim != 3 or t.shape[1:] != hw:
            raise ShapeError(
                f"concat_channels: spatial mismatch {[t.shape for t in inputs]}"
            )
    vals = np.concatenate([t.values for t in inputs], axis=0)
    splits = np.cumsum([t.shape[0] for t in inputs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=0))

    return _result(vals, tuple(inputs), bw)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate (N, A) and (N, B) row-wise features into (N, A+B)."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols: {a.shape} vs {b.shape}")
    na = a.shape[1]
    vals = np.concatenate([a.values, b.values], axis=1)

    def bw(g):
        return g[:, :na], g[:, na:]

    return _result(vals, (a, b), bw)


# ---------------------------------------------------------------------------
# gather / sampling ops


def gather_spatial(f: Tensor, flat_idx) -> Tensor:
    """Pick columns of a (C, H, W) grid: returns (N, C) features at flat v*W+u."""
    if f.values.ndim != 3:
        raise ShapeError(f"gather_spatial: need (C, H, W), got {f.shape}")
    c = f.shape[0]
    hw = f.shape[1] * f.shape[2]
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    if flat_idx.ndim != 1 or (flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= hw)):
        raise ShapeError("gather_spatial: index out of range")
    fm = f.values.reshape(c, hw)
    vals = fm[:, flat_idx].T.copy()

    def bw(g):
        df = np.zeros((hw, c), dtype=f.values.dtype)
        np.add.at(df, flat_idx, g)
        return (df.T.reshape(f.shape),)

    return _result(vals, (f,), bw)


def sample_bilinear(f: Tensor, xf, yf) -> Tensor:
    """Bilinear point samples of a (C, H, W) grid at fractional (xf, yf).

    Coordinates are in grid units (0..W-1, 0..H-1); out-of-range coordinates
    are clamped. Returns (N, C); differentiable w.r.t. the grid.
    """
    if f.values.ndim != 3:
        raise ShapeError(f"sample_bilinear: need (C, H, W), got {f.shape}")
    c, h, wd = f.shape
    xf = np.clip(np.asarray(xf, dtype=np.float64), 0, wd - 1)
    yf = np.clip(np.asarray(yf, dtype=np.float64), 0, h - 1)
    x0 = np.minimum(np.floor(xf).astype(np.intp), wd - 1)
    y0 = np.minimum(np.floor(yf).astype(np.intp), h - 1)
    x1 = np.minimum(x0 + 1, wd - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xf - x0).astype(f.values.dtype)
    wy = (yf - y0).astype(f.values.dtype)

    fm = f.values.reshape(c, h * wd)
    corners = (
        (y0 * wd + x0, (1 - wy) * (1 - wx)),
        (y0 * wd + x1, (1 - wy) * wx),
        (y1 * wd + x0, wy * (1 - wx)),
        (y1 * wd + x1, wy * wx),
    )
    vals = np.zeros((xf.size, c), dtype=f.values.dtype)
    for idx, w8 in corners:
        vals += fm[:, idx].T * w8[:, None]

    def bw(g):
        df = np.zeros((h * wd, c), dtype=f.values.dtype)
        for idx, w8 in corners:
            np.add.at(df, idx, g * w8[:, None])
        return (df.T.reshape(f.shape),)

    return _result(vals, (f,), bw)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Row gather: out[i] = x[idx[i]] along the first axis."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError("gather_rows: index out of range")
    vals = x.values[idx].copy()

    def bw(g):
        dx = np.zeros_like(x.values)
        np.add.at(dx, idx, g)
        return (dx,)

    return _result(vals, (x,), bw)
