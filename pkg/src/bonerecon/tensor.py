"""Minimal reverse-mode autodiff engine on f64 numpy buffers.

Every kernel the reconstruction networks and losses need is implemented
here with an explicit backward rule: dense linear layers, 2D/3D
convolution, pooling, nearest upsampling, concatenation, softmax
cross-entropy, L1 loss, and multilinear gathers (differentiable w.r.t.
the grid values only). Kernels are registered in OP_CATALOG so the
gradcheck suite can enumerate them.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

# Debug-mode finiteness check after every forward op (costly; off by default).
CHECK_FINITE = bool(os.environ.get("BONERECON_CHECK_FINITE"))

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional f64 value with an optional gradient trace."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; grads accumulate across calls."""
        if self.data.shape != ():
            raise ValueError(f"backward() requires a scalar, got shape {self.shape}")
        # Iterative topological order over the recorded graph.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones((), dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar (losses are combined with these) --

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result, attaching the backward closure when grads are live."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise / reduction plumbing


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g)

        return _make(a.data + b.data, (a, b), bwd)
    c = float(b)

    def bwd_s(g):
        a._accumulate(g)

    return _make(a.data + c, (a,), bwd_s)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        return _make(a.data * b.data, (a, b), bwd)
    c = float(b)

    def bwd_s(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), bwd_s)


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(a.data.sum(), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def bwd(g):
        a._accumulate(np.broadcast_to(g / n, a.shape).copy())

    return _make(a.data.mean(), (a,), bwd)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def bwd(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def bwd(g):
        a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a._accumulate(g * out * (1.0 - out))

    return _make(out, (a,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bwd)


# ---------------------------------------------------------------------------
# dense and convolutional kernels


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,Din] @ w[Din,Dout] + b[Dout]."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ValueError(
            f"linear dims: x{x.shape} w{w.shape} b{b.shape} are inconsistent"
        )

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), bwd)


# Scatter index maps for conv backward, keyed by geometry; tiny int arrays.
_scatter_cache: dict[tuple, np.ndarray] = {}


def _conv_scatter_index(spatial_pad: tuple[int, ...], k: tuple[int, ...], s: int):
    key = (spatial_pad, k, s)
    idx = _scatter_cache.get(key)
    if idx is None:
        nd = len(spatial_pad)
        out_sp = tuple((spatial_pad[d] - k[d]) // s + 1 for d in range(nd))
        grids = np.meshgrid(
            *[np.arange(o) * s for o in out_sp],
            *[np.arange(kk) for kk in k],
            indexing="ij",
        )
        pos = [grids[d] + grids[nd + d] for d in range(nd)]
        flat = pos[0]
        for d in range(1, nd):
            flat = flat * spatial_pad[d] + pos[d]
        idx = np.ascontiguousarray(flat.reshape(-1))
        _scatter_cache[key] = idx
    return idx


def _convnd(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int, nd: int) -> Tensor:
    if x.data.ndim != nd + 2 or w.data.ndim != nd + 2:
        raise ValueError(f"conv{nd}d expects rank-{nd + 2} input/weight, got "
                         f"{x.data.ndim}/{w.data.ndim}")
    n, c = x.shape[:2]
    kout, cin = w.shape[:2]
    k = w.shape[2:]
    if cin != c:
        raise ValueError(f"conv{nd}d channel mismatch: input has {c}, weight expects {cin}")
    if b.shape != (kout,):
        raise ValueError(f"conv{nd}d bias shape {b.shape} != ({kout},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    spatial = x.shape[2:]
    spatial_pad = tuple(spatial[d] + 2 * pad for d in range(nd))
    for d in range(nd):
        if k[d] > spatial_pad[d]:
            raise ValueError(
                f"conv{nd}d kernel {k} exceeds padded input {spatial_pad}"
            )
    out_sp = tuple((spatial_pad[d] - k[d]) // stride + 1 for d in range(nd))

    pad_width = [(0, 0), (0, 0)] + [(pad, pad)] * nd
    xp = np.pad(x.data, pad_width) if pad else x.data

    if k == (1,) * nd and stride == 1:
        # 1x1 kernels are a plain channel mixing; skip the window machinery.
        cols = xp.reshape(n, c, -1)
        out = np.einsum("kc,ncs->nks", w.data.reshape(kout, c), cols, optimize=True)
        out = out.reshape(n, kout, *out_sp) + b.data.reshape(
            (1, kout) + (1,) * nd
        )

        def bwd_1x1(g):
            gs = g.reshape(n, kout, -1)
            if b.requires_grad:
                b._accumulate(gs.sum(axis=(0, 2)))
            if w.requires_grad:
                gw = np.einsum("nks,ncs->kc", gs, cols, optimize=True)
                w._accumulate(gw.reshape(w.shape))
            if x.requires_grad:
                gx = np.einsum("kc,nks->ncs", w.data.reshape(kout, c), gs,
                               optimize=True)
                x._accumulate(gx.reshape(x.shape))

        return _make(out, (x, w, b), bwd_1x1)

    axes = tuple(range(2, 2 + nd))
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=axes)
    win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    # win: [N, C, *out_sp, *k]; contract channel+kernel dims against the weight.
    cdims = (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    wdims = tuple(range(1, 2 + nd))
    out = np.tensordot(win, w.data, axes=(cdims, wdims))  # [N, *out_sp, K]
    out = np.moveaxis(out, -1, 1) + b.data.reshape((1, kout) + (1,) * nd)

    def bwd(g):
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0,) + axes))
        if w.requires_grad:
            gdims = (0,) + tuple(range(2, 2 + nd))
            windims = (0,) + tuple(range(2, 2 + nd))
            gw = np.tensordot(g, win, axes=(gdims, windims))  # [K, C, *k]
            w._accumulate(gw)
        if x.requires_grad:
            gcols = np.tensordot(np.moveaxis(g, 1, -1), w.data, axes=([nd + 1], [0]))
            # gcols: [N, *out_sp, C, *k] -> [N, C, out*k] for flat scatter
            gcols = np.moveaxis(gcols, nd + 1, 1).reshape(n, c, -1)
            idx = _conv_scatter_index(spatial_pad, k, stride)
            padded_size = int(np.prod(spatial_pad))
            base = (np.arange(n * c) * padded_size)[:, None]
            flat = np.bincount(
                (base + idx[None, :]).ravel(),
                weights=gcols.reshape(n * c, -1).ravel(),
                minlength=n * c * padded_size,
            )
            gx = flat.reshape((n, c) + spatial_pad)
            if pad:
                sl = (slice(None), slice(None)) + (slice(pad, -pad),) * nd
                gx = gx[sl]
            x._accumulate(gx)

    return _make(out, (x, w, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,H,W] with w[K,C,kh,kw] plus bias."""
    return _convnd(x, w, b, stride, pad, 2)


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[N,C,D,H,W] with w[K,C,kd,kh,kw] plus bias."""
    return _convnd(x, w, b, stride, pad, 3)


def _maxpoolnd(x: Tensor, k: int, nd: int) -> Tensor:
    spatial = x.shape[2:]
    if any(sp % k for sp in spatial):
        raise ValueError(f"maxpool{nd}d requires extents divisible by {k}, got {spatial}")
    n, c = x.shape[:2]
    axes = tuple(range(2, 2 + nd))
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k,) * nd, axis=axes)
    win = win[(slice(None), slice(None)) + (slice(None, None, k),) * nd]
    out_sp = tuple(sp // k for sp in spatial)
    flat = win.reshape(n, c, *out_sp, k**nd)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    def bwd(g):
        # Unravel the window-local argmax back to input coordinates.
        local = np.unravel_index(am.reshape(-1), (k,) * nd)
        outer = np.meshgrid(*[np.arange(o) * k for o in out_sp], indexing="ij")
        flat_idx = None
        for d in range(nd):
            coord = np.broadcast_to(outer[d], (n, c) + out_sp).reshape(-1) + local[d]
            flat_idx = coord if flat_idx is None else flat_idx * spatial[d] + coord
        spatial_size = int(np.prod(spatial))
        base = np.repeat(np.arange(n * c) * spatial_size, int(np.prod(out_sp)))
        acc = np.bincount(
            base + flat_idx, weights=g.reshape(-1), minlength=n * c * spatial_size
        )
        x._accumulate(acc.reshape(x.shape))

    return _make(out, (x,), bwd)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling over kxk blocks; ties go to the first cell."""
    return _maxpoolnd(x, k, 2)


def maxpool3d(x: Tensor, k: int = 2) -> Tensor:
    return _maxpoolnd(x, k, 3)


def _upsamplend(x: Tensor, f: int, nd: int) -> Tensor:
    out = x.data
    for d in range(nd):
        out = np.repeat(out, f, axis=2 + d)
    n, c = x.shape[:2]
    spatial = x.shape[2:]

    def bwd(g):
        shape = [n, c]
        for sp in spatial:
            shape += [sp, f]
        g = g.reshape(shape)
        g = g.sum(axis=tuple(range(3, 3 + 2 * nd, 2)))
        x._accumulate(g)

    return _make(out, (x,), bwd)


def upsample2d(x: Tensor, f: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by an integer factor."""
    return _upsamplend(x, f, 2)


def upsample3d(x: Tensor, f: int = 2) -> Tensor:
    return _upsamplend(x, f, 3)


# ---------------------------------------------------------------------------
# losses


def _validate_one_hot(t: np.ndarray) -> None:
    if t.ndim != 2:
        raise ValueError(f"one-hot target must be 2D, got shape {t.shape}")
    ok = np.all((t == 0.0) | (t == 1.0)) and np.all(t.sum(axis=1) == 1.0)
    if not ok:
        raise ValueError("target rows must be exactly one-hot")


def softmax_ce(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of softmax(logits) against one-hot targets."""
    t = _as_array(target)
    if logits.shape != t.shape:
        raise ValueError(f"softmax_ce shapes differ: {logits.shape} vs {t.shape}")
    _validate_one_hot(t)
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    lse = m[:, 0] + np.log(ez.sum(axis=1))
    n = z.shape[0]
    loss = (lse - (z * t).sum(axis=1)).mean()

    def bwd(g):
        sm = ez / ez.sum(axis=1, keepdims=True)
        logits._accumulate((sm - t) * (g / n))

    return _make(np.float64(loss), (logits,), bwd)


def softmax(z: np.ndarray) -> np.ndarray:
    """Plain numpy softmax over the last axis (reporting/inference helper)."""
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def l1_loss(a: Tensor, b) -> Tensor:
    """Mean elementwise absolute difference."""
    bd = _as_array(b)
    if a.shape != bd.shape:
        raise ValueError(f"l1_loss shapes differ: {a.shape} vs {bd.shape}")
    diff = a.data - bd
    n = diff.size

    def bwd(g):
        ga = np.sign(diff) * (g / n)
        a._accumulate(ga)
        if isinstance(b, Tensor) and b.requires_grad:
            b._accumulate(-ga)

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return _make(np.float64(np.abs(diff).mean()), parents, bwd)


def bce_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits (numerically stable form)."""
    t = _as_array(target)
    if logits.shape != t.shape:
        raise ValueError(f"bce_logits shapes differ: {logits.shape} vs {t.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def bwd(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        logits._accumulate((s - t) * (g / n))

    return _make(np.float64(loss.mean()), (logits,), bwd)


# ---------------------------------------------------------------------------
# multilinear gathers (differentiable w.r.t. the grid, not the coordinates)


def _scatter_rows(size: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Sum rows of vals[N,C] into a [size,C] buffer at row indices idx."""
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    svals = vals[order]
    uniq, starts = np.unique(sidx, return_index=True)
    sums = np.add.reduceat(svals, starts, axis=0)
    buf = np.zeros((size, vals.shape[1]), dtype=np.float64)
    buf[uniq] = sums
    return buf


def _gather_setup(extent: int, q: np.ndarray):
    q = np.clip(q, 0.0, extent - 1.0)
    i0 = np.minimum(q.astype(np.int64), max(extent - 2, 0))
    t = q - i0
    i1 = np.minimum(i0 + 1, extent - 1)
    return i0, i1, t


def gather2d(grid: Tensor, coords) -> Tensor:
    """Bilinear sample of grid[C,H,W] at coords[N,2] = (u,v) index space.

    Out-of-range coordinates clamp to the border. Gradients flow to the
    grid values; the coordinates are treated as constants.
    """
    if grid.data.ndim != 3:
        raise ValueError(f"gather2d expects grid[C,H,W], got rank {grid.data.ndim}")
    c, h, w = grid.shape
    uv = np.asarray(coords, dtype=np.float64)
    u0, u1, tu = _gather_setup(w, uv[:, 0])
    v0, v1, tv = _gather_setup(h, uv[:, 1])
    g = grid.data
    w00 = (1 - tv) * (1 - tu)
    w01 = (1 - tv) * tu
    w10 = tv * (1 - tu)
    w11 = tv * tu
    out = (
        g[:, v0, u0] * w00 + g[:, v0, u1] * w01
        + g[:, v1, u0] * w10 + g[:, v1, u1] * w11
    ).T

    def bwd(go):
        idx = np.concatenate([v0 * w + u0, v0 * w + u1, v1 * w + u0, v1 * w + u1])
        vals = np.concatenate(
            [go * w00[:, None], go * w01[:, None], go * w10[:, None], go * w11[:, None]]
        )
        grid._accumulate(_scatter_rows(h * w, idx, vals).T.reshape(grid.shape))

    return _make(np.ascontiguousarray(out), (grid,), bwd)


def gather3d(grid: Tensor, coords) -> Tensor:
    """Trilinear sample of grid[C,D,H,W] at coords[N,3] = (i,j,k) index space."""
    if grid.data.ndim != 4:
        raise ValueError(f"gather3d expects grid[C,D,H,W], got rank {grid.data.ndim}")
    c, d, h, w = grid.shape
    q = np.asarray(coords, dtype=np.float64)
    i0, i1, ti = _gather_setup(d, q[:, 0])
    j0, j1, tj = _gather_setup(h, q[:, 1])
    k0, k1, tk = _gather_setup(w, q[:, 2])
    g = grid.data.reshape(c, -1)
    corners: list[tuple[np.ndarray, np.ndarray]] = []
    for ii, wi in ((i0, 1 - ti), (i1, ti)):
        for jj, wj in ((j0, 1 - tj), (j1, tj)):
            for kk, wk in ((k0, 1 - tk), (k1, tk)):
                corners.append(((ii * h + jj) * w + kk, wi * wj * wk))
    out = np.zeros((q.shape[0], c), dtype=np.float64)
    for idx, wt in corners:
        out += g[:, idx].T * wt[:, None]

    def bwd(go):
        idx = np.concatenate([ix for ix, _ in corners])
        vals = np.concatenate([go * wt[:, None] for _, wt in corners])
        grid._accumulate(_scatter_rows(d * h * w, idx, vals).T.reshape(grid.shape))

    return _make(out, (grid,), bwd)


# ---------------------------------------------------------------------------
# optimizer, gradcheck, checkpoints

OP_CATALOG: dict[str, Callable] = {
    "linear": linear,
    "conv2d": conv2d,
    "conv3d": conv3d,
    "relu": relu,
    "maxpool2d": maxpool2d,
    "maxpool3d": maxpool3d,
    "upsample2d": upsample2d,
    "upsample3d": upsample3d,
    "concat": concat,
    "softmax_ce": softmax_ce,
    "l1_loss": l1_loss,
    "gather2d": gather2d,
    "gather3d": gather3d,
    "sigmoid": sigmoid,
    "bce_logits": bce_logits,
}


class SGD:
    """Classic (non-Nesterov) momentum: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; "
                                   "run backward() before step()")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def gradcheck(fn: Callable[[], Tensor], wrt: Iterable[Tensor],
              eps: float = 1e-5, rtol: float = 1e-4) -> float:
    """Compare analytic grads of the scalar fn() against central differences.

    Returns the worst relative error over all checked elements.
    """
    params = list(wrt)
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gn = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn().item()
            flat[i] = orig - eps
            fm = fn().item()
            flat[i] = orig
            gn[i] = (fp - fm) / (2 * eps)
        ga_flat = ga.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ga_flat), np.abs(gn)), 1e-6)
        err = float(np.max(np.abs(ga_flat - gn) / denom))
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(
                f"gradcheck failed: max rel err {err:.3e} > {rtol:.1e}"
            )
    return worst


CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path, extra: dict | None = None) -> None:
    """Flat little-endian f64 buffers plus a JSON manifest at <path>.json."""
    path = Path(path)
    manifest: dict = {"schema_version": CHECKPOINT_SCHEMA_VERSION, "params": {}}
    if extra:
        manifest.update(extra)
    offset = 0
    chunks = []
    for name in sorted(params):
        buf = params[name].data.astype("<f8").tobytes()
        manifest["params"][name] = {"shape": list(params[name].shape),
                                    "offset": offset}
        chunks.append(buf)
        offset += len(buf)
    path.write_bytes(b"".join(chunks))
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema: "
                         f"{manifest.get('schema_version')}")
    raw = path.read_bytes()
    out: dict[str, np.ndarray] = {}
    total = 0
    for name, meta in manifest["params"].items():
        shape = tuple(meta["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        total = max(total, meta["offset"] + nbytes)
        arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8,
                            offset=meta["offset"]).reshape(shape)
        out[name] = arr.astype(np.float64)
    if len(raw) != total:
        raise ValueError(f"checkpoint size mismatch: file has {len(raw)} bytes, "
                         f"manifest expects {total}")
    return out, manifest
