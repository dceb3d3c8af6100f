"""Minimal reverse-mode tensor engine for the control-map networks.

Arrays are numpy, feature maps are channels-last (batch, rows, cols, chan).
The op set is exactly what the pose encoder and the U-Net need; every op
records a closure on a tape and `backward` replays it in reverse
topological order. Single-threaded numpy keeps runs bitwise reproducible.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import expit


class ShapeMismatch(ValueError):
    pass


class GraphReused(RuntimeError):
    """backward() ran twice over the same recorded graph."""


class NonFiniteValue(FloatingPointError):
    """An op produced NaN/Inf while finite checks were enabled."""


_grad_enabled = True
_finite_checks = True


def set_finite_checks(enabled: bool) -> None:
    global _finite_checks
    _finite_checks = bool(enabled)


def finite_checks_enabled() -> bool:
    return _finite_checks


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    try:
        yield
    finally:
        _finite_checks = prev


def _checked(data: np.ndarray) -> np.ndarray:
    if _finite_checks and not np.isfinite(data).all():
        raise NonFiniteValue("op produced non-finite values")
    return data


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents if _grad_enabled else ()
        self._backward = _backward if _grad_enabled else None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad."""
        if self._spent:
            raise GraphReused("backward already ran over this graph; re-record the forward pass")
        if seed is None:
            if self.data.ndim != 0:
                raise ShapeMismatch("backward() without a seed needs a scalar root")
            seed = np.ones((), dtype=self.data.dtype)
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                if node._spent:
                    raise GraphReused("graph node already consumed by a previous backward")
                node._spent = True
                node._backward(node.grad)
        # free the tape so buffers can be reclaimed
        for node in topo:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else add(self, -other)


def param(data, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data))


def _needs_grad(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward, needs):
    if needs:
        return Tensor(_checked(data), requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(_checked(data))


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
        out_data = a.data + b.data
        needs = _needs_grad(a, b)

        def bwd(g):
            a._accum(g)
            b._accum(g)

        return _make(out_data, (a, b), bwd, needs)
    out_data = a.data + b
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(g)

    return _make(out_data, (a,), bwd, needs)


def scale(a: Tensor, s: float) -> Tensor:
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(g * s)

    return _make(a.data * s, (a,), bwd, needs)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    needs = _needs_grad(a, b)
    out_data = a.data * b.data

    def bwd(g):
        a._accum(g * b.data)
        b._accum(g * a.data)

    return _make(out_data, (a, b), bwd, needs)


def rsub_const(c: float, a: Tensor) -> Tensor:
    """c - a"""
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(-g)

    return _make(c - a.data, (a,), bwd, needs)


def power(a: Tensor, exponent: float) -> Tensor:
    """a**exponent for constant exponent; a must stay positive for grad."""
    out_data = a.data**exponent
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), bwd, needs)


def log(a: Tensor) -> Tensor:
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), bwd, needs)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip with pass-through gradient strictly inside the bounds."""
    out_data = np.clip(a.data, lo, hi)
    needs = _needs_grad(a)
    mask = (a.data > lo) & (a.data < hi)

    def bwd(g):
        a._accum(g * mask)

    return _make(out_data, (a,), bwd, needs)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(g * (a.data > 0))

    return _make(out_data, (a,), bwd, needs)


def sigmoid(a: Tensor) -> Tensor:
    out_data = expit(a.data)
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd, needs)


def tsum(a: Tensor) -> Tensor:
    needs = _needs_grad(a)
    shape = a.shape

    def bwd(g):
        a._accum(np.broadcast_to(g, shape))

    return _make(a.data.sum(), (a,), bwd, needs)


def tmean(a: Tensor) -> Tensor:
    needs = _needs_grad(a)
    shape = a.shape
    n = a.data.size

    def bwd(g):
        a._accum(np.broadcast_to(g / n, shape))

    return _make(a.data.mean(), (a,), bwd, needs)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """Contraction over the last axis of `a`: (..., F) @ (F, G)."""
    if a.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {w.shape}")
    out_data = a.data @ w.data
    needs = _needs_grad(a, w)

    def bwd(g):
        a._accum(g @ w.data.T)
        w._accum(a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, w.shape[1]))

    return _make(out_data, (a, w), bwd, needs)


def fixed_matmul(mat: np.ndarray, a: Tensor) -> Tensor:
    """Constant matrix applied on the node axis: (N, N) @ (B, N, F)."""
    if mat.shape[1] != a.shape[-2]:
        raise ShapeMismatch(f"fixed_matmul: {mat.shape} @ {a.shape}")
    out_data = np.matmul(mat, a.data)
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(np.matmul(mat.T, g))

    return _make(out_data, (a,), bwd, needs)


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add over the last axis."""
    if a.shape[-1] != b.shape[0] or b.data.ndim != 1:
        raise ShapeMismatch(f"add_bias: {a.shape} + {b.shape}")
    out_data = a.data + b.data
    needs = _needs_grad(a, b)

    def bwd(g):
        a._accum(g)
        b._accum(g.reshape(-1, b.shape[0]).sum(axis=0))

    return _make(out_data, (a, b), bwd, needs)


def mean_nodes(a: Tensor) -> Tensor:
    """Mean over axis 1 of (B, N, F) -> (B, F)."""
    if a.data.ndim != 3:
        raise ShapeMismatch(f"mean_nodes expects (B, N, F), got {a.shape}")
    n = a.shape[1]
    out_data = a.data.mean(axis=1)
    needs = _needs_grad(a)

    def bwd(g):
        a._accum(np.repeat(g[:, None, :] / n, n, axis=1))

    return _make(out_data, (a,), bwd, needs)


def conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding 3x3 convolution on (B, H, W, Ci) with (3, 3, Ci, Co) weights.

    Implemented as nine shifted (B*H*W, Ci) @ (Ci, Co) products, which beats
    im2col on small channel counts.
    """
    bsz, h, wdt, ci = x.shape
    if w.shape[:3] != (3, 3, ci):
        raise ShapeMismatch(f"conv3x3: input {x.shape} vs weight {w.shape}")
    co = w.shape[3]
    xp = np.zeros((bsz, h + 2, wdt + 2, ci), dtype=x.data.dtype)
    xp[:, 1 : h + 1, 1 : wdt + 1, :] = x.data
    out = np.zeros((bsz, h, wdt, co), dtype=x.data.dtype)
    out2 = out.reshape(-1, co)
    tmp = np.empty_like(out2)
    wk = w.data.reshape(9, ci, co)
    for k in range(9):
        dy, dx = divmod(k, 3)
        sl = xp[:, dy : dy + h, dx : dx + wdt, :].reshape(-1, ci)
        np.matmul(sl, wk[k], out=tmp)
        out2 += tmp
    out2 += b.data
    needs = _needs_grad(x, w, b)

    def bwd(g):
        g2 = g.reshape(-1, co)
        if w.requires_grad or b.requires_grad:
            gw = np.empty((9, ci, co), dtype=g.dtype)
            for k in range(9):
                dy, dx = divmod(k, 3)
                sl = xp[:, dy : dy + h, dx : dx + wdt, :].reshape(-1, ci)
                np.matmul(sl.T, g2, out=gw[k])
            w._accum(gw.reshape(3, 3, ci, co))
            b._accum(g2.sum(axis=0))
        if x.requires_grad or x._parents:
            gxp = np.zeros_like(xp)
            for k in range(9):
                dy, dx = divmod(k, 3)
                gxp[:, dy : dy + h, dx : dx + wdt, :] += (g2 @ wk[k].T).reshape(bsz, h, wdt, ci)
            x._accum(gxp[:, 1 : h + 1, 1 : wdt + 1, :])

    return _make(out, (x, w, b), bwd, needs)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Pointwise convolution: (..., Ci) @ (Ci, Co) + b."""
    return add_bias(matmul(x, w), b)


def avg_pool2x2(x: Tensor) -> Tensor:
    bsz, h, wdt, c = x.shape
    if h % 2 or wdt % 2:
        raise ShapeMismatch(f"avg_pool2x2 needs even spatial dims, got {x.shape}")
    out_data = x.data.reshape(bsz, h // 2, 2, wdt // 2, 2, c).mean(axis=(2, 4))
    needs = _needs_grad(x)

    def bwd(g):
        gx = np.empty((bsz, h, wdt, c), dtype=g.dtype)
        gx.reshape(bsz, h // 2, 2, wdt // 2, 2, c)[:] = g[:, :, None, :, None, :] * 0.25
        x._accum(gx)

    return _make(out_data, (x,), bwd, needs)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling."""
    bsz, h, wdt, c = x.shape
    out_data = np.empty((bsz, 2 * h, 2 * wdt, c), dtype=x.data.dtype)
    out_data.reshape(bsz, h, 2, wdt, 2, c)[:] = x.data[:, :, None, :, None, :]
    needs = _needs_grad(x)

    def bwd(g):
        x._accum(g.reshape(bsz, h, 2, wdt, 2, c).sum(axis=(2, 4)))

    return _make(out_data, (x,), bwd, needs)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat: {a.shape} vs {b.shape}")
    ca = a.shape[-1]
    out_data = np.concatenate([a.data, b.data], axis=-1)
    needs = _needs_grad(a, b)

    def bwd(g):
        a._accum(g[..., :ca])
        b._accum(g[..., ca:])

    return _make(out_data, (a, b), bwd, needs)


def gather_pixels(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick one (row, col) value per batch element from (B, H, W, 1)."""
    bsz = x.shape[0]
    if x.data.ndim != 4 or x.shape[3] != 1 or len(rows) != bsz or len(cols) != bsz:
        raise ShapeMismatch(f"gather_pixels: map {x.shape}, {len(rows)} indices")
    idx = np.arange(bsz)
    out_data = x.data[idx, rows, cols, 0]
    needs = _needs_grad(x)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (idx, rows, cols, 0), g)
        x._accum(gx)

    return _make(out_data, (x,), bwd, needs)


def stamp_outer(emb: Tensor, stamps: np.ndarray) -> Tensor:
    """Spread per-player embeddings over constant spatial supports.

    emb: (B, P, D), stamps: (B, P, H, W) -> (B, H, W, P*D) where channel
    p*D + d holds emb[b, p, d] * stamps[b, p].
    """
    bsz, p, d = emb.shape
    if stamps.shape[:2] != (bsz, p):
        raise ShapeMismatch(f"stamp_outer: emb {emb.shape} vs stamps {stamps.shape}")
    h, wdt = stamps.shape[2:]
    out_data = np.einsum("bpd,bphw->bhwpd", emb.data, stamps, optimize=True)
    out_data = out_data.reshape(bsz, h, wdt, p * d)
    needs = _needs_grad(emb)

    def bwd(g):
        g5 = g.reshape(bsz, h, wdt, p, d)
        emb._accum(np.einsum("bhwpd,bphw->bpd", g5, stamps, optimize=True))

    return _make(out_data, (emb,), bwd, needs)


def continuity_sums(x: Tensor) -> Tensor:
    """Per-sample L1 spatial continuity: sum over anchor cells (all but the
    last row and column) of |right-neighbor diff| + |down-neighbor diff|.

    x: (B, H, W, 1) -> (B,)
    """
    if x.data.ndim != 4 or x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeMismatch(f"continuity needs (B, H>=2, W>=2, 1), got {x.shape}")
    m = x.data[..., 0]
    dcol = m[:, :-1, 1:] - m[:, :-1, :-1]
    drow = m[:, 1:, :-1] - m[:, :-1, :-1]
    out_data = np.abs(dcol).sum(axis=(1, 2)) + np.abs(drow).sum(axis=(1, 2))
    needs = _needs_grad(x)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gm = gx[..., 0]
        sc = np.sign(dcol) * g[:, None, None]
        sr = np.sign(drow) * g[:, None, None]
        gm[:, :-1, 1:] += sc
        gm[:, :-1, :-1] -= sc
        gm[:, 1:, :-1] += sr
        gm[:, :-1, :-1] -= sr
        x._accum(gx)

    return _make(out_data, (x,), bwd, needs)
