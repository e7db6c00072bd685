"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough machinery for a small convolutional dual-head network: the op
set is matmul, conv2d, maxpool2d, global_avg_pool, relu, add, scale,
bias_add, flatten, plus scalar reductions (tsum, sum_squares). Tensors
form an implicit DAG through parent links; ``backward`` walks it in
reverse topological order and accumulates gradients additively, so using
a tensor twice yields the sum of both path gradients.

Conventions fixed for determinism:
  * everything is float64, row-major;
  * relu's subgradient at exactly 0 is 0;
  * maxpool ties go to the first (lowest flat index) element;
  * broadcasting is limited to bias_add over the channel/feature axis.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonScalarRoot, ShapeMismatch


class Tensor:
    """A dense float64 array plus a lazily allocated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def backward(root: Tensor) -> None:
    """Populate grads of everything ``root`` depends on.

    ``root`` must be scalar-shaped. Nodes are visited in reverse
    topological order, so every gradient is complete before it is
    consumed by the parents' backward rules.
    """
    if root.size != 1:
        raise NonScalarRoot(f"backward root has {root.size} elements")
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = np.where(mask, x.data, 0.0)

    def bwd(g):
        _accumulate(x, g * mask)

    return _result(out, (x,), bwd)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeMismatch(x.shape, y.shape, "add")

    def bwd(g):
        _accumulate(x, g)
        _accumulate(y, g)

    return _result(x.data + y.data, (x, y), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _accumulate(x, g * c)

    return _result(x.data * c, (x,), bwd)


def flatten(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeMismatch("ndim >= 2", x.shape, "flatten")
    b = x.shape[0]
    orig = x.shape

    def bwd(g):
        _accumulate(x, g.reshape(orig))

    return _result(x.data.reshape(b, -1), (x,), bwd)


def tsum(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _result(np.float64(x.data.sum()), (x,), bwd)


def sum_squares(x: Tensor) -> Tensor:
    def bwd(g):
        _accumulate(x, 2.0 * float(g) * x.data)

    return _result(np.float64((x.data * x.data).sum()), (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(x: Tensor, w: Tensor) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"({x.shape[0]}, K) @ (K, n)", (x.shape, w.shape), "matmul")

    def bwd(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)

    return _result(x.data @ w.data, (x, w), bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias over the feature axis (2-D x) or channel axis (4-D x)."""
    if b.ndim != 1:
        raise ShapeMismatch("1-D bias", b.shape, "bias_add")
    if x.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeMismatch(x.shape[1], b.shape[0], "bias_add")
        out = x.data + b.data

        def bwd(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=0))

    elif x.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeMismatch(x.shape[1], b.shape[0], "bias_add")
        out = x.data + b.data[None, :, None, None]

        def bwd(g):
            _accumulate(x, g)
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    else:
        raise ShapeMismatch("2-D or 4-D input", x.shape, "bias_add")
    return _result(out, (x, b), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a B,C,H,W batch with O,C,kh,kw filters."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch("4-D input and weight", (x.shape, w.shape), "conv2d")
    bsz, cin, h, wd = x.shape
    cout, cw, kh, kw = w.shape
    if cw != cin:
        raise ShapeMismatch(cin, cw, "conv2d channels")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeMismatch(f"image >= kernel {kh}x{kw}", (hp, wp), "conv2d")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, Ho, Wo, C*kh*kw) im2col matrix, cached for the backward pass
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        bsz * ho * wo, cin * kh * kw
    )
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, cout)
        _accumulate(w, (gmat.T @ cols).reshape(w.shape))
        if x.requires_grad or x._parents:
            gcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((bsz, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                        :, :, :, :, i, j
                    ]
            if padding:
                gxp = gxp[:, :, padding : hp - padding, padding : wp - padding]
            _accumulate(x, gxp)

    return _result(np.ascontiguousarray(out), (x, w), bwd)


def maxpool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k max pooling; requires exact tiling."""
    if x.ndim != 4:
        raise ShapeMismatch("4-D input", x.shape, "maxpool2d")
    bsz, c, h, wd = x.shape
    if h % k or wd % k:
        raise ShapeMismatch(f"H, W divisible by {k}", (h, wd), "maxpool2d")
    ho, wo = h // k, wd // k
    win = x.data.reshape(bsz, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(
        bsz, c, ho, wo, k * k
    )
    idx = win.argmax(axis=-1)  # argmax takes the first max: deterministic ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(bsz, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            bsz, c, h, wd
        )
        _accumulate(x, gx)

    return _result(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean over H, W: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ShapeMismatch("4-D input", x.shape, "global_avg_pool")
    _, _, h, wd = x.shape
    area = h * wd

    def bwd(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / area, x.shape).copy())

    return _result(x.data.mean(axis=(2, 3)), (x,), bwd)
