"""Reverse-mode autodiff on float64 numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional backward closure.
``backward()`` walks the graph once in reverse topological order and
accumulates gradients into every reachable tensor that requires them.
Tensor-tensor arithmetic requires matching shapes; scalars broadcast.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as K
from .errors import ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

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
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no graph history."""
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        flow = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node._bwd is None:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in node._bwd(g):
                pid = id(parent)
                prev = flow.get(pid)
                flow[pid] = pg if prev is None else prev + pg

    # -- operator sugar ----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose2d_last(self):
        return transpose2d_last(self)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_graph(*tensors) -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _node(data, parents, bwd) -> Tensor:
    out = Tensor(data)
    if _needs_graph(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = bwd
    return out


# -- elementwise and reduction ops ------------------------------------------


def add(a, b):
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TypeError("add needs at least one Tensor operand")
    if not isinstance(b, Tensor):  # tensor + scalar
        a = _as_tensor(a)
        s = float(b)

        def bwd(g):
            return [(a, g)]

        return _node(a.data + s, (a,), bwd)
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return [(a, g), (b, g)]

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return add(a, -float(b))
    if not isinstance(a, Tensor):
        s = float(a)
        b = _as_tensor(b)

        def bwd(g):
            return [(b, -g)]

        return _node(s - b.data, (b,), bwd)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        return [(a, g), (b, -g)]

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b):
    if not isinstance(b, Tensor):  # tensor * scalar
        a = _as_tensor(a)
        s = float(b)

        def bwd(g):
            return [(a, g * s)]

        return _node(a.data * s, (a,), bwd)
    if not isinstance(a, Tensor):
        return mul(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g * b.data))
        if b.requires_grad:
            out.append((b, g * a.data))
        return out

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b):
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if a.shape != b.shape:
        raise ShapeError(f"div: shape mismatch {a.shape} vs {b.shape}")
    inv = 1.0 / b.data

    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, g * inv))
        if b.requires_grad:
            out.append((b, -g * a.data * inv * inv))
        return out

    return _node(a.data * inv, (a, b), bwd)


def square(x):
    x = _as_tensor(x)

    def bwd(g):
        return [(x, 2.0 * x.data * g)]

    return _node(x.data * x.data, (x,), bwd)


def sqrt(x):
    x = _as_tensor(x)
    root = np.sqrt(x.data)

    def bwd(g):
        return [(x, g * (0.5 / root))]

    return _node(root, (x,), bwd)


def relu(x):
    x = _as_tensor(x)

    def bwd(g):
        return [(x, g * (x.data > 0.0))]

    return _node(np.maximum(x.data, 0.0), (x,), bwd)


def sigmoid(x):
    x = _as_tensor(x)
    # overflow-free: compute via exp(-|x|) and mirror for negatives
    e = np.exp(-np.abs(x.data))
    pos = 1.0 / (1.0 + e)
    s = np.where(x.data >= 0.0, pos, 1.0 - pos)

    def bwd(g):
        return [(x, g * s * (1.0 - s))]

    return _node(s, (x,), bwd)


def tsum(x):
    x = _as_tensor(x)

    def bwd(g):
        return [(x, np.broadcast_to(g, x.shape).copy())]

    return _node(x.data.sum(), (x,), bwd)


def mean(x):
    x = _as_tensor(x)
    n = x.data.size

    def bwd(g):
        return [(x, np.broadcast_to(g / n, x.shape).copy())]

    return _node(x.data.mean(), (x,), bwd)


def channel_sum(x):
    """Sum a (B, C, H, W) tensor over its channel axis, keeping the axis."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_sum expects a 4-d tensor, got shape {x.shape}")

    def bwd(g):
        return [(x, np.broadcast_to(g, x.shape).copy())]

    return _node(x.data.sum(axis=1, keepdims=True), (x,), bwd)


def reshape(x, *shape):
    x = _as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    n = 1
    for s in shape:
        n *= s
    if n != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape

    def bwd(g):
        return [(x, g.reshape(old))]

    return _node(x.data.reshape(shape), (x,), bwd)


def transpose2d_last(x):
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose2d_last needs ndim >= 2, got shape {x.shape}")

    def bwd(g):
        return [(x, np.ascontiguousarray(g.swapaxes(-1, -2)))]

    return _node(x.data.swapaxes(-1, -2), (x,), bwd)


# -- structured ops ----------------------------------------------------------


def bmm(a, b):
    """Batched matrix multiply: (B, M, K) x (B, K, N) -> (B, M, N)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"bmm expects 3-d tensors, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        out = []
        if a.requires_grad:
            out.append((a, np.matmul(g, b.data.swapaxes(-1, -2))))
        if b.requires_grad:
            out.append((b, np.matmul(a.data.swapaxes(-1, -2), g)))
        return out

    return _node(np.matmul(a.data, b.data), (a, b), bwd)


def conv2d(x, w, b, dilation: int = 1, padding: int | None = None):
    """2-d convolution (cross-correlation) with square odd kernels.

    ``padding=None`` picks the same-size padding ``dilation * (k - 1) // 2``.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    Bn, Ci, H, W = x.shape
    Co, Ciw, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square and odd, got {kh}x{kw}")
    if Ci != Ciw:
        raise ShapeError(f"conv2d: input has {Ci} channels, weight expects {Ciw}")
    if b.shape != (Co,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({Co},)")
    if dilation < 1:
        raise ShapeError(f"conv2d: dilation must be >= 1, got {dilation}")
    if padding is None:
        padding = dilation * (kh - 1) // 2
    Ho = H + 2 * padding - dilation * (kh - 1)
    Wo = W + 2 * padding - dilation * (kw - 1)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel does not fit input of shape {x.shape}")
    out = K.conv2d_forward(x.data, w.data, b.data, dilation, padding)

    def bwd(g):
        g = np.ascontiguousarray(g)
        outs = []
        if x.requires_grad:
            outs.append((x, K.conv2d_backward_input(g, w.data, dilation, padding, H, W)))
        if w.requires_grad or b.requires_grad:
            gw, gb = K.conv2d_backward_weight(g, x.data, kh, kw, dilation, padding)
            if w.requires_grad:
                outs.append((w, gw))
            if b.requires_grad:
                outs.append((b, gb))
        return outs

    return _node(out, (x, w, b), bwd)


def maxpool2d(x, k: int = 2, stride: int = 2):
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-d tensor, got shape {x.shape}")
    if k != stride:
        raise ShapeError("maxpool2d supports only k == stride windows")
    _, _, H, W = x.shape
    if H % stride or W % stride:
        raise ShapeError(f"maxpool2d: spatial dims {H}x{W} not divisible by stride {stride}")
    out, idx = K.maxpool2d_forward(x.data, k, stride)

    def bwd(g):
        return [(x, K.maxpool2d_backward(np.ascontiguousarray(g), idx, k, stride, H, W))]

    return _node(out, (x,), bwd)


def adaptive_avg_pool(x, out_h: int, out_w: int):
    """Average pool to a fixed output grid; bins cover the input exactly."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool expects a 4-d tensor, got shape {x.shape}")
    _, _, H, W = x.shape
    if not (1 <= out_h <= H and 1 <= out_w <= W):
        raise ShapeError(f"adaptive_avg_pool: output {out_h}x{out_w} invalid for input {H}x{W}")
    out = K.adaptive_avg_pool_forward(x.data, out_h, out_w)

    def bwd(g):
        return [(x, K.adaptive_avg_pool_backward(np.ascontiguousarray(g), H, W))]

    return _node(out, (x,), bwd)


def window_mean(x, k: int):
    """Mean over every k x k window (stride 1, no padding)."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"window_mean expects a 4-d tensor, got shape {x.shape}")
    _, _, H, W = x.shape
    if not (1 <= k <= min(H, W)):
        raise ShapeError(f"window_mean: window {k} does not fit input {H}x{W}")
    Ho, Wo = H - k + 1, W - k + 1
    acc = np.zeros(x.shape[:2] + (Ho, Wo))
    for a in range(k):
        for c in range(k):
            acc += x.data[:, :, a : a + Ho, c : c + Wo]
    acc /= k * k

    def bwd(g):
        gin = np.zeros(x.shape)
        for a in range(k):
            for c in range(k):
                gin[:, :, a : a + Ho, c : c + Wo] += g
        gin /= k * k
        return [(x, gin)]

    return _node(acc, (x,), bwd)


# -- gradient verification ---------------------------------------------------


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Relative error is
    ``|a - n| / max(1, |a|, |n|)`` per element.
    """
    base = np.array(_as_tensor(x).data, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    out = f(xt)
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    worst = 0.0
    flat = base.ravel()
    aflat = analytic.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            fp = f(Tensor(base)).item()
        flat[i] = orig - eps
        with no_grad():
            fm = f(Tensor(base)).item()
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        a = aflat[i]
        err = abs(a - num) / max(1.0, abs(a), abs(num))
        if err > worst:
            worst = err
    return worst


def check_param_grads(loss_fn, params, eps: float = 1e-5) -> float:
    """grad_check for in-place model parameters.

    ``loss_fn`` runs a fresh forward pass and returns a scalar Tensor;
    each parameter element is perturbed in place for the numeric side.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        aflat = analytic.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = aflat[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            if err > worst:
                worst = err
    return worst
