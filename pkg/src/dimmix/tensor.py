"""Minimal dense tensor with reverse-mode automatic differentiation.

Storage is a contiguous row-major numpy array. Every op materializes its
result (transposes included), so permutation kernels stay bit-exact.

Two precisions are used: ``WIDE`` (float64) for gradient checks and
oracles, ``NARROW`` (float32) for training.
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

WIDE = np.float64
NARROW = np.float32

_default_dtype = WIDE
_grad_enabled = True
_mac_counter: "MacCounter | None" = None
_mac_scope: list[str] = ["other"]


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors and parameters."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul, keyed by scope."""

    def __init__(self):
        self.by_scope: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.by_scope.values())

    def __getitem__(self, scope: str) -> int:
        return self.by_scope.get(scope, 0)


@contextlib.contextmanager
def count_macs():
    global _mac_counter
    prev = _mac_counter
    _mac_counter = MacCounter()
    try:
        yield _mac_counter
    finally:
        _mac_counter = prev


@contextlib.contextmanager
def mac_scope(name: str):
    _mac_scope.append(name)
    try:
        yield
    finally:
        _mac_scope.pop()


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; every experiment derives from one seed."""
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(bg) for bg in rng.bit_generator.spawn(n)]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(_default_dtype)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self._freed = False

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # ---- operators --------------------------------------------------------
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

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul_any(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, a: int, b: int):
        return transpose_axes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._freed = False
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, (int, float)):
        c = b
        return _node(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad / bd, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
        "div",
    )


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _node(a.data * m, (a,), lambda g: (g * m,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(y, (a,), bw, "gelu")


# ---- reductions ---------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    y = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(y, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ---- shape manipulation -----------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} ({a.size} elements) to {shape}") from None
    return _node(y, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose_axes(a: Tensor, axis_a: int, axis_b: int) -> Tensor:
    nd = a.ndim
    for ax in (axis_a, axis_b):
        if not -nd <= ax < nd:
            raise DimensionError(f"axis {ax} out of range for shape {a.shape}")
    y = np.ascontiguousarray(np.swapaxes(a.data, axis_a, axis_b))
    return _node(
        y, (a,), lambda g: (np.ascontiguousarray(np.swapaxes(g, axis_a, axis_b)),), "transpose"
    )


def permute_axes(a: Tensor, axes: Sequence[int]) -> Tensor:
    nd = a.ndim
    axes = tuple(ax % nd for ax in axes)
    if sorted(axes) != list(range(nd)):
        raise DimensionError(f"axes {axes} are not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(a.data.transpose(axes))
    return _node(y, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dt = a.shape, a.dtype
    y = np.ascontiguousarray(a.data[idx])

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _node(y, (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    y = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---- linear algebra ---------------------------------------------------------


def _count(macs: int):
    if _mac_counter is not None:
        _mac_counter.by_scope[_mac_scope[-1]] += int(macs)


def matmul_any(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics (broadcast leading axes) with gradients."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    y = np.matmul(ad, bd)
    _count(y.size * ad.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _node(y, (a, b), bw, "matmul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k] @ [k,n] -> [m,n]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return matmul_any(a, b)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """[B,m,k] @ [B,k,n] -> [B,m,n], one independent product per leading index."""
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"batched_matmul needs rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"batch extents differ: {a.shape} vs {b.shape}")
    if a.shape[2] != b.shape[1]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return matmul_any(a, b)


# ---- neural-network primitives ------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` is a boolean array broadcastable to ``a``; False entries get a
    -inf bias. Rows with every entry masked produce zeros instead of NaN.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    y = e / np.where(s > 0, s, 1.0)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y.astype(a.dtype, copy=False), (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)
    return _node(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [B, C]."""
    x = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise DimensionError(f"cross_entropy expects [B,C] logits and [B] labels, got {x.shape}, {labels.shape}")
    n = x.shape[0]
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    logp = x - m - np.log(s)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _node(np.asarray(loss, dtype=x.dtype), (logits,), bw, "cross_entropy")


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize along one axis, then apply per-feature gain and bias."""
    xd = x.data
    ax = axis % xd.ndim
    n = xd.shape[ax]
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm gain/bias must be ({n},), got {gain.shape}, {bias.shape}")
    bshape = [1] * xd.ndim
    bshape[ax] = n
    gd = gain.data.reshape(bshape)
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd + bias.data.reshape(bshape)
    other = tuple(i for i in range(xd.ndim) if i != ax)

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=ax, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=ax, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return _node(y, (x, gain, bias), bw, "layer_norm")


# ---- autodiff engine --------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        if node._freed:
            raise RuntimeError(
                "graph was already consumed by a previous backward(); double backward is unsupported"
            )
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    The graph is freed afterwards; a second call on the same graph raises.
    """
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise RuntimeError("graph was already consumed by a previous backward(); double backward is unsupported")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg
        node._parents = ()
        node._backward = None
        node._freed = True


def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``x`` is a tensor or a list of tensors (e.g. an input plus parameters);
    ``f`` is called with no arguments when ``x`` is a list, otherwise with ``x``.
    Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    single = isinstance(x, Tensor)
    leaves = [x] if single else list(x)
    call = (lambda: f(x)) if single else f
    for t in leaves:
        if t.dtype != WIDE:
            raise TypeError("grad_check requires wide-precision tensors")
        t.requires_grad = True
        t.grad = None
    loss = call()
    backward(loss)
    worst = 0.0
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        an = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = call().item()
                flat[i] = orig - h
                fm = call().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(an[i] - num) / max(1.0, abs(num))
                worst = max(worst, err)
    return worst


# ---- modules ----------------------------------------------------------------


class Module:
    """Parameter container; subclasses hold Tensors, Modules, or lists of them."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterable[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(dtype or _default_dtype)
    return parameter(data)


def zeros_param(shape, dtype=None) -> Tensor:
    return parameter(np.zeros(shape, dtype=dtype or _default_dtype))


def ones_param(shape, dtype=None) -> Tensor:
    return parameter(np.ones(shape, dtype=dtype or _default_dtype))


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_init(rng, (out_dim,), in_dim) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul_any(x, self.weight)
        return y if self.bias is None else y + self.bias

    def num_params(self) -> int:
        i, o = self.weight.shape
        return i * o + (o if self.bias is not None else 0)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ones_param((dim,))
        self.bias = zeros_param((dim,))

    def forward(self, x: Tensor, axis: int = -1) -> Tensor:
        return layer_norm(x, self.gain, self.bias, axis)


class MLP(Module):
    """Dense MLP; activation between layers, never after the last."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator):
        self.dims = list(dims)
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = gelu(x)
            x = layer(x)
        return x

    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.dims[:-1], self.dims[1:]))

    def macs(self, batch: int = 1) -> int:
        return batch * sum(a * b for a, b in zip(self.dims[:-1], self.dims[1:]))
