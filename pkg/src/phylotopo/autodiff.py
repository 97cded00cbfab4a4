"""Minimal reverse-mode autodiff on numpy arrays, plus parameter storage/Adam.

Define-by-run: every op records its parents and a backward closure on the
produced Tensor; ``backward`` replays the tape in reverse topological order.
Matrix products go through BLAS; gather/scatter aggregation goes through the
kernels module so the numba/numpy backend switch applies here too.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

from . import kernels

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_grad_owned")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _node(data, parents, backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    t = Tensor(data, requires_grad=requires)
    if _grad_enabled and requires:
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _accum(t: Tensor, g):
    """Copy-on-write gradient accumulation.

    The first contribution is aliased rather than copied (incoming arrays are
    never mutated once handed over); a second contribution allocates.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float64)
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def backward(root: Tensor, seed: np.ndarray | None = None):
    """Reverse accumulation from ``root`` into every reachable .grad slot."""
    if seed is None:
        seed = np.ones_like(root.data)
    _accum(root, np.asarray(seed, dtype=np.float64))

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        # free intermediate graph state as we go
        if node is not root:
            node._parents = ()
            node._backward = None


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), back)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, g * s)

    return _node(a.data * s, (a,), back)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back)


# -- shape ops ----------------------------------------------------------------

def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), back)


def split_cols(t: Tensor, sizes) -> list[Tensor]:
    t = _as_tensor(t)
    offsets = np.cumsum([0] + list(sizes))
    out = []
    for i in range(len(sizes)):
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def back(g, lo=lo, hi=hi):
            # column-slice accumulation straight into the parent's grad
            if not t.requires_grad:
                return
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
                t._grad_owned = True
            elif not t._grad_owned:
                t.grad = t.grad.copy()
                t._grad_owned = True
            t.grad[:, lo:hi] += g

        out.append(_node(t.data[:, lo:hi].copy(), (t,), back))
    return out


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    idx2 = np.ascontiguousarray(idx[:, None])

    def back(g):
        gx = np.zeros_like(x.data)
        kernels.gather_sum_backward(np.ascontiguousarray(g), idx2, gx)
        _accum(x, gx)

    return _node(x.data[idx], (x,), back)


def gather_sum(x: Tensor, nbr_idx: np.ndarray) -> Tensor:
    """out[i] = sum over j of x[nbr_idx[i, j]], skipping -1 padding."""
    x = _as_tensor(x)
    nbr_idx = np.ascontiguousarray(nbr_idx, dtype=np.int64)
    out = np.zeros((nbr_idx.shape[0], x.data.shape[1]))
    kernels.gather_sum(np.ascontiguousarray(x.data), nbr_idx, out)

    def back(g):
        gx = np.zeros_like(x.data)
        kernels.gather_sum_backward(np.ascontiguousarray(g), nbr_idx, gx)
        _accum(x, gx)

    return _node(out, (x,), back)


def scatter_sum(x: Tensor, dst: np.ndarray, n_out: int) -> Tensor:
    """out[dst[i]] += x[i]."""
    x = _as_tensor(x)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    out = np.zeros((n_out, x.data.shape[1]))
    kernels.scatter_sum(np.ascontiguousarray(x.data), dst, out)

    def back(g):
        _accum(x, g[dst])

    return _node(out, (x,), back)


def sum_blocks(x: Tensor, block: int) -> Tensor:
    """Sum rows in contiguous blocks of fixed size (graph readout)."""
    x = _as_tensor(x)
    n, d = x.data.shape
    out = x.data.reshape(n // block, block, d).sum(axis=1)

    def back(g):
        _accum(x, np.repeat(g, block, axis=0))

    return _node(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def back(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _node(np.sum(x.data), (x,), back)


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def back(g):
        _accum(x, np.full_like(x.data, float(g) / n))

    return _node(np.mean(x.data), (x,), back)


def gru_cell(mi: Tensor, mh: Tensor, bi: Tensor, bh: Tensor,
             h: Tensor) -> Tensor:
    """Fused GRU update: gates = sigmoid/tanh blocks of (mi+bi, mh+bh).

    ``mi``/``mh`` are the (n, 3d) input and state projections before bias;
    ``h`` is the (n, d) previous state.  Forward and backward each run as one
    fused kernel pass.
    """
    mi, mh, bi, bh, h = map(_as_tensor, (mi, mh, bi, bh, h))
    n, d = h.data.shape
    r = np.empty((n, d))
    z = np.empty((n, d))
    c = np.empty((n, d))
    out = np.empty((n, d))
    kernels.gru_forward(mi.data, mh.data, bi.data, bh.data, h.data,
                        r, z, c, out)

    def back(g):
        dmi = np.empty((n, 3 * d))
        dmh = np.empty((n, 3 * d))
        dbi = np.zeros(3 * d)
        dbh = np.zeros(3 * d)
        dh = np.empty((n, d))
        kernels.gru_backward(np.ascontiguousarray(g), mh.data, bh.data,
                             h.data, r, z, c, dmi, dmh, dbi, dbh, dh)
        _accum(mi, dmi)
        _accum(mh, dmh)
        _accum(bi, dbi)
        _accum(bh, dbh)
        _accum(h, dh)

    return _node(out, (mi, mh, bi, bh, h), back)


# -- elementwise nonlinearities ------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def back(g):
        _accum(x, g * y * (1.0 - y))

    return _node(y, (x,), back)


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def back(g):
        _accum(x, g * (1.0 - y * y))

    return _node(y, (x,), back)


def elu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    neg = x.data < 0
    y = np.where(neg, np.expm1(np.minimum(x.data, 0.0)), x.data)

    def back(g):
        _accum(x, g * np.where(neg, y + 1.0, 1.0))

    return _node(y, (x,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    x = _as_tensor(x)
    y = np.logaddexp(0.0, x.data)

    def back(g):
        _accum(x, g / (1.0 + np.exp(-x.data)))

    return _node(y, (x,), back)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)

    def back(g):
        _accum(x, g * y)

    return _node(y, (x,), back)


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def back(g):
        _accum(x, g / x.data)

    return _node(np.log(x.data), (x,), back)


def square(x: Tensor) -> Tensor:
    x = _as_tensor(x)

    def back(g):
        _accum(x, g * 2.0 * x.data)

    return _node(x.data * x.data, (x,), back)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data >= b.data

    def back(g):
        _accum(a, g * take_a)
        _accum(b, g * ~take_a)

    return _node(np.where(take_a, a.data, b.data), (a, b), back)


# -- parameters and Adam --------------------------------------------------------

def glorot(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot init scaled by fan-in/fan-out."""
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in, fan_out = shape[1], shape[0]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ParameterStore:
    """Named trainable tensors with gradient slots and Adam moment slots."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad_or_zero(self, name: str) -> np.ndarray:
        t = self.params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8):
        """Bias-corrected Adam update over every parameter; clears gradients.

        Parameters untouched in the forward pass (grad None) are treated as
        zero-gradient and stay put aside from moment decay.
        """
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self._m[name]
            v = self._v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * np.square(g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.grad = None

    # -- persistence: flat float64 binary + JSON manifest ---------------------

    def save(self, path_prefix: str):
        manifest = []
        offset = 0
        with open(path_prefix + ".bin", "wb") as fh:
            for name, p in self.params.items():
                raw = np.ascontiguousarray(p.data).tobytes()
                fh.write(raw)
                manifest.append({
                    "name": name,
                    "shape": list(p.data.shape),
                    "offset": offset,
                })
                offset += len(raw)
        with open(path_prefix + ".json", "w") as fh:
            json.dump({"dtype": "<f8", "tensors": manifest,
                       "step_count": self.step_count}, fh)

    def load(self, path_prefix: str):
        with open(path_prefix + ".json") as fh:
            manifest = json.load(fh)
        with open(path_prefix + ".bin", "rb") as fh:
            blob = fh.read()
        for entry in manifest["tensors"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(
                blob, dtype=np.float64, count=count,
                offset=entry["offset"],
            ).reshape(shape)
            if name not in self.params:
                self.param(name, arr.copy())
            else:
                if self.params[name].data.shape != shape:
                    raise ValueError(f"shape mismatch loading {name!r}")
                self.params[name].data = arr.copy()
        self.step_count = manifest.get("step_count", 0)


def finite_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, one entry at a time."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g
