"""Minimal reverse-mode automatic differentiation, MLPs and Adam.

Tensors wrap rank <= 2 float64 arrays. Every operation records its parents
and a closure that pushes the output gradient back to them; ``backward``
walks the graph in reverse topological order.

ReLU uses the subgradient 0 at exactly 0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=float)
        if arr.ndim > 2:
            raise ValueError(f"tensors are limited to rank 2, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # -- graph plumbing -------------------------------------------------------

    def _make(self, data, parents, backward) -> "Tensor":
        if not math.isfinite(float(np.sum(data))):
            raise FloatingPointError("non-finite value produced by tensor operation")
        track = any(p.requires_grad for p in parents)
        return Tensor(data, track, parents if track else (), backward if track else None)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=float, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.data.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {self.data.shape}")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self.data.shape, other.data.shape
        return self._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self.data.shape, other.data.shape
        return self._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        x, y = self.data, other.data
        return self._make(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __truediv__(self, other):
        other = _as_tensor(other)
        x, y = self.data, other.data
        return self._make(
            x / y,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
        )

    def __matmul__(self, other):
        other = _as_tensor(other)
        x, y = self.data, other.data
        return self._make(x @ y, (self, other), lambda g: (g @ y.T, x.T @ g))

    def __getitem__(self, idx):
        shape = self.data.shape

        def back(g):
            full = np.zeros(shape)
            full[idx] = g
            return (full,)

        return self._make(self.data[idx], (self,), back)

    # -- elementwise ------------------------------------------------------------

    def tanh(self):
        out = np.tanh(self.data)
        return self._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        mask = self.data > 0.0
        return self._make(self.data * mask, (self,), lambda g: (g * mask,))

    def exp(self):
        out = np.exp(self.data)
        return self._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return self._make(np.log(x), (self,), lambda g: (g / x,))

    def square(self):
        x = self.data
        return self._make(x * x, (self,), lambda g: (2.0 * g * x,))

    def softplus(self):
        x = self.data
        return self._make(np.logaddexp(0.0, x), (self,), lambda g: (g / (1.0 + np.exp(-x)),))

    def clip(self, lo: float, hi: float):
        x = self.data
        mask = (x >= lo) & (x <= hi)
        return self._make(np.clip(x, lo, hi), (self,), lambda g: (g * mask,))

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.data.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return tensors[0]._make(data, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    return a._make(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (g * pick_a, g * ~pick_a),
    )


def mse_loss(pred, target) -> Tensor:
    """Mean squared error ``mean((pred - target)^2)``; d/dpred = 2 (pred - target) / N."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=float).reshape(pred.shape)
    if pred.data.size == 0:
        raise ValueError("mse_loss needs at least one sample")
    return (pred - target).square().mean()


# ---------------------------------------------------------------------------
# multilayer perceptron

ACTIVATIONS = ("linear", "relu", "tanh")
_NUMPY_ACT = {
    "linear": lambda z: z,
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
}


@numba.njit(cache=True)
def _dense_rows(h, w, b, act):
    """``act(h @ w + b)`` with a fixed per-row summation order."""
    n, m = h.shape
    k = w.shape[1]
    out = np.empty((n, k))
    for r in range(n):
        for j in range(k):
            acc = b[j]
            for i in range(m):
                acc += h[r, i] * w[i, j]
            if act == 1:
                acc = acc if acc > 0.0 else 0.0
            elif act == 2:
                acc = math.tanh(acc)
            out[r, j] = acc
    return out


class Mlp:
    """Dense feed-forward network with per-layer activations.

    Weights are stored ``(fan_in, fan_out)`` so that ``x @ W + b`` maps a
    batch of row vectors. Initialization is uniform: Kaiming fan-in bound
    ``sqrt(6 / fan_in)`` for ReLU layers, Xavier bound
    ``sqrt(6 / (fan_in + fan_out))`` for tanh and linear layers.
    """

    def __init__(self, sizes, activations, seed=None, rng: np.random.Generator | None = None):
        sizes = [int(s) for s in sizes]
        activations = list(activations)
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.sizes = sizes
        self.activations = activations
        self.init_scheme = "kaiming-uniform(relu)/xavier-uniform(tanh,linear)"
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.params: list[Tensor] = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                bound = math.sqrt(6.0 / fan_in)
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params.append(Tensor(w, requires_grad=True))
            self.params.append(Tensor(np.zeros(fan_out), requires_grad=True))

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        return self.params[2 * i], self.params[2 * i + 1]

    def forward(self, x) -> Tensor:
        """Taped forward pass; ``x`` is a batch ``(n, in)`` (a 1-D input is treated as one row)."""
        x = _as_tensor(x)
        if x.data.ndim == 1:
            x = x[None, :] if x.requires_grad else Tensor(x.data[None, :])
        if x.data.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.data.shape[1]} != network input {self.sizes[0]}")
        h = x
        for i, act in enumerate(self.activations):
            w, b = self.layer(i)
            h = h @ w + b
            if act == "relu":
                h = h.relu()
            elif act == "tanh":
                h = h.tanh()
        return h

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Untaped forward pass on plain arrays."""
        h = np.asarray(x, dtype=float)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != network input {self.sizes[0]}")
        for i, act in enumerate(self.activations):
            h = _NUMPY_ACT[act](h @ self.params[2 * i].data + self.params[2 * i + 1].data)
        return h[0] if squeeze else h

    def predict_rowwise(self, x) -> np.ndarray:
        """Like :meth:`predict`, but each row's result is independent of the batch it sits in."""
        h = np.ascontiguousarray(x, dtype=float)
        squeeze = h.ndim == 1
        if squeeze:
            h = h[None, :]
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {h.shape[1]} != network input {self.sizes[0]}")
        for i, act in enumerate(self.activations):
            h = _dense_rows(h, self.params[2 * i].data, self.params[2 * i + 1].data, ACTIVATIONS.index(act))
        return h[0] if squeeze else h

    def zero_grad(self):
        for t in self.params:
            t.grad = None

    def grads(self) -> list[np.ndarray]:
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.params]

    def get_weights(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.params]

    def set_weights(self, weights) -> None:
        for t, w in zip(self.params, weights):
            w = np.asarray(w, dtype=float)
            if w.shape != t.data.shape:
                raise ValueError(f"weight shape {w.shape} != {t.data.shape}")
            t.data = w.copy()

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.sizes = list(self.sizes)
        clone.activations = list(self.activations)
        clone.init_scheme = self.init_scheme
        clone.params = [Tensor(t.data.copy(), requires_grad=True) for t in self.params]
        return clone

    # -- persistence ------------------------------------------------------------

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<II", FORMAT_VERSION, self.n_layers)
        head += struct.pack(f"<{len(self.sizes)}I", *self.sizes)
        head += bytes(ACTIVATIONS.index(a) for a in self.activations)
        body = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in self.params)
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mlp":
        if blob[: len(MAGIC)] != MAGIC:
            raise ValueError("not an MLP weight file (bad magic)")
        off = len(MAGIC)
        version, n_layers = struct.unpack_from("<II", blob, off)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported weight file version {version}, expected {FORMAT_VERSION}")
        off += 8
        sizes = list(struct.unpack_from(f"<{n_layers + 1}I", blob, off))
        off += 4 * (n_layers + 1)
        activations = [ACTIVATIONS[t] for t in blob[off : off + n_layers]]
        off += n_layers
        net = cls(sizes, activations, seed=0)
        for t in net.params:
            n = t.data.size
            t.data = np.frombuffer(blob, dtype="<f8", count=n, offset=off).astype(float).reshape(t.data.shape)
            off += 8 * n
        if off != len(blob):
            raise ValueError("trailing bytes in weight file")
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Mlp":
        return cls.from_bytes(Path(path).read_bytes())


MAGIC = b"GHMLP\x00"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update; returns new parameter arrays and advances ``state``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        out.append(p - state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps))
    return out


class Adam:
    """Adam over a list of leaf tensors, reading their ``.grad``."""

    def __init__(self, params: list[Tensor], lr: float, **kw):
        self.params = list(params)
        self.state = AdamState(lr=lr, **kw)

    def zero_grad(self):
        for t in self.params:
            t.grad = None

    def step(self):
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.params]
        new = adam_step([t.data for t in self.params], grads, self.state)
        for t, w in zip(self.params, new):
            t.data = w
