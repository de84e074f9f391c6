"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough ops for the losses and the graph network: broadcasting
arithmetic, matmul, reductions, elementwise nonlinearities, gather and
concatenation.  Values are float64 throughout and every reduction uses
numpy's fixed left-to-right pairwise order, so results are reproducible
bit for bit on a fixed thread count.
"""

from __future__ import annotations

import numpy as np


def sigmoid_array(v: np.ndarray) -> np.ndarray:
    """Logistic function in the numerically stable two-sided form."""
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array plus a backward closure for reverse-mode autodiff."""

    __slots__ = ("value", "grad", "requires_grad", "_backward", "_parents")
    __array_priority__ = 100  # keep numpy from hijacking ndarray <op> Tensor

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents = ()

    # -- construction -----------------------------------------------------

    @staticmethod
    def param(value) -> "Tensor":
        return Tensor(value, requires_grad=True)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    # -- graph plumbing ---------------------------------------------------

    def _make(self, value, parents, backward) -> "Tensor":
        out = Tensor(value)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = grad.copy() if isinstance(grad, np.ndarray) else np.asarray(grad, dtype=np.float64)
        else:
            self.grad = self.grad + grad

    def backward(self, grad=None):
        """Backpropagate from this tensor (default seed: ones)."""
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen or not t.requires_grad:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        if grad is None:
            grad = np.ones_like(self.value)
        self._accum(np.asarray(grad, dtype=np.float64))
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)

    def zero_grad(self):
        self.grad = None

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = self._make(self.value + other.value, (self, other), None)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.value.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.value.shape))

        out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._make(-self.value, (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(-g)

        out._backward = bw
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = self._make(self.value * other.value, (self, other), None)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.value, self.value.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.value, other.value.shape))

        out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = self._make(self.value / other.value, (self, other), None)

        def bw(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.value, self.value.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.value / (other.value ** 2), other.value.shape))

        out._backward = bw
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __matmul__(self, other):
        other = as_tensor(other)
        out = self._make(self.value @ other.value, (self, other), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g @ other.value.T)
            if other.requires_grad:
                other._accum(self.value.T @ g)

        out._backward = bw
        return out

    @property
    def T(self) -> "Tensor":
        out = self._make(self.value.T, (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g.T)

        out._backward = bw
        return out

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        out = self._make(self.value.sum(axis=axis, keepdims=keepdims), (self,), None)

        def bw(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accum(np.broadcast_to(g, self.value.shape).astype(np.float64))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accum(np.broadcast_to(gg, self.value.shape).astype(np.float64))

        out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- elementwise ------------------------------------------------------

    def exp(self) -> "Tensor":
        val = np.exp(self.value)
        out = self._make(val, (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g * val)

        out._backward = bw
        return out

    def log(self) -> "Tensor":
        out = self._make(np.log(self.value), (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g / self.value)

        out._backward = bw
        return out

    def sigmoid(self) -> "Tensor":
        val = sigmoid_array(self.value)
        out = self._make(val, (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g * val * (1.0 - val))

        out._backward = bw
        return out

    def relu(self) -> "Tensor":
        mask = self.value > 0
        out = self._make(self.value * mask, (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g * mask)

        out._backward = bw
        return out

    def sqrt(self) -> "Tensor":
        val = np.sqrt(self.value)
        out = self._make(val, (self,), None)

        def bw(g):
            if self.requires_grad:
                # subgradient 0 at exactly zero, so hinge points stay finite
                denom = np.where(val > 0, 2.0 * val, 1.0)
                self._accum(g * np.where(val > 0, 1.0 / denom, 0.0))

        out._backward = bw
        return out

    def square(self) -> "Tensor":
        return self * self

    # -- shaping ----------------------------------------------------------

    def __getitem__(self, idx) -> "Tensor":
        out = self._make(self.value[idx], (self,), None)

        def bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.value)
                np.add.at(full, idx, g)
                self._accum(full)

        out._backward = bw
        return out

    def reshape(self, *shape) -> "Tensor":
        out = self._make(self.value.reshape(*shape), (self,), None)

        def bw(g):
            if self.requires_grad:
                self._accum(g.reshape(self.value.shape))

        out._backward = bw
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis`` with gradient routing."""
    tensors = [as_tensor(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    out = Tensor(value)
    if any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out._parents = tuple(tensors)
        sizes = [t.value.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw(g):
            for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(a, b)
                    t._accum(g[tuple(sl)])

        out._backward = bw
    return out


def row_norms(x: Tensor, keepdims: bool = True) -> Tensor:
    """Euclidean norm of each row; subgradient 0 where the norm is 0."""
    return (x * x).sum(axis=1, keepdims=keepdims).sqrt()


def normalize_rows(x: Tensor) -> Tensor:
    return x / row_norms(x)


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and rows of ``b``."""
    return normalize_rows(a) @ normalize_rows(b).T


def logsumexp_rows(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp, stabilized by constant max subtraction."""
    m = np.max(x.value, axis=1, keepdims=True)
    return (x - m).exp().sum(axis=1, keepdims=True).log() + m


class Adam:
    """Adam with bias-corrected moments and optional decoupled-in-gradient
    weight decay (decay added to the raw gradient, classic style)."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        """Flat name->array view of the moment state (for checkpoints)."""
        out = {"adam_step": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam_m{i}"] = m
            out[f"adam_v{i}"] = v
        return out


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], seeded."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
