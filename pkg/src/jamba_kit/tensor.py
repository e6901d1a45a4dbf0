"""Minimal dense tensor with reverse-mode automatic differentiation.

Every op is a :class:`Function` subclass. Calling ``SomeOp.apply(...)`` runs the
forward on numpy arrays and, when any input requires a gradient, attaches a
node to the output so :func:`backward` can walk the recorded graph later.
There is no global tape and no grad-mode switch: tracking is decided per op
from its inputs, so independent passes never share state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import CacheError, ContractError, DimensionError

DEFAULT_DTYPE = np.float32


def _as_array(data: Any, dtype=None) -> np.ndarray:
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return Sub.apply(self, _lift(other, self))

    def __rsub__(self, other):
        return Sub.apply(_lift(other, self), self)

    def __mul__(self, other):
        return Mul.apply(self, _lift(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, _lift(other, self))

    def __rtruediv__(self, other):
        return Div.apply(_lift(other, self), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return Index.apply(self, key=key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def square(self) -> "Tensor":
        return PowScalar.apply(self, exponent=2.0)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def backward(self) -> None:
        backward(self)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# graph machinery
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Node:
    fn: "Function"
    inputs: tuple


class Function:
    """One differentiable op. ``forward`` sees arrays; ``backward`` returns one
    gradient (or None) per positional input."""

    def __init__(self):
        self.saved: tuple = ()
        self.aux = None

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        return cls.apply_aux(*inputs, **kwargs)[0]

    @classmethod
    def apply_aux(cls, *inputs, **kwargs):
        """Like :meth:`apply` but also returns whatever ``forward`` left in
        ``self.aux`` (non-differentiable side outputs such as carried state)."""
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls()
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        track = any(t.requires_grad for t in tensors)
        result = Tensor(out, requires_grad=track)
        if track:
            result._node = Node(fn, tensors)
        else:
            fn.saved = ()
        return result, fn.aux


@dataclass
class GraphEntry:
    op: str
    inputs: tuple
    output: int
    fn: Function = field(repr=False)


@dataclass
class Graph:
    """Recorded operations reachable from a root, in topological order."""

    entries: list
    tensors: dict

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list = []
        seen: set = set()
        tensors: dict = {}
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            tensors[id(t)] = t
            stack.append((t, True))
            if t._node is not None:
                for inp in t._node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        entries = [
            GraphEntry(type(t._node.fn).__name__, tuple(id(i) for i in t._node.inputs), id(t), t._node.fn)
            for t in order
            if t._node is not None
        ]
        return cls(entries, tensors)


def backward(loss: Tensor, graph: Optional[Graph] = None) -> Graph:
    """Populate ``.grad`` on every tracked tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. The graph's saved
    intermediates are released afterwards, so a second call on the same loss
    only sees leaves.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    graph = graph or Graph.trace(loss)
    grads: dict = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(graph.entries):
        out = graph.tensors[entry.output]
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        _store(out, g)
        in_grads = entry.fn.backward(g)
        for inp_id, ig in zip(entry.inputs, in_grads):
            if ig is None:
                continue
            inp = graph.tensors.get(inp_id)
            if inp is None:
                continue
            if inp_id in grads:
                grads[inp_id] = grads[inp_id] + ig
            else:
                grads[inp_id] = ig
        entry.fn.saved = ()
        out._node = None
    for tid, g in grads.items():
        _store(graph.tensors[tid], g)
    return graph


def _store(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    def forward(self, a, b):
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        sa, sb = self.saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Div(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a / b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class PowScalar(Function):
    def forward(self, a, exponent):
        self.saved = (a, exponent)
        return a**exponent

    def backward(self, g):
        a, p = self.saved
        return (g * p * a ** (p - 1),)


class Exp(Function):
    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, g):
        return (g * self.saved[0],)


class Log(Function):
    def forward(self, a):
        self.saved = (a,)
        return np.log(a)

    def backward(self, g):
        return (g / self.saved[0],)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Silu(Function):
    def forward(self, x):
        s = _sigmoid(x)
        self.saved = (x, s)
        return x * s

    def backward(self, g):
        x, s = self.saved
        return (g * s * (1.0 + x * (1.0 - s)),)


class Softplus(Function):
    def forward(self, x):
        self.saved = (x,)
        return np.logaddexp(np.zeros((), dtype=x.dtype), x)

    def backward(self, g):
        return (g * _sigmoid(self.saved[0]),)


# ---------------------------------------------------------------------------
# shape / reduction
# ---------------------------------------------------------------------------

class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.saved = (a.shape, axis, keepdims)
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        shape, axis, keepdims = self.saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)


class Reshape(Function):
    def forward(self, a, shape):
        self.saved = (a.shape,)
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.saved[0]),)


class Transpose(Function):
    def forward(self, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        self.saved = (axes,)
        return a.transpose(axes)

    def backward(self, g):
        return (g.transpose(np.argsort(self.saved[0])),)


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)


class Index(Function):
    def forward(self, a, key):
        self.saved = (a.shape, a.dtype, key)
        return a[key]

    def backward(self, g):
        shape, dtype, key = self.saved
        out = np.zeros(shape, dtype=dtype)
        if _is_basic(key):
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)


class IndexAddRows(Function):
    """``out = zeros(n_rows, ...); out[rows] += src`` (rows may repeat)."""

    def forward(self, src, rows, n_rows):
        self.saved = (rows,)
        out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
        np.add.at(out, rows, src)
        return out

    def backward(self, g):
        return (g[self.saved[0]],)


def index_add_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    return IndexAddRows.apply(src, rows=np.asarray(rows, dtype=np.int64), n_rows=n_rows)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.saved = (axis, [a.shape[axis] for a in arrays])
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        axis, sizes = self.saved
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.saved
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes batch)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return MatMul.apply(a, b)


class Linear(Function):
    """``x @ W.T + b`` with W stored as [out, in]."""

    def forward(self, x, w, b=None):
        self.saved = (x, w, b is not None)
        y = x @ w.T
        return y + b if b is not None else y

    def backward(self, g):
        x, w, has_bias = self.saved
        gx = g @ w
        gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        if has_bias:
            return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw


def linear(x: Tensor, weight, bias: Optional[Tensor] = None) -> Tensor:
    # QuantizedLinear and friends carry their own matmul.
    if not isinstance(weight, Tensor):
        return weight(x) if bias is None else weight(x) + bias
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


# ---------------------------------------------------------------------------
# normalisation / activations
# ---------------------------------------------------------------------------

class Softmax(Function):
    def forward(self, x, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        self.saved = (s, axis)
        return s

    def backward(self, g):
        s, axis = self.saved
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def silu(x) -> Tensor:
    return Silu.apply(x)


def softplus(x) -> Tensor:
    return Softplus.apply(x)


class RMSNorm(Function):
    def forward(self, x, w, eps=1e-6):
        r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
        xhat = x * r
        self.saved = (xhat, r, w)
        return xhat * w

    def backward(self, g):
        xhat, r, w = self.saved
        gw = (g * xhat).reshape(-1, w.shape[-1]).sum(axis=0)
        gxhat = g * w
        gx = r * (gxhat - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("rms_norm eps must be positive")
    return RMSNorm.apply(x, weight, eps=eps)


class CrossEntropy(Function):
    """Mean next-token negative log-likelihood over rows of ``logits``."""

    def forward(self, logits, targets):
        z = logits - logits.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - lse
        rows = np.arange(logits.shape[0])
        self.saved = (logp, targets)
        return np.asarray(-logp[rows, targets].mean(), dtype=logits.dtype)

    def backward(self, g):
        logp, targets = self.saved
        p = np.exp(logp)
        p[np.arange(p.shape[0]), targets] -= 1.0
        return (g * p / p.shape[0],)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    return CrossEntropy.apply(logits, targets=np.asarray(targets, dtype=np.int64))


# ---------------------------------------------------------------------------
# depthwise causal convolution
# ---------------------------------------------------------------------------

class CausalConv1d(Function):
    def forward(self, x, kernel, prefix):
        width = kernel.shape[0]
        xp = np.concatenate([prefix, x], axis=0)
        n = x.shape[0]
        y = np.zeros_like(x)
        for w in range(width):
            y += kernel[w] * xp[w : w + n]
        self.saved = (xp, kernel, prefix.shape[0])
        self.aux = xp[xp.shape[0] - (width - 1):].copy()
        return y

    def backward(self, g):
        xp, kernel, n_prefix = self.saved
        width = kernel.shape[0]
        n = g.shape[0]
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernel)
        for w in range(width):
            gxp[w : w + n] += g * kernel[w]
            gk[w] = (g * xp[w : w + n]).sum(axis=0)
        return gxp[n_prefix:], gk, None


def causal_conv1d(x: Tensor, kernel: Tensor, state: Optional[np.ndarray] = None):
    """Per-channel causal convolution.

    ``x`` is [L, C], ``kernel`` is [W, C]; ``kernel[W-1]`` multiplies the
    current position. ``state`` holds the previous W-1 inputs (zeros when
    None). Returns ``(y, new_state)``; the state is a plain array and is not
    differentiated through.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise DimensionError(f"conv kernel must be [W>=1, C], got {kernel.shape}")
    width, channels = kernel.shape
    if x.ndim != 2 or x.shape[1] != channels:
        raise DimensionError(f"conv input {x.shape} does not match kernel {kernel.shape}")
    if state is None:
        state = np.zeros((width - 1, channels), dtype=x.dtype)
    elif state.shape != (width - 1, channels):
        raise CacheError(f"conv state has shape {state.shape}, expected {(width - 1, channels)}")
    return CausalConv1d.apply_aux(x, kernel, Tensor(state.astype(x.dtype, copy=False)))
