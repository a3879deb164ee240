"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` of the current
thread.  Outside a tape (or when no input requires a gradient) they are plain
numpy computations, which is what rollout collection relies on.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("inputs", "outputs", "backward")

    def __init__(self, inputs, outputs, backward):
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, grad=None) -> None:
        """Propagate d(loss) back through the recorded nodes in reverse order.

        Leaf gradients are *added* to ``.grad``; reset them explicitly between
        independent accumulations.
        """
        if loss.data.size != 1 and grad is None:
            raise ShapeError("backward() needs a scalar loss or an explicit output gradient")
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
            return
        grads = {id(loss): seed}
        for node in reversed(self.nodes):
            outs = [grads.pop(id(o), None) for o in node.outputs]
            if all(g is None for g in outs):
                continue
            outs = [np.zeros_like(o.data) if g is None else g for o, g in zip(node.outputs, outs)]
            in_grads = node.backward(*outs)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    _accumulate_leaf(t, g)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = g if prev is None else prev + g


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.data.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _record(inputs, outputs, backward):
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    for o in outputs:
        o.requires_grad = True
        o.is_leaf = False
    tape.nodes.append(_Node(inputs, outputs, backward))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    _record((a, b), (out,), lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)
    _record((a,), (out,), lambda g: (2.0 * a.data * g,))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    _record((a,), (out,), lambda g: (g * out.data,))
    return out


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of max(a, floor); no gradient flows where the floor is active."""
    clipped = np.maximum(a.data, floor)
    out = Tensor(np.log(clipped))
    _record((a,), (out,), lambda g: (np.where(a.data > floor, g / clipped, 0.0),))
    return out


def elu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, np.expm1(np.minimum(a.data, 0.0))))
    _record((a,), (out,), lambda g: (g * np.where(pos, 1.0, out.data + 1.0),))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    _record((a,), (out,), lambda g: (g * (1.0 - out.data ** 2),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_sigmoid(a.data))
    _record((a,), (out,), lambda g: (g * out.data * (1.0 - out.data),))
    return out


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions and shape ---------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    _record((a,), (out,), backward)
    return out


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    _record((a,), (out,), lambda g: (g.reshape(a.shape),))
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    _record((a,), (out,), backward)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    _record(tuple(tensors), (out,), backward)
    return out


# -- layers -----------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the trailing axis; leading axes are batch."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[1] or (bias is not None and bias.shape != (weight.shape[0],)):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {None if bias is None else bias.shape}")
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    out = Tensor(y)

    def backward(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ weight.data
        gw = g2.T @ x2
        return (gx, gw) if bias is None else (gx, gw, g2.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    _record(inputs, (out,), backward)
    return out


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid cross-correlation.  x: (C, L) or (B, C, L); kernels: (O, C, k)."""
    x = as_tensor(x)
    batched = x.data.ndim == 3
    xd = x.data if batched else x.data[None]
    n_out, n_in, k = kernels.shape
    B, C, L = xd.shape
    if C != n_in:
        raise ShapeError(f"conv1d: input has {C} channels, kernels expect {n_in}")
    if L < k:
        raise ShapeError(f"conv1d: input length {L} shorter than kernel {k}")
    out_len = (L - k) // stride + 1
    win = sliding_window_view(xd, k, axis=2)[:, :, ::stride, :]          # (B, C, O, k)
    cols = win.transpose(0, 2, 1, 3).reshape(B, out_len, C * k)          # (B, O, C*k)
    kmat = kernels.data.reshape(n_out, C * k)
    y = (cols @ kmat.T).transpose(0, 2, 1)                               # (B, n_out, O)
    if bias is not None:
        y = y + bias.data[:, None]
    out = Tensor(y if batched else y[0])

    def backward(g):
        g3 = (g if batched else g[None]).transpose(0, 2, 1)              # (B, O, n_out)
        gk = (g3.reshape(-1, n_out).T @ cols.reshape(-1, C * k)).reshape(kernels.shape)
        gcols = (g3 @ kmat).reshape(B, out_len, C, k)
        gx = np.zeros_like(xd)
        span = stride * (out_len - 1) + 1
        for j in range(k):
            gx[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gx if batched else gx[0]
        grads = (gx, gk)
        return grads if bias is None else grads + (g3.sum(axis=(0, 1)),)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    _record(inputs, (out,), backward)
    return out


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))
    _record((a,), (out,), lambda g: (out.data * (g - (g * out.data).sum(axis=-1, keepdims=True)),))
    return out


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = Tensor(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
    _record((a,), (out,), lambda g: (g - np.exp(out.data) * g.sum(axis=-1, keepdims=True),))
    return out


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor):
    """One LSTM step.  Gate order in ``weight`` rows: input, forget, candidate, output.

    weight: (4H, n_in + H), bias: (4H,).  Returns (h', c').
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    H = h.shape[-1]
    if c.shape != h.shape or weight.shape != (4 * H, x.shape[-1] + H) or bias.shape != (4 * H,):
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, weight {weight.shape}")
    xh = np.concatenate([x.data, h.data], axis=-1)
    z = xh @ weight.data.T + bias.data
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    gg = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_out, c_out = Tensor(o * tc), Tensor(c_new)

    def backward(gh, gc):
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc * gg * i * (1.0 - i),
            dc * c.data * f * (1.0 - f),
            dc * i * (1.0 - gg * gg),
            gh * tc * o * (1.0 - o),
        ], axis=-1)
        dz2 = dz.reshape(-1, 4 * H)
        gw = dz2.T @ xh.reshape(-1, xh.shape[-1])
        gxh = dz @ weight.data
        n_in = x.shape[-1]
        return gxh[..., :n_in], gxh[..., n_in:], dc * f, gw, dz2.sum(axis=0)

    _record((x, h, c, weight, bias), (h_out, c_out), backward)
    return h_out, c_out


# -- losses -----------------------------------------------------------------------

def cross_entropy(probs: Tensor, target) -> Tensor:
    """-sum_j target_j log(prob_j) over the trailing axis (summed over batch)."""
    return -sum(mul(as_tensor(target), log(probs)))


def mse_half(a: Tensor, b) -> Tensor:
    """0.5 * squared Euclidean distance, summed over all entries."""
    return mul(sum(square(sub(a, b))), 0.5)


def entropy(probs: Tensor, axis: int = -1) -> Tensor:
    """-sum p log p; zero entries contribute nothing."""
    return -sum(mul(probs, log(probs)), axis=axis)
