"""Small dense-tensor engine with reverse-mode differentiation.

Everything is float64 and NCHW.  Each differentiable op builds a node whose
``_backward`` maps the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the graph once in reverse topological
order and accumulates into the ``grad`` of every leaf that requires it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DegenerateBatchError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "add",
    "reshape",
    "flatten",
    "dense",
    "conv2d",
    "relu",
    "maxpool2d",
    "avgpool2d",
    "batchnorm2d",
    "softmax_cross_entropy",
    "sgd_step",
    "SGD",
]


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Optional[Callable] = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    """Wrap an op result; only records the graph edge when some parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=rule, op=op)
    return Tensor(data, op=op)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss``.

    Gradients accumulate, so calling twice without zeroing doubles them.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast (bias addition)."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), rule, "add")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------- linear ops


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def rule(g):
        gb = g.sum(axis=0) if bias is not None else None
        return g @ wd, g.T @ xd, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, rule, "dense")


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weight.

    Lowered to one matmul over channels-last patches (im2col); the input
    gradient is scattered back patch offset by patch offset.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / padding={padding}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    xp = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    # patch layout (kh, kw, c) keeps channels innermost
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, oh, ow, o)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    padded_shape = xp.shape

    def rule(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, kh, kw, c)
            gxp = np.zeros(padded_shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, :, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w].transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, np.ascontiguousarray(gw), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, rule, "conv2d")


# ---------------------------------------------------------------- pooling


def _pool_windows(x: np.ndarray, k: int, s: int):
    n, c, h, w = x.shape
    oh, ow = _out_size(h, k, s, 0), _out_size(w, k, s, 0)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool: window {k} larger than input {x.shape}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
    return win.reshape(n, c, oh, ow, k * k), oh, ow


def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties route the gradient to the first maximal element."""
    s = kernel if stride is None else stride
    win, oh, ow = _pool_windows(x.data, kernel, s)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def rule(g):
        gx = np.zeros(shape)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(hit, g, 0.0)
        return (gx,)

    return _node(out, (x,), rule, "maxpool2d")


def avgpool2d(x: Tensor, kernel: Optional[int] = None, stride: Optional[int] = None) -> Tensor:
    """Average pooling; ``kernel=None`` pools globally over the spatial extent."""
    if kernel is None:
        if x.shape[2] != x.shape[3]:
            raise ShapeError(f"global avgpool2d needs square maps, got {x.shape}")
        kernel = x.shape[2]
    s = kernel if stride is None else stride
    win, oh, ow = _pool_windows(x.data, kernel, s)
    out = win.mean(axis=-1)
    shape = x.shape
    inv = 1.0 / (kernel * kernel)

    def rule(g):
        gx = np.zeros(shape)
        share = g * inv
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += share
        return (gx,)

    return _node(out, (x,), rule, "avgpool2d")


# ---------------------------------------------------------------- normalization


def _channel_sum(a: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
                running_var: np.ndarray, training: bool, momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, like the common
    frameworks).  In eval mode the running statistics are used.
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[1]
    m = x.data.size // c
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatchError(f"batchnorm2d in training mode needs batch >= 2, got {x.shape[0]}")
        mean = _channel_sum(x.data) / m
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = _channel_sum(centered * centered) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
        centered = x.data - mean.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    gd = gamma.data

    def rule(g):
        gbeta = _channel_sum(g)
        ggamma = _channel_sum(g * xhat)
        scale = (gd * inv_std).reshape(1, c, 1, 1)
        if training:
            gx = scale * (g - (gbeta / m).reshape(1, c, 1, 1) - xhat * (ggamma / m).reshape(1, c, 1, 1))
        else:
            gx = g * scale
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), rule, "batchnorm2d")


# ---------------------------------------------------------------- loss


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        probs = np.exp(logp)
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return _node(np.asarray(loss), (logits,), rule, "softmax_cross_entropy")


# ---------------------------------------------------------------- optimizer


def sgd_step(params: Iterable[Tensor], velocities: dict, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """One momentum-SGD update in place.

    ``velocities`` maps ``id(param)`` to its momentum buffer and is filled
    lazily.  Update: ``v = momentum * v + (grad + weight_decay * p)``,
    ``p -= lr * v``.
    """
    for p in params:
        if p.grad is None:
            raise ContractError(f"parameter {p!r} has no gradient")
        d = p.grad + weight_decay * p.data if weight_decay else p.grad
        if momentum:
            v = velocities.get(id(p))
            v = d.copy() if v is None else momentum * v + d
            velocities[id(p)] = v
            d = v
        p.data -= lr * d


class SGD:
    """Momentum SGD over a fixed, ordered parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: dict = {}

    def step(self) -> None:
        sgd_step(self.params, self.velocities, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> list:
        """Momentum buffers in parameter order (``None`` where unset)."""
        return [self.velocities.get(id(p)) for p in self.params]

    def load_state(self, buffers: Sequence[Optional[np.ndarray]]) -> None:
        self.velocities = {id(p): np.array(b, dtype=np.float64)
                           for p, b in zip(self.params, buffers) if b is not None}
