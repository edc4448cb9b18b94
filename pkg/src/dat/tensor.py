"""Minimal reverse-mode automatic differentiation on top of numpy.

Every primitive records a node holding references to its parents and a
backward rule. ``Tensor.backward`` replays the recorded nodes in reverse
creation order (the tape), so each node is visited exactly once. A graph is
consumed by the replay; replaying it a second time raises.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_dtype_var: contextvars.ContextVar = contextvars.ContextVar("dat_dtype", default=np.float32)
_grad_var: contextvars.ContextVar = contextvars.ContextVar("dat_grad_enabled", default=True)
_seq = itertools.count()


def default_dtype():
    return _dtype_var.get()


@contextlib.contextmanager
def precision(dtype):
    """Run the enclosed code with ``dtype`` as the tensor creation precision."""
    token = _dtype_var.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype_var.reset(token)


@contextlib.contextmanager
def no_grad():
    token = _grad_var.set(False)
    try:
        yield
    finally:
        _grad_var.reset(token)


def grad_enabled() -> bool:
    return _grad_var.get()


class GraphError(RuntimeError):
    pass


class _Node:
    __slots__ = ("parents", "backward", "seq", "name", "consumed")

    def __init__(self, parents, backward, name):
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)
        self.name = name
        self.consumed = False


class Tensor:
    """An n-dimensional array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    # -- autodiff -------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        grads = _run_backward(self, grad, targets=None)
        for t, g in grads.items():
            t.grad = g if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward, name)
    return out


def _topo(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    order: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        if t._node is not None:
            stack.extend(t._node.parents)
    return order


def _run_backward(root: Tensor, grad, targets: Sequence[Tensor] | None) -> dict:
    if not root.requires_grad:
        raise GraphError("tensor does not require grad; nothing to differentiate")
    if grad is None:
        if root.data.size != 1:
            raise GraphError(f"backward without an explicit gradient needs a scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    nodes = [t for t in _topo(root) if t.requires_grad]
    # reverse tape order; leaves have no node and sort last
    nodes.sort(key=lambda t: -1 if t._node is None else t._node.seq, reverse=True)

    wanted: set[int] = set()
    if targets is None:
        needs = {id(t) for t in nodes}
    else:
        wanted = {id(t) for t in targets}
        needs = set()
        # a node needs a gradient if some target is reachable from it through parents
        for t in reversed(nodes):
            if id(t) in wanted or (t._node is not None and any(id(p) in needs for p in t._node.parents)):
                needs.add(id(t))

    grads: dict[int, np.ndarray] = {id(root): grad}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in nodes:
        g = grads.pop(id(t), None)
        node = t._node
        if node is None:
            if g is not None and (targets is None or id(t) in needs):
                leaves[t] = g
            continue
        if node.consumed:
            raise GraphError(f"graph through '{node.name}' was already differentiated; re-run the forward pass")
        node.consumed = True
        if g is None:
            continue
        flags = tuple(p.requires_grad and id(p) in needs for p in node.parents)
        if id(t) in wanted:
            leaves[t] = g
        if not any(flags):
            continue
        pgrads = node.backward(g, flags)
        for p, pg, f in zip(node.parents, pgrads, flags):
            if not f or pg is None:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return leaves


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching any ``.grad`` buffer.

    Branches that cannot reach an input are skipped. Inputs that are not
    reached, including every input of an output cut off by stop_gradient,
    get a zero array.
    """
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in inputs]
    got = _run_backward(output, grad_output, targets=list(inputs))
    return [got.get(t, np.zeros_like(t.data)) for t in inputs]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), back, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * s, (a,), lambda g, needs: (g * s,), "scale")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g, needs: (2.0 * a.data * g,), "square")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0), (a,), lambda g, needs: (g * mask,), "relu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero at and beyond the bounds."""
    mask = (a.data > lo) & (a.data < hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g, needs: (g * mask,), "clamp")


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity, zero backward contribution."""
    a = _as_tensor(a)
    return Tensor(a.data)


def straight_through(continuous: Tensor, quantized) -> Tensor:
    """Forward returns ``quantized``; backward hands the incoming gradient to ``continuous`` as is."""
    q = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized)
    if continuous.shape != q.shape:
        raise ValueError(f"straight_through shape mismatch: continuous {continuous.shape} vs quantized {q.shape}")
    return _make(q, (continuous,), lambda g, needs: (g,), "straight_through")


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inv),), "transpose")


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows ``table[indices]``; the backward scatter-adds into the table."""
    idx = np.asarray(indices)

    def back(g, needs):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _make(table.data[idx], (table,), back, "take_rows")


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g, needs):
        return (g @ b.data.T if needs[0] else None, a.data.T @ g if needs[1] else None)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g, needs):
        gx = g @ weight.data if needs[0] else None
        gw = g.T @ x.data if needs[1] else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if needs[2] else None)

    return _make(out, parents, back, "linear")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [N, C*kh*kw, Ho*Wo], one strided copy per kernel offset."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    dxp = np.zeros(shape, dcols.dtype)
    d = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += d[:, :, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over [N, C, H, W] with a [F, C, kh, kw] kernel."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kernel.shape} larger than padded input {x.shape} (padding={padding})")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(f, -1)
    out = np.matmul(kmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, f, ho, wo)

    def back(g, needs):
        gx = gk = gb = None
        gm = g.reshape(n, f, ho * wo)
        if needs[0]:
            dxp = _col2im(np.matmul(kmat.T, gm), xp.shape, kh, kw, stride, ho, wo)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if needs[1]:
            gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias is not None and needs[2]:
            gb = gm.sum(axis=(0, 2))
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, back, "conv2d")


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d size {k} does not divide spatial shape {(h, w)}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def back(g, needs):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _make(out, (x,), back, "avg_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g, needs):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), back, "upsample_nearest")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None = None,
               running_var: np.ndarray | None = None, mode: str = "train", momentum: float = 0.1,
               eps: float = 1e-5):
    """Batch normalization over the N, H, W axes of [N, C, H, W].

    ``mode`` is ``train`` (batch statistics, running stats updated in place),
    ``eval`` (running statistics) or ``stats`` (batch statistics, running
    stats untouched). Returns ``(output, batch_mean, batch_var)``; the batch
    statistics are the biased per-channel moments of the input, or None in
    eval mode.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm shape mismatch: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[1]
    shape = (1, c, 1, 1)
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise ValueError("batch_norm eval mode needs running statistics")
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def back_eval(g, needs):
            gx = g * (gamma.data * inv).reshape(shape) if needs[0] else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return gx, gg, gb

        return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), back_eval, "batch_norm"), None, None
    if mode not in ("train", "stats"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ValueError(f"batch_norm needs N*H*W >= 2 in {mode} mode, got {m}")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(shape)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    if mode == "train" and running_mean is not None:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1))

    def back(g, needs):
        gx = gg = gb = None
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        if needs[0]:
            gx = (gamma.data * inv).reshape(shape) / m * (
                m * g - gsum.reshape(shape) - xhat * gxhat_sum.reshape(shape))
        if needs[1]:
            gg = gxhat_sum
        if needs[2]:
            gb = gsum
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back, "batch_norm"), mu, var


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is ``mean`` (batch average) or ``sum`` (sum of the
    per-example losses).
    """
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels).astype(np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross entropy shape mismatch: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    per = lse - z[np.arange(n), labels]
    if reduction == "mean":
        factor = 1.0 / n
    elif reduction == "sum":
        factor = 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    loss = per.sum() * factor

    def back(g, needs):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g * factor),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "softmax_cross_entropy")


def mse(a: Tensor, b) -> Tensor:
    return mean(square(sub(a, b)))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
