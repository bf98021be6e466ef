"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays hold the data, a tape of
`Tensor` nodes records the forward graph, and `backward()` walks the tape in
reverse topological order. Only the operations needed by a 3D token
transformer are provided (elementwise arithmetic, batched matmul, layer
norm, softmax attention, GELU, token gather/scatter, reductions).

Conventions:
    - all data is float64, row-major, last index fastest
    - gradients accumulate into `.grad` of leaf tensors; call `zero_grad`
      (or set `.grad = None`) between steps
    - `no_grad()` disables taping for inference
    - `set_debug_checks(True)` makes every op raise `NumericError` on
      NaN/Inf outputs
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_GRAD_MODE = threading.local()
_DEBUG_CHECKS = False


def _grad_enabled() -> bool:
    return getattr(_GRAD_MODE, "enabled", True)


def set_debug_checks(enabled: bool) -> None:
    """Enable or disable NaN/Inf detection on every op output."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextmanager
def no_grad():
    """Context in which ops do not record the tape (inference mode).

    Grad mode is per-thread: entering this context in a worker thread never
    turns taping off for code running concurrently on other threads.
    """
    prev = _grad_enabled()
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = prev


class Tensor:
    """A node of the autodiff graph wrapping a float64 ndarray."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar; all arithmetic routes through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap an op result, recording the tape only when grads can flow."""
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError("non-finite values produced by an operation")
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def grad_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise power with constant exponent (negative bases need integer p)."""
    data = a.data**p

    def grad_fn(g):
        return (g * p * a.data ** (p - 1),)

    return _make(data, (a,), grad_fn)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation.

    gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    """
    c = math.sqrt(2.0 / math.pi)
    a = 0.044715
    u = c * (x.data + a * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def grad_fn(g):
        du = c * (1.0 + 3.0 * a * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        return (g * d,)

    return _make(data, (x,), grad_fn)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(data, (x,), grad_fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([x.data.shape[i] for i in axis]))
    else:
        n = x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports plain 2D x 2D, batched x 2D weight (any leading batch dims on
    `a`), and batched x batched with identical leading dims.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    if b.data.ndim > 2 and a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(
            f"matmul batch dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    data = a.data @ b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2 and a.data.ndim > 2:
            k, n = b.data.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(data, (a, b), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    `gamma` and `beta` must be 1D of length d = x.shape[-1].
    """
    d = x.data.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last axis")
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError("gamma/beta must be 1D of the normalized width")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    data = xhat * gamma.data + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        # standard fused layer-norm backward over the last axis
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = ivar * (dxhat - m1 - xhat * m2)
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return _make(data, (x, gamma, beta), grad_fn)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T * scale) v.

    q, k, v share the shape (..., tokens, head_dim); attention-weight rows
    sum to one. `scale` is conventionally 1/sqrt(head_dim).
    """
    if not (q.data.shape == k.data.shape == v.data.shape):
        raise DimensionError(
            f"attention operands must share a shape, got "
            f"{q.data.shape}/{k.data.shape}/{v.data.shape}"
        )
    logits = mul(matmul(q, transpose(k, _swap_last(k.data.ndim))), scale)
    weights = softmax(logits)
    return matmul(weights, v)


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# token gather/scatter (mask bookkeeping)


def take_tokens(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather token rows: (B, N, D) + (B, K) -> (B, K, D); also unbatched."""
    idx = np.asarray(idx)
    if x.data.ndim == 2 and idx.ndim == 1:
        data = x.data[idx]

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            return (gx,)

    elif x.data.ndim == 3 and idx.ndim == 2:
        if idx.shape[0] != x.data.shape[0]:
            raise DimensionError("index batch does not match token batch")
        rows = np.arange(x.data.shape[0])[:, None]
        data = x.data[rows, idx]

        def grad_fn(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, (rows, idx), g)
            return (gx,)

    else:
        raise DimensionError(
            f"take_tokens expects (N,D)+(K,) or (B,N,D)+(B,K), got "
            f"{x.data.shape} and {idx.shape}"
        )
    return _make(data, (x,), grad_fn)


def place_tokens(
    visible: Tensor,
    fill: Tensor,
    kept_idx: np.ndarray,
    masked_idx: np.ndarray,
    n_tokens: int,
) -> Tensor:
    """Rebuild the full token sequence from visible rows plus a fill token.

    visible: (B, K, D) rows placed at kept_idx (B, K); `fill` is a (D,)
    tensor broadcast to every masked slot. Returns (B, N, D).
    """
    kept_idx = np.asarray(kept_idx)
    masked_idx = np.asarray(masked_idx)
    squeeze = visible.data.ndim == 2
    vis = visible.data[None] if squeeze else visible.data
    kept = kept_idx[None] if kept_idx.ndim == 1 else kept_idx
    masked = masked_idx[None] if masked_idx.ndim == 1 else masked_idx
    b, _, d = vis.shape
    if fill.data.shape != (d,):
        raise DimensionError("fill token width does not match visible tokens")
    rows = np.arange(b)[:, None]
    data = np.empty((b, n_tokens, d), dtype=np.float64)
    data[rows, kept] = vis
    data[rows, masked] = fill.data

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gv = gb[rows, kept]
        if squeeze:
            gv = gv[0]
        gf = gb[rows, masked].sum(axis=(0, 1))
        return gv, gf

    out = _make(data[0] if squeeze else data, (visible, fill), grad_fn)
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every reachable leaf with d(loss)/d(leaf).

    Repeated calls accumulate until grads are zeroed. The loss must be a
    scalar (size-1) tensor produced with grad recording enabled.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad and loss._grad_fn is None:
        raise ContractError("loss is not connected to any tensor requiring grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            # leaf: persist the gradient buffer
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    """AdamW moment buffers; one entry per parameter name."""

    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[tuple[str, Tensor]], state: AdamState, lr: float) -> None:
    """One AdamW update with decoupled weight decay.

    Weight decay skips 1D parameters (biases, norm scales, the mask token),
    the usual transformer convention.
    """
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay != 0.0 and p.data.ndim > 1:
            p.data -= lr * state.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch: int, base_lr: float, warmup_epochs: int, total_epochs: int) -> float:
    """Linear warmup from 0 to base_lr, then cosine decay to 0.

    The ramp is zero-indexed: epoch 0 returns 0, epoch == warmup_epochs
    returns base_lr exactly, and the cosine tail approaches 0 at
    total_epochs - 1.
    """
    if warmup_epochs >= total_epochs:
        raise ConfigError(
            f"warmup_epochs ({warmup_epochs}) must be < total_epochs ({total_epochs})"
        )
    if not 0 <= epoch < total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if epoch < warmup_epochs:
        return base_lr * epoch / warmup_epochs
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
