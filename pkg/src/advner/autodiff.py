"""A small reverse-mode automatic differentiation engine over numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` linearises the reachable graph into a :class:`Tape`
(topological order) and replays the closures in reverse.

Broadcasting is deliberately limited to adding a bias over the last axis;
every other shape mismatch raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericalError

_ids = itertools.count()
_dtype = np.float32
_grad_enabled = True

MASK_VALUE = -1e9


def default_dtype():
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no backward closures inside the block (evaluation mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "id", "name", "grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_dtype)
        self.data = arr
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=_dtype), requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return tensor(data, requires_grad=True, name=name)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by {backward_fn.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.requires_grad = True
    return out


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    if a.shape == b.shape:
        def backward_add(g):
            return g, g
        return _make(a.data + b.data, (a, b), backward_add)
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def backward_bias(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return _make(a.data + b.data, (a, b), backward_bias)
    raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}")

    def backward_sub(g):
        return g, -g
    return _make(a.data - b.data, (a, b), backward_sub)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")

    def backward_mul(g):
        return g * b.data, g * a.data
    return _make(a.data * b.data, (a, b), backward_mul)


def scale(a: Tensor, c: float) -> Tensor:
    def backward_scale(g):
        return (g * c,)
    return _make(a.data * a.data.dtype.type(c), (a,), backward_scale)


def relu(x: Tensor) -> Tensor:
    on = x.data > 0

    def backward_relu(g):
        return (g * on,)
    return _make(x.data * on, (x,), backward_relu)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward_tanh(g):
        return (g * (1 - y * y),)
    return _make(y, (x,), backward_tanh)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    y = 0.5 * v * (1 + t)

    def backward_gelu(g):
        dt = (1 - t * t) * _GELU_C * (1 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1 + t) + 0.5 * v * dt),)
    return _make(y, (x,), backward_gelu)


def gradient_reversal(x: Tensor, lam: float) -> Tensor:
    """Identity on the way forward; multiplies the gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ConfigError(f"gradient reversal lambda must be >= 0, got {lam}")
    factor = -float(lam)

    def backward_grl(g):
        return (g * factor,)
    return _make(x.data.copy(), (x,), backward_grl)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``rng=None`` or ``p=0`` makes this the identity."""
    if rng is None or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)

    def backward_dropout(g):
        return (g * keep,)
    return _make(x.data * keep, (x,), backward_dropout)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; they get no gradient."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match {x.shape}")
    keep = ~mask

    def backward_fill(g):
        return (g * keep,)
    return _make(np.where(mask, x.data.dtype.type(value), x.data), (x,), backward_fill)


# -- linear algebra and shapes ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports ``[m,k]@[k,n]``, ``[B,m,k]@[k,n]`` and ``[B,m,k]@[B,k,n]``."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or (a.ndim == 2 and b.ndim == 3):
        raise DimensionError(f"unsupported matmul ranks: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    if b.ndim == 2:
        def backward_matmul(g):
            ga = g @ b.data.T
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def backward_matmul(g):
            return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g
    return _make(out, (a, b), backward_matmul)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {x.shape}")

    def backward_transpose(g):
        return (np.swapaxes(g, -1, -2),)
    return _make(np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,), backward_transpose)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape

    def backward_reshape(g):
        return (g.reshape(old),)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make(data, (x,), backward_reshape)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``[b, L, d] -> [b*h, L, d/h]``."""
    b, length, d = x.shape
    dh = d // n_heads

    def backward_split(g):
        return (g.reshape(b, n_heads, length, dh).transpose(0, 2, 1, 3).reshape(b, length, d),)
    data = x.data.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3).reshape(b * n_heads, length, dh)
    return _make(data, (x,), backward_split)


def merge_heads(x: Tensor, n_heads: int) -> Tensor:
    """Inverse of :func:`split_heads`."""
    bh, length, dh = x.shape
    b = bh // n_heads

    def backward_merge(g):
        return (g.reshape(b, length, n_heads, dh).transpose(0, 2, 1, 3).reshape(bh, length, dh),)
    data = x.data.reshape(b, n_heads, length, dh).transpose(0, 2, 1, 3).reshape(b, length, n_heads * dh)
    return _make(data, (x,), backward_merge)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward_concat(g):
        return tuple(np.split(g, bounds, axis=axis))
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in xs]}") from None
    return _make(data, tuple(xs), backward_concat)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward_embedding(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)
    return _make(table.data[ids], (table,), backward_embedding)


# -- reductions and normalisation ------------------------------------------


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def backward_sum(g):
        return (np.broadcast_to(g, x.shape).copy(),)
    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward_sum)


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward_mean(g):
        return (np.full(x.shape, g / n, dtype=x.data.dtype),)
    return _make(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), backward_mean)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``[b, L, d]`` counting only positions where ``mask`` is 1."""
    mask = np.asarray(mask, dtype=x.data.dtype)
    if mask.shape != x.shape[:2]:
        raise DimensionError(f"mask shape {mask.shape} does not match {x.shape[:2]}")
    counts = mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ContractError("masked_mean over a row with no real positions")
    w = mask / counts

    def backward_masked_mean(g):
        return (w[:, :, None] * g[:, None, :],)
    return _make(np.einsum("bl,bld->bd", w, x.data), (x,), backward_masked_mean)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward_softmax(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _make(y, (x,), backward_softmax)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward_log_softmax(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    return _make(y, (x,), backward_log_softmax)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward_layer_norm(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward_layer_norm)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[N, C]``; rows with weight 0 contribute nothing. The
    log-softmax is fused so large logits never overflow.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, C] logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match {n} rows")
    dtype = logits.data.dtype
    w = np.ones(n, dtype=dtype) if weights is None else np.asarray(weights, dtype=dtype).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy needs at least one row with positive weight")
    safe_t = np.where(w > 0, targets, 0)
    if ((safe_t < 0) | (safe_t >= c)).any():
        raise ContractError(f"target id out of range for {c} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, safe_t]
    value = np.asarray((w * nll).sum() / total, dtype=logits.data.dtype)

    def backward_cross_entropy(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, safe_t] -= 1.0
        return (p * (w / total)[:, None] * g,)
    return _make(value, (logits,), backward_cross_entropy)


# -- backward pass ----------------------------------------------------------


class Tape:
    """Topologically ordered record of the ops reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in reversed(node.parents):
                if p.id not in seen:
                    stack.append((p, False))
        return cls(order)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = np.asarray(pg, dtype=parent.data.dtype)
        return grads


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar ``root``.

    Returns the gradient map (node id -> array) and also stores each leaf's
    gradient on its ``.grad`` attribute. Leaves that are unreachable keep
    whatever ``.grad`` they had.
    """
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.from_root(root)
    grads = tape.backward(root)
    for node in tape.nodes:
        if node.requires_grad and node.backward_fn is None:
            node.grad = grads.get(node.id, np.zeros_like(node.data))
    return grads


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
    coords_per_param: int = 16,
    seed: int = 0,
    numeric: Callable[[], Tensor] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes the scalar loss from the current values of ``params``.
    Up to ``coords_per_param`` random coordinates of each parameter are
    perturbed in place and restored afterwards. ``numeric``, when given, is
    the objective the differences are taken on; the analytic side always
    comes from ``f``. That is how a graph containing a reversal is checked
    against the objective its gradients are supposed to follow.
    """
    if h <= 0:
        raise ConfigError("finite difference step must be positive")
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericalError("loss is not finite")
    for p in params:
        p.grad = None
    backward(loss)
    numeric_f = numeric or f
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        picks = rng.choice(n, size=min(n, coords_per_param), replace=False)
        for idx in picks:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + h
                up = numeric_f().item()
                flat[idx] = orig - h
                down = numeric_f().item()
            flat[idx] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError("loss is not finite under perturbation")
            numeric = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[idx])
            worst = max(worst, abs(a - numeric) / (abs(a) + abs(numeric) + 1e-8))
    return worst
