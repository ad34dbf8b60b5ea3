"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds its result through :func:`_record`, which links
the output to its inputs together with a closure mapping the output gradient to
input gradients.  :func:`backward` walks that graph in reverse topological
order.  Recording is disabled inside :func:`no_grad`, which is how inference
and finite-difference probes avoid building graphs.

Only the operations the transformer needs live here: elementwise add/sub/mul,
scaling, batched matmul, GELU, masked softmax, layer norm, embedding gather,
transpose/reshape, concat, sums and a fused cross-entropy.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ArityError,
    DegenerateSliceError,
    DegenerateTargetError,
    DeterminismError,
    DimensionError,
)

DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float) -> Tensor:
        return scale(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _record(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# --- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM instead of a per-batch loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out2 = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(out2, (a, b), bw2)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _record(out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out, dtype=DTYPE), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis, keepdims), 1.0 / float(n))


# --- normalisation -----------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``.

    ``mask`` is a boolean array broadcastable to ``x`` where True marks entries
    that take part; masked entries receive exactly zero weight.
    """
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    v = x.data
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        try:
            full = np.broadcast_to(mask, v.shape)
        except ValueError:
            raise DimensionError(f"softmax: mask {mask.shape} not broadcastable to {v.shape}") from None
        if not full.any(axis=axis).all():
            raise DegenerateSliceError("softmax: a slice has every entry masked")
        v = np.where(full, v, -np.inf)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match features of {x.shape}"
        )
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        rstd = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data
    n = v.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = rstd / n * (
                n * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _record(out, (x, gain, bias), bw)


# --- lookup and loss ---------------------------------------------------------


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` indexed by the integer array ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")
    vocab_shape = weight.shape

    def bw(g):
        gw = np.zeros(vocab_shape, dtype=DTYPE)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, vocab_shape[-1]))
        return (gw,)

    return _record(weight.data[ids], (weight,), bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    Positions whose target equals ``ignore_index`` are excluded from both the
    sum and the count.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise DegenerateTargetError("cross_entropy: every target position is ignored")
    v = logits.data
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    safe = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return ((p - onehot) * (keep[..., None] * (float(g) / count)),)

    return _record(np.asarray(loss, dtype=DTYPE), (logits,), bw)


# --- reverse pass ------------------------------------------------------------


def tape(root: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``root`` in topological order."""
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
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ArityError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --- finite-difference checking ---------------------------------------------


@dataclass
class GradCheckReport:
    errors: list[float] = field(default_factory=list)
    names: list[str] = field(default_factory=list)
    entries_checked: list[int] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_error <= tol

    def __str__(self) -> str:
        rows = [f"{n}: max rel err {e:.3e} over {k} entries" for n, e, k in zip(self.names, self.errors, self.entries_checked)]
        return "\n".join(rows)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    Relative error per entry is ``|a - n| / max(1, |a|, |n|)``.  With
    ``max_entries`` set, that many entries per parameter are sampled instead of
    sweeping all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    with no_grad():
        b1 = np.array(f().data, copy=True)
        b2 = np.array(f().data, copy=True)
    if not np.array_equal(b1, b2):
        raise DeterminismError("grad_check: two baseline evaluations of f differ")

    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check: every parameter must require grad")
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for k, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            an = float(a.reshape(-1)[i])
            worst = max(worst, abs(an - num) / max(1.0, abs(an), abs(num)))
        report.errors.append(worst)
        report.names.append(p.name or f"param{k}")
        report.entries_checked.append(int(idx.size))
    return report
