"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the model is a :class:`Tensor`: a numpy array
plus the closure needed to push gradients back to its parents.  Operations
accept an optional leading batch axis; row-wise ops act on the last axis.

The op set is deliberately small (what attention, layer norm and
cross-entropy need).  Broadcasting is limited to adding a vector along the
last axis and to a 2-D right operand in :func:`matmul`.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

NEG_INF = -np.inf

_grad_enabled = True


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A graph node: cached output value, gradient slot and parents."""

    __slots__ = ("data", "grad", "parents", "op", "_backward", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._backward: Callable[[np.ndarray], None] | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = backward
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Interior nodes get their gradients freed once consumed, so only leaves
    (parameters) keep ``grad`` afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        node.grad = None


# ---------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    def bw(g):
        a._accumulate(g * c)

    return _make(a.data * c, (a,), "scale", bw)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` a vector broadcast along the last axis."""
    if bias.data.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")

    def bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(x.data + bias.data, (x, bias), "add_bias", bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences stay clean."""
    u = x.data
    u2 = u * u
    t = u2 * 0.044715
    t += 1.0
    t *= u
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= u
    out *= 0.5

    def bw(g):
        # d/du = 0.5 (1 + t) + 0.5 u (1 - t^2) c (1 + 3 * 0.044715 u^2)
        d = u2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C
        d *= u
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= g
        x._accumulate(d)

    return _make(out, (x,), "gelu", bw)


def tensor_sum(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.shape))

    return _make(np.array(x.data.sum()).reshape(1, 1), (x,), "sum", bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared, e.g. a
    weight) or has exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} do not agree")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), "matmul", bw)


def transpose_last(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(x.data, -1, -2), (x,), "transpose", bw)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., heads, L, D/heads)."""
    *lead, length, d = x.shape
    if d % heads:
        raise ShapeError(f"head count {heads} does not divide model dim {d}")
    dh = d // heads
    out = np.moveaxis(x.data.reshape(*lead, length, heads, dh), -2, -3)

    def bw(g):
        x._accumulate(np.moveaxis(g, -3, -2).reshape(x.shape))

    return _make(np.ascontiguousarray(out), (x,), "split_heads", bw)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`."""
    *lead, heads, length, dh = x.shape
    out = np.moveaxis(x.data, -3, -2).reshape(*lead, length, heads * dh)

    def bw(g):
        x._accumulate(np.moveaxis(g.reshape(*lead, length, heads, dh), -2, -3))

    return _make(out, (x,), "merge_heads", bw)


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along the token axis (second to last); repeats allowed."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data[..., index, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        # scatter along the token axis: move it to the front for np.add.at
        moved = np.moveaxis(gx, -2, 0)
        np.add.at(moved, index, np.moveaxis(g, -2, 0))
        x._accumulate(gx)

    return _make(out, (x,), "take_rows", bw)


def expand_batch(x: Tensor, lead: tuple[int, ...]) -> Tensor:
    """Repeat ``x`` along new leading axes ``lead`` (e.g. a latent per window)."""
    if not lead:
        return x
    out = np.broadcast_to(x.data, (*lead, *x.shape)).copy()

    def bw(g):
        x._accumulate(g.reshape(-1, *x.shape).sum(axis=0))

    return _make(out, (x,), "expand", bw)


def mean_rows(x: Tensor) -> Tensor:
    """Mean over the token axis: (..., L, D) -> (..., D)."""
    n = x.shape[-2]

    def bw(g):
        x._accumulate(np.broadcast_to(g[..., None, :] / n, x.shape))

    return _make(x.data.mean(axis=-2), (x,), "mean_rows", bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the token axis."""
    sizes = [p.shape[-2] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[..., lo:hi, :])

    return _make(np.concatenate([p.data for p in parts], axis=-2), tuple(parts), "concat", bw)


# ---------------------------------------------------------------- row-wise ops

def softmax_rows(a, allow_empty: bool = False) -> Tensor:
    """Row softmax over the last axis; ``-inf`` entries map to exactly 0.

    A row that is entirely ``-inf`` raises :class:`InvalidMaskError` unless
    ``allow_empty`` is set, in which case that row becomes all zeros (used
    for windows whose keys are all padding).
    """
    a = as_tensor(a)
    x = a.data
    mx = x.max(axis=-1, keepdims=True)
    empty = ~np.isfinite(mx)
    if empty.any():
        if not allow_empty:
            raise InvalidMaskError("softmax row has no finite entry")
        mx = np.where(empty, 0.0, mx)
    p = x - mx
    np.exp(p, out=p)
    s = p.sum(axis=-1, keepdims=True)
    if empty.any():
        s[empty] = 1.0
    p /= s

    def bw(g):
        # masked entries have p == 0, so their gradient is exactly 0
        ga = g - np.einsum("...i,...i->...", g, p)[..., None]
        ga *= p
        a._accumulate(ga)

    return _make(p, (a,), "softmax", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise ShapeError("layer_norm over an empty axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs feature dim {d}")
    xhat = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat *= rstd
    out = xhat * gain.data
    out += bias.data

    def bw(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None] / d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= rstd
            x._accumulate(gx)

    return _make(out, (x, gain, bias), "layer_norm", bw)


def apply_score_mask(a: Tensor, keep: np.ndarray) -> Tensor:
    """Set entries where ``keep`` is False to ``-inf``; zero gradient there."""
    keep = np.broadcast_to(keep, a.shape)
    out = np.where(keep, a.data, NEG_INF)

    def bw(g):
        a._accumulate(np.where(keep, g, 0.0))

    return _make(out, (a,), "mask", bw)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean of per-row softmax cross-entropy.

    ``logits`` has shape (..., K); ``labels`` the leading shape with integer
    classes.  ``weights`` (same shape as labels, default ones) masks rows out;
    the result is ``sum(w * nll) / sum(w)``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside 0..{k - 1}")
    w = np.ones(labels.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy over zero weighted rows")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum() / total

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
        logits._accumulate(g.reshape(()) * (w / total)[..., None] * (p - onehot))

    return _make(np.array(loss).reshape(1, 1), (logits,), "cross_entropy", bw)


def linear_combination(terms: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """``sum(c_i * t_i)`` over equally-shaped tensors."""
    if len(terms) != len(coeffs) or not terms:
        raise ContractError("linear_combination needs matching nonempty terms/coeffs")
    out = np.zeros_like(terms[0].data)
    for t, c in zip(terms, coeffs):
        _check_same(terms[0], t, "linear_combination")
        out = out + c * t.data

    def bw(g):
        for t, c in zip(terms, coeffs):
            if t.requires_grad:
                t._accumulate(c * g)

    return _make(out, tuple(terms), "lincomb", bw)


# ---------------------------------------------------------------- parameters

@dataclass
class ParamEntry:
    tensor: Tensor
    m: np.ndarray
    v: np.ndarray

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        g = self.tensor.grad
        return np.zeros_like(self.tensor.data) if g is None else g


@dataclass
class ParamStore:
    """Named trainable tensors plus their Adam moments."""

    entries: dict[str, ParamEntry] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.entries[name] = ParamEntry(t, np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.entries[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def items(self) -> Iterable[tuple[str, ParamEntry]]:
        return ((n, self.entries[n]) for n in self.names())

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.tensor.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: e.grad for n, e in self.items()}

    def num_values(self, prefix: str = "") -> int:
        return sum(e.value.size for n, e in self.entries.items() if n.startswith(prefix))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int | None = None) -> None:
    """Bias-corrected Adam update in place, then zero the gradients.

    ``t`` defaults to ``store.step + 1``; the store's step counter is set to
    ``t`` afterwards.
    """
    if t is None:
        t = store.step + 1
    if t < 1:
        raise ContractError("adam_step needs t >= 1 (bias correction divides by 1 - beta**t)")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for _, e in store.items():
        g = e.grad
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        e.v += (1.0 - beta2) * (g * g)
        e.tensor.data = e.tensor.data - lr * (e.m / bc1) / (np.sqrt(e.v / bc2) + eps)
    store.step = t
    store.zero_grad()


# ---------------------------------------------------------------- gradient oracle

def finite_diff_check(f: Callable[[], float], store: ParamStore, name: str,
                      index: tuple[int, ...] | int, h: float = 1e-5,
                      analytic: float | None = None) -> float:
    """Relative error between an analytic gradient entry and a central difference.

    ``f`` re-evaluates the scalar objective from the current store values.
    ``analytic`` defaults to the entry already sitting in the store's gradient
    slot (run :func:`backward` first).  Returns
    ``|analytic - fd| / max(1, |analytic|)``.
    """
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    entry = store.entries[name]
    idx = np.unravel_index(index, entry.value.shape) if isinstance(index, (int, np.integer)) else index
    if analytic is None:
        analytic = float(entry.grad[idx])
    arr = entry.tensor.data
    orig = arr[idx]
    try:
        arr[idx] = orig + h
        fp = float(f())
        arr[idx] = orig - h
        fm = float(f())
    finally:
        arr[idx] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError(f"objective not finite while perturbing {name}{idx}")
    fd = (fp - fm) / (2.0 * h)
    return abs(analytic - fd) / max(1.0, abs(analytic))
