"""Minimal reverse-mode autograd kernel over numpy arrays.

Storage and arithmetic are float32; reductions (sums, means, softmax
denominators, normalization statistics, attention value contractions)
accumulate in float64 before casting back. Every op checks its output for
NaN/Inf and raises FloatingPointError on the first non-finite value, so
numerical failures surface at the op that produced them rather than steps
later.

The kernel is deliberately small: it provides exactly the ops needed for a
masked-attention forecaster (matmul, elementwise arithmetic, gather, stack,
where, relu, layer_norm, masked_softmax, attention, mse_loss) plus
``grad_check`` for verifying gradients against central finite differences.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "AttnMask",
    "matmul",
    "gather",
    "stack",
    "where",
    "layer_norm",
    "masked_softmax",
    "attention",
    "mse_loss",
    "dropout",
    "no_grad",
    "grad_check",
    "MASK_FILL_VALUE",
]

# Pre-softmax substitution for disallowed positions. Large enough that the
# exponential underflows to exactly zero for any realistic score scale.
MASK_FILL_VALUE = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _quiet():
    # Overflow and invalid results are detected by the explicit finiteness
    # check on every op output; numpy's own warnings would be redundant noise.
    return np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore")


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # A float64 sum of float32 data cannot overflow, so the sum is finite
    # exactly when every element is; this avoids materializing a boolean
    # array the size of the operand on every op.
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    return arr


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    return np.ascontiguousarray(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(np.float32, copy=False)


class Tensor:
    """A float32 array plus the tape metadata needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        _check_finite(self.data, "tensor")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar tensor through the recorded tape."""
        if self.data.shape != ():
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(self, False)]
        while stack_:
            node, processed = stack_.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack_.append((p, False))
        self.grad = np.ones((), dtype=np.float32)
        with _quiet():
            for node in reversed(topo):
                if node._backward is not None and node.grad is not None:
                    node._backward(node.grad)

    # ---- operator sugar -------------------------------------------------

    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other)))

    def __rsub__(self, other):
        return _add(_wrap(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return _mul(_wrap(other), self)

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return _transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _mean(self, axis, keepdims)

    def relu(self) -> "Tensor":
        return _relu(self)


@dataclass(frozen=True)
class AttnMask:
    """Boolean allow-mask over attention key positions.

    ``allowed`` must broadcast against the score array; True marks positions
    the query may attend to. Rows with no allowed position are rejected by
    ``masked_softmax``.
    """

    allowed: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.allowed, dtype=bool)
        object.__setattr__(self, "allowed", arr)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    with _quiet():
        out.data = _check_finite(np.asarray(data, dtype=np.float32), op)
    out.grad = None
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(p for p in parents if p.requires_grad) if needs else ()
    out._backward = backward if needs else None
    return out


def _add(a: Tensor, b: Tensor) -> Tensor:
    with _quiet():
        data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), backward)


def _neg(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, "neg", (a,), backward)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    with _quiet():
        data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), backward)


def _relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return _make(data, "relu", (a,), backward)


def _reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), "reshape", (a,), backward)


def _transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), "transpose", (a,), backward)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _sum(a: Tensor, axis, keepdims: bool) -> Tensor:
    data = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(
                _expand_reduced(g, a.data.shape, axis, keepdims)))

    return _make(data, "sum", (a,), backward)


def _mean(a: Tensor, axis, keepdims: bool) -> Tensor:
    data = np.mean(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(
                _expand_reduced(g, a.data.shape, axis, keepdims) / np.float32(count)))

    return _make(data, "mean", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting. Operands must be >= 2-D."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    with _quiet():
        data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, "matmul", (a, b), backward)


def gather(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array (embedding read)."""
    table = _wrap(table)
    if table.ndim != 2:
        raise ValueError("gather expects a 2-D table")
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("gather index out of range")
    data = table.data[idx]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate(gt)

    return _make(data, "gather", (table,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors of identical shape along a new axis."""
    ts = [_wrap(t) for t in tensors]
    if not ts:
        raise ValueError("stack requires at least one tensor")
    data = np.stack([t.data for t in ts], axis=axis)

    def backward(g: np.ndarray) -> None:
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(ts, pieces):
            if t.requires_grad:
                t._accumulate(np.ascontiguousarray(piece))

    return _make(data, "stack", tuple(ts), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Elementwise select: ``cond ? a : b``. ``cond`` is a constant bool array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    data = np.where(cond, a.data, b.data)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0).astype(np.float32), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g).astype(np.float32), b.data.shape))

    return _make(data, "where", (a, b), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale and shift.

    Statistics are computed in float64.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    n = x.data.shape[-1]
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(np.float32)
    data = xhat * gain.data + bias.data
    inv32 = inv.astype(np.float32)

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            gain._accumulate(np.sum(g * xhat, axis=red, dtype=np.float64).astype(np.float32))
        if bias.requires_grad:
            red = tuple(range(g.ndim - 1))
            bias._accumulate(np.sum(g, axis=red, dtype=np.float64).astype(np.float32))
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = np.sum(dxhat, axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            s2 = np.sum(dxhat * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            dx = (inv32 / n) * (n * dxhat - s1 - xhat * s2)
            x._accumulate(dx.astype(np.float32))

    return _make(data, "layer_norm", (x, gain, bias), backward)


def masked_softmax(scores: Tensor, mask: AttnMask | np.ndarray) -> Tensor:
    """Softmax over the last axis with disallowed positions forced to zero.

    Disallowed scores are substituted with ``MASK_FILL_VALUE`` before the max
    shift, their exponentials are pinned to exactly 0.0, and the denominator
    is accumulated in float64. Raises ValueError if any row has no allowed
    position.
    """
    scores = _wrap(scores)
    allowed = mask.allowed if isinstance(mask, AttnMask) else np.asarray(mask, dtype=bool)
    try:
        joint = np.broadcast_shapes(allowed.shape, scores.data.shape)
    except ValueError:
        joint = None
    if joint != scores.data.shape:
        raise ValueError(
            f"mask shape {allowed.shape} does not broadcast to scores "
            f"shape {scores.data.shape}")
    # Row emptiness and the ops below broadcast identically, so both run on
    # the compact mask rather than a materialized full-size copy.
    if allowed.all():
        e = scores.data - scores.data.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
    else:
        if not allowed.any(axis=-1).all():
            raise ValueError("masked_softmax: at least one row has all positions masked")
        sub = np.where(allowed, scores.data, np.float32(MASK_FILL_VALUE))
        np.subtract(sub, sub.max(axis=-1, keepdims=True), out=sub)
        e = np.where(allowed, sub, np.float32(0.0))
        np.exp(e, out=e)
        # exp(0) at a masked position times False pins it to exactly 0.0.
        np.multiply(e, allowed, out=e)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    # e is this function's own buffer, so the normalization can run in place;
    # masked entries stay exactly 0.0 under division.
    w = np.divide(e, denom.astype(np.float32), out=e)

    def backward(g: np.ndarray) -> None:
        if scores.requires_grad:
            inner = np.sum(g * w, axis=-1, keepdims=True, dtype=np.float64).astype(np.float32)
            scores._accumulate(w * (g - inner))

    return _make(w, "masked_softmax", (scores,), backward)


def _attention_fused(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
                     allowed: np.ndarray) -> np.ndarray:
    """Inference-only attention with the op-by-op route's temporaries and
    per-op checks collapsed.

    Masked positions carry exactly-zero weight, so they contribute nothing to
    the float32 value contraction and masked attention agrees with attention
    over physically deleted keys to within summation-order noise, far inside
    the 1e-6 equivalence bound. The softmax denominator still accumulates in
    float64; normalization divides the contracted values rather than the
    weights, which touches tq*dv numbers instead of tq*tk.
    """
    d = q.shape[-1]
    scores = (q @ keys.swapaxes(-1, -2)) * np.float32(1.0 / np.sqrt(d))
    full = bool(allowed.all())
    if not full:
        if not allowed.any(axis=-1).all():
            raise ValueError("masked_softmax: at least one row has all positions masked")
        scores = np.where(allowed, scores, np.float32(MASK_FILL_VALUE))
    mx = scores.max(axis=-1, keepdims=True)
    # The max shift only matters when exp could overflow or every entry of
    # some row could underflow to zero; skipping it otherwise saves a full
    # pass and exp(x)/sum(exp(x)) is the same quantity either way.
    if not -80.0 < float(mx.min()) or not float(mx.max()) < 80.0:
        np.subtract(scores, mx, out=scores)
    e = scores
    np.exp(e, out=e)
    if not full:
        # exp at a masked position times False pins it to exactly 0.0.
        np.multiply(e, allowed, out=e)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    ctx = e @ values
    ctx /= denom
    return ctx


def attention(query: Tensor, keys: Tensor, values: Tensor,
              mask: AttnMask | np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with an optional allow-mask over keys.

    ``query`` may be a single vector ``(d,)`` against ``keys (n, d)`` and
    ``values (n, dv)``, or batched ``(..., tq, d)`` against ``(..., tk, d)``
    and ``(..., tk, dv)``. Scores are scaled by 1/sqrt(d). Masked positions
    get exactly-zero weight, so they contribute nothing to the value
    contraction and masking a key matches deleting it to within 1e-6. Under
    ``no_grad`` a fused single-pass implementation is used; with gradients
    enabled the op-by-op route accumulates the contraction in float64.
    """
    query, keys, values = _wrap(query), _wrap(keys), _wrap(values)
    single = query.ndim == keys.ndim - 1
    q = query.reshape((1,) + query.data.shape) if single else query
    d = q.data.shape[-1]
    if keys.data.shape[-1] != d:
        raise ValueError(f"query dim {d} does not match key dim {keys.data.shape[-1]}")
    if not _grad_enabled:
        allowed = mask.allowed if isinstance(mask, AttnMask) else mask
        if allowed is None:
            allowed = np.ones(keys.data.shape[-2:-1], dtype=bool)
        allowed = np.asarray(allowed, dtype=bool)
        score_shape = (np.broadcast_shapes(q.data.shape[:-2], keys.data.shape[:-2])
                       + (q.data.shape[-2], keys.data.shape[-2]))
        try:
            joint = np.broadcast_shapes(allowed.shape, score_shape)
        except ValueError:
            joint = None
        if joint != score_shape:
            raise ValueError(
                f"mask shape {allowed.shape} does not broadcast to scores "
                f"shape {score_shape}")
        with _quiet():
            data = _attention_fused(q.data, keys.data, values.data, allowed)
        out = _make(data, "attention", (q, keys, values), None)
    else:
        scores = _scale(matmul(q, _swap_last(keys)), 1.0 / np.sqrt(d))
        if mask is None:
            mask = np.ones(scores.data.shape[-1:], dtype=bool)
        weights = masked_softmax(scores, mask)
        out = _weighted_values(weights, values)
    if single:
        out = out.reshape(out.data.shape[1:])
    return out


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return _transpose(t, tuple(axes))


def _scale(t: Tensor, s: float) -> Tensor:
    sf = np.float32(s)

    def backward(g: np.ndarray) -> None:
        if t.requires_grad:
            t._accumulate(g * sf)

    with _quiet():
        data = t.data * sf
    return _make(data, "scale", (t,), backward)


def _weighted_values(weights: Tensor, values: Tensor) -> Tensor:
    """``weights @ values`` with float64 accumulation over the key axis.

    Exact zeros in the weights then contribute exactly nothing, which makes
    masked attention bit-equal to attention over physically deleted keys.
    """
    if weights.data.shape[-1] != values.data.shape[-2]:
        raise ValueError(
            f"attention shape mismatch: weights {weights.data.shape} "
            f"vs values {values.data.shape}")
    with _quiet():
        data = (weights.data.astype(np.float64)
                @ values.data.astype(np.float64)).astype(np.float32)

    def backward(g: np.ndarray) -> None:
        if weights.requires_grad:
            gw = g @ np.swapaxes(values.data, -1, -2)
            weights._accumulate(_unbroadcast(gw, weights.data.shape))
        if values.requires_grad:
            gv = np.swapaxes(weights.data, -1, -2) @ g
            values._accumulate(_unbroadcast(gv, values.data.shape))

    return _make(data, "attention", (weights, values), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, accumulated in float64, returned as a scalar tensor."""
    pred = _wrap(pred)
    tgt = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float32)
    if tgt.shape != pred.data.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.data.shape} vs {tgt.shape}")
    with _quiet():
        diff = pred.data - tgt
        data = np.mean(diff.astype(np.float64) ** 2)

    def backward(g: np.ndarray) -> None:
        if pred.requires_grad:
            pred._accumulate((2.0 / diff.size) * diff * g)

    return _make(data, "mse_loss", (pred,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Identity when rate <= 0 or gradients are disabled."""
    if rate <= 0.0 or not _grad_enabled:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.data.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    return _mul(x, Tensor(keep))


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray,
               step: float = 1e-3) -> float:
    """Compare autograd against central finite differences.

    ``f`` maps a tensor to a scalar tensor. Returns the maximum relative
    error over all coordinates, where the denominator is floored at 1.0 so
    near-zero gradients are compared absolutely.
    """
    x = Tensor(np.asarray(point, dtype=np.float32), requires_grad=True)
    y = f(x)
    if y.data.shape != ():
        raise ValueError("grad_check requires f to return a scalar tensor")
    y.backward()
    auto = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    fd = np.zeros(flat.size, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(x.data)).data)
            flat[i] = orig - step
            fm = float(f(Tensor(x.data)).data)
            flat[i] = orig
            fd[i] = (fp - fm) / (2.0 * step)
    auto_flat = auto.reshape(-1).astype(np.float64)
    denom = np.maximum(np.maximum(np.abs(auto_flat), np.abs(fd)), 1.0)
    return float(np.max(np.abs(auto_flat - fd) / denom))
