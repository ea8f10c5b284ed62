"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a :class:`Tape` records every primitive
application (define-by-run), and :func:`backward` replays the records in
reverse, accumulating vector-Jacobian products.  Values are numpy arrays in
row-major order; the trailing axis is always the feature axis, and primitives
broadcast over any number of leading batch axes, so the same graph code
serves single sequences ``(n, p)`` and batched stacks ``(b, n, p)``.

Only first-order gradients are supported.  Anything that needs a derivative
of a derivative (e.g. divergence penalties) is built out of extra forward
passes instead, which keeps the engine honest and easy to verify against
finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined by a primitive."""


class NumericalError(FloatingPointError):
    """Raised when a primitive produces a NaN or infinity."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Handle to a node on a tape.  Cheap to copy, never mutated."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.idx].shape


class Tape:
    """Recording of a forward computation.

    ``params`` maps a parameter name to its leaf node index; gradients are
    reported keyed by these names.  Constants (inputs, labels, masks) are
    unnamed leaves and receive no gradient.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list = []
        self.params: dict[str, int] = {}

    def _record(self, value: np.ndarray, parents: tuple[int, ...], vjp) -> Tensor:
        self.values.append(value)
        self.parents.append(parents)
        self.vjps.append(vjp)
        return Tensor(self, len(self.values) - 1)

    def constant(self, value) -> Tensor:
        arr = _as_f64(value)
        _check_finite(arr, "constant")
        return self._record(arr, (), None)

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        arr = _as_f64(value)
        _check_finite(arr, f"param {name!r}")
        t = self._record(arr, (), None)
        self.params[name] = t.idx
        return t

    def param_dict(self, tensors: dict[str, np.ndarray], prefix: str = "") -> dict[str, Tensor]:
        return {k: self.param(prefix + k, v) for k, v in tensors.items()}


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError as exc:
        raise ShapeError(f"matmul cannot broadcast {av.shape} @ {bv.shape}") from exc
    _check_finite(out, "matmul")

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, bv.swapaxes(-1, -2)), av.shape)
        gb = _unbroadcast(np.matmul(av.swapaxes(-1, -2), g), bv.shape)
        return ga, gb

    return tape._record(out, (a.idx, b.idx), vjp)


def transpose_last(x: Tensor) -> Tensor:
    if x.value.ndim < 2:
        raise ShapeError(f"transpose_last needs rank >= 2, got {x.value.shape}")
    out = x.value.swapaxes(-1, -2).copy()
    return x.tape._record(out, (x.idx,), lambda g: (g.swapaxes(-1, -2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    try:
        out = av + bv
    except ValueError as exc:
        raise ShapeError(f"add cannot broadcast {av.shape} + {bv.shape}") from exc
    _check_finite(out, "add")
    return tape._record(
        out, (a.idx, b.idx),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    try:
        out = av - bv
    except ValueError as exc:
        raise ShapeError(f"sub cannot broadcast {av.shape} - {bv.shape}") from exc
    _check_finite(out, "sub")
    return tape._record(
        out, (a.idx, b.idx),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    tape = _same_tape(x, bias)
    xv, bv = x.value, bias.value
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ShapeError(f"add_bias: bias {bv.shape} does not match features of {xv.shape}")
    out = xv + bv
    _check_finite(out, "add_bias")
    return tape._record(
        out, (x.idx, bias.idx),
        lambda g: (g, g.reshape(-1, bv.shape[0]).sum(axis=0)),
    )


def mul_cols(x: Tensor, gain: Tensor) -> Tensor:
    """Multiply each feature column by a learned per-feature gain."""
    tape = _same_tape(x, gain)
    xv, gv = x.value, gain.value
    if gv.ndim != 1 or xv.shape[-1] != gv.shape[0]:
        raise ShapeError(f"mul_cols: gain {gv.shape} does not match features of {xv.shape}")
    out = xv * gv
    _check_finite(out, "mul_cols")
    return tape._record(
        out, (x.idx, gain.idx),
        lambda g: (g * gv, (g * xv).reshape(-1, gv.shape[0]).sum(axis=0)),
    )


def relu(x: Tensor) -> Tensor:
    xv = x.value
    out = np.maximum(xv, 0.0)
    mask = xv > 0.0
    return x.tape._record(out, (x.idx,), lambda g: (g * mask,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the trailing axis, with row-max subtraction for stability."""
    xv = x.value
    if xv.ndim < 1:
        raise ShapeError("softmax_rows needs rank >= 1")
    shifted = xv - xv.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    _check_finite(out, "softmax_rows")

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return x.tape._record(out, (x.idx,), vjp)


def center_rows(x: Tensor) -> Tensor:
    """Subtract the mean of each row (trailing axis)."""
    xv = x.value
    out = xv - xv.mean(axis=-1, keepdims=True)
    _check_finite(out, "center_rows")
    return x.tape._record(out, (x.idx,), lambda g: (g - g.mean(axis=-1, keepdims=True),))


def clip_rows_to_ball(x: Tensor, radius: float) -> Tensor:
    """Radially project each row onto the closed ball of the given radius.

    Rows with norm <= radius pass through unchanged; longer rows are rescaled
    to length exactly ``radius``.  The backward rule uses the projection
    Jacobian on rescaled rows and the identity elsewhere.
    """
    if not radius > 0.0:
        raise ValueError(f"clip radius must be positive, got {radius}")
    xv = x.value
    norms = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    over = norms > radius
    safe = np.where(norms > 0.0, norms, 1.0)
    factor = np.where(over, radius / safe, 1.0)
    out = xv * factor
    _check_finite(out, "clip_rows_to_ball")

    def vjp(g):
        unit = xv / safe
        radial = (g * unit).sum(axis=-1, keepdims=True) * unit
        return (np.where(over, factor * (g - radial), g),)

    return x.tape._record(out, (x.idx,), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols needs at least one operand")
    tape = _same_tape(*parts)
    lead = parts[0].value.shape[:-1]
    for p in parts:
        if p.value.shape[:-1] != lead:
            raise ShapeError("concat_cols operands disagree on leading shape")
    out = np.concatenate([p.value for p in parts], axis=-1)
    _check_finite(out, "concat_cols")
    widths = [p.value.shape[-1] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return tape._record(out, tuple(p.idx for p in parts), vjp)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.value * c
    _check_finite(out, "scale")
    return x.tape._record(out, (x.idx,), lambda g: (g * c,))


def sum_sq(x: Tensor) -> Tensor:
    xv = x.value
    out = np.asarray((xv * xv).sum())
    _check_finite(out, "sum_sq")
    return x.tape._record(out, (x.idx,), lambda g: (2.0 * g * xv,))


def dot(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"dot needs identical shapes, got {av.shape} and {bv.shape}")
    out = np.asarray((av * bv).sum())
    _check_finite(out, "dot")
    return tape._record(out, (a.idx, b.idx), lambda g: (g * bv, g * av))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(param) for every named parameter on the tape.

    The root must be scalar.  Parameters that do not influence the root get
    zero-filled gradients rather than being dropped.
    """
    if root.tape is not tape:
        raise ValueError("root tensor does not belong to this tape")
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")

    grads: list = [None] * len(tape.values)
    grads[root.idx] = np.ones_like(tape.values[root.idx])
    for idx in range(root.idx, -1, -1):
        g = grads[idx]
        if g is None or tape.vjps[idx] is None:
            continue
        parent_grads = tape.vjps[idx](g)
        for pidx, pg in zip(tape.parents[idx], parent_grads):
            if pg is None:
                continue
            if grads[pidx] is None:
                grads[pidx] = pg.copy() if isinstance(pg, np.ndarray) else np.asarray(pg)
            else:
                grads[pidx] = grads[pidx] + pg
        grads[idx] = None  # free memory as we go

    out: dict[str, np.ndarray] = {}
    for name, idx in tape.params.items():
        g = grads[idx]
        out[name] = np.zeros_like(tape.values[idx]) if g is None else np.asarray(g)
    return out


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators for Adam, keyed like the parameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One Adam update with bias correction; parameters change in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grads_to_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient dict so its global L2 norm is <= max_norm.

    Returns the pre-clip norm.  Mutates the gradient arrays in place.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def numeric_gradient(fn, params: dict[str, np.ndarray], h: float = 1e-6) -> dict[str, np.ndarray]:
    """Central finite-difference gradient of ``fn(params) -> float``.

    Reference implementation used to validate the reverse pass; O(#entries)
    function evaluations, so keep the inputs small.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = fn(params)
            flat_p[i] = orig - h
            dn = fn(params)
            flat_p[i] = orig
            flat_g[i] = (up - dn) / (2.0 * h)
        out[name] = g
    return out
