"""Dense rank-2 float64 tensors with reverse-mode automatic differentiation.

The engine is intentionally small: matrices only, a fixed set of primitives
(enough for affine layers, scaled dot-product attention, softmax losses and
Frobenius penalties), and an append-only tape that is replayed in reverse to
accumulate gradients. Every primitive checks its result for NaN/Inf and fails
loudly, so a diverging computation is caught at the op that produced it.

Gradients flow only while a `Tape` is active; evaluation code simply runs
without one (see `no_grad`). Gradient accumulation is additive, so parameters
reused many times in one graph (e.g. a weight applied at every solver stage)
receive the sum of all their contributions.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "NumericError",
    "ParameterSet",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "block_attention",
    "concat_rows",
    "frobenius_sq",
    "lincomb",
    "log_softmax_columns",
    "matmul",
    "mul",
    "no_grad",
    "relu",
    "scale",
    "select_columns",
    "softmax_columns",
    "sub",
    "sum_all",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value (NaN or Inf) appeared in a computation."""


class ContractError(ValueError):
    """An operation was invoked outside its contract."""


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"tensors are rank-2; got array of rank {arr.ndim}")
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        kind = "NaN" if np.isnan(arr).any() else "Inf"
        raise NumericError(f"{op}: non-finite result ({kind})")


class Tape:
    """Append-only record of backward rules in execution order.

    Because entries are appended as ops execute, the list is topologically
    sorted by construction; replaying it in reverse propagates gradients.
    `mark`/`truncate` let a caller discard a span of recorded ops, which the
    adaptive solver uses to drop rejected steps.
    """

    __slots__ = ("_entries", "_prev")

    active: "Tape | None" = None

    def __init__(self) -> None:
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._prev = None

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        self._prev = Tape.active
        Tape.active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape.active = self._prev
        self._prev = None

    def record(self, out: "Tensor", rule: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, rule))

    def mark(self) -> int:
        return len(self._entries)

    def truncate(self, mark: int) -> None:
        del self._entries[mark:]

    def run_backward(self) -> None:
        for out, rule in reversed(self._entries):
            g = out.grad
            if g is not None:
                rule(g)


class no_grad:
    """Context manager that suspends tape recording (evaluation mode)."""

    __slots__ = ("_prev",)

    def __enter__(self) -> None:
        self._prev = Tape.active
        Tape.active = None

    def __exit__(self, *exc) -> None:
        Tape.active = self._prev


class Tensor:
    """A rank-2 float64 array that can participate in gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = _as_matrix(data)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _result(data: np.ndarray, op: str, requires_grad: bool) -> Tensor:
    _check_finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = requires_grad
    t.grad = None
    return t


def _wants_grad(*tensors: Tensor) -> bool:
    if Tape.active is None:
        return False
    return any(t.requires_grad for t in tensors)


def _acc_own(t: Tensor, g: np.ndarray) -> None:
    # `g` is freshly allocated by the caller and may be stored directly.
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _acc_shared(t: Tensor, g: np.ndarray) -> None:
    # `g` aliases another tensor's grad buffer and must not be stored as-is.
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ for {a.data.shape} @ {b.data.shape}"
        )
    out = _result(a.data @ b.data, "matmul", _wants_grad(a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data

        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                _acc_own(a, g @ bd.T)
            if b.requires_grad:
                _acc_own(b, ad.T @ g)

        Tape.active.record(out, rule)
    return out


def affine(A: Tensor, x: Tensor, b: Tensor, c: Tensor | None = None,
           t: float = 0.0) -> Tensor:
    """Fused A @ x + b (+ c*t), biases broadcast over columns.

    One tape entry instead of three; the workhorse behind every layer.
    """
    if A.data.shape[1] != x.data.shape[0]:
        raise DimensionError(
            f"affine: weight {A.data.shape} incompatible with input {x.data.shape}"
        )
    d_out = A.data.shape[0]
    if b.data.shape != (d_out, 1):
        raise DimensionError(f"affine: bias shape {b.data.shape} != ({d_out}, 1)")
    out_data = A.data @ x.data
    out_data += b.data
    with_time = c is not None and t != 0.0
    if with_time:
        if c.data.shape != (d_out, 1):
            raise DimensionError(f"affine: time direction shape {c.data.shape} != ({d_out}, 1)")
        out_data += c.data * t
    operands = (A, x, b, c) if with_time else (A, x, b)
    out = _result(out_data, "affine", _wants_grad(*operands))
    if out.requires_grad:
        Ad, xd = A.data, x.data

        def rule(g: np.ndarray) -> None:
            if A.requires_grad:
                _acc_own(A, g @ xd.T)
            if x.requires_grad:
                _acc_own(x, Ad.T @ g)
            if b.requires_grad or (with_time and c.requires_grad):
                gs = g.sum(axis=1, keepdims=True)
                if with_time and c.requires_grad:
                    _acc_own(c, gs * t)
                if b.requires_grad:
                    _acc_own(b, gs)

        Tape.active.record(out, rule)
    return out


def _broadcast_mode(a: Tensor, b: Tensor, op: str) -> int:
    """0: same shape; 1: b is a column broadcast over a's columns; 2: mirrored."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return 0
    if sb == (sa[0], 1):
        return 1
    if sa == (sb[0], 1):
        return 2
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_mode(a, b, "add")
    out = _result(a.data + b.data, "add", _wants_grad(a, b))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                if mode == 2:
                    _acc_own(a, g.sum(axis=1, keepdims=True))
                else:
                    _acc_shared(a, g)
            if b.requires_grad:
                if mode == 1:
                    _acc_own(b, g.sum(axis=1, keepdims=True))
                else:
                    _acc_shared(b, g)

        Tape.active.record(out, rule)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_mode(a, b, "sub")
    out = _result(a.data - b.data, "sub", _wants_grad(a, b))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                if mode == 2:
                    _acc_own(a, g.sum(axis=1, keepdims=True))
                else:
                    _acc_shared(a, g)
            if b.requires_grad:
                if mode == 1:
                    _acc_own(b, -g.sum(axis=1, keepdims=True))
                else:
                    _acc_own(b, -g)

        Tape.active.record(out, rule)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"mul: elementwise product needs equal shapes, got {a.data.shape} and {b.data.shape}"
        )
    out = _result(a.data * b.data, "mul", _wants_grad(a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data

        def rule(g: np.ndarray) -> None:
            if a.requires_grad:
                _acc_own(a, g * bd)
            if b.requires_grad:
                _acc_own(b, g * ad)

        Tape.active.record(out, rule)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    if not math.isfinite(s):
        raise NumericError(f"scale: non-finite factor {s!r}")
    out = _result(a.data * s, "scale", _wants_grad(a))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            _acc_own(a, g * s)

        Tape.active.record(out, rule)
    return out


def relu(a: Tensor) -> Tensor:
    out = _result(np.maximum(a.data, 0.0), "relu", _wants_grad(a))
    if out.requires_grad:
        mask = a.data > 0.0

        def rule(g: np.ndarray) -> None:
            _acc_own(a, g * mask)

        Tape.active.record(out, rule)
    return out


def transpose(a: Tensor) -> Tensor:
    out = _result(np.ascontiguousarray(a.data.T), "transpose", _wants_grad(a))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            _acc_own(a, np.ascontiguousarray(g.T))

        Tape.active.record(out, rule)
    return out


def lincomb(tensors: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """sum_i coeffs[i] * tensors[i], all operands of one shape."""
    if len(tensors) != len(coeffs) or not tensors:
        raise ContractError("lincomb: need equally many tensors and coefficients, at least one")
    shape = tensors[0].data.shape
    cs = [float(c) for c in coeffs]
    if not all(math.isfinite(c) for c in cs):
        raise NumericError("lincomb: non-finite coefficient")
    acc = tensors[0].data * cs[0]
    for t, c in zip(tensors[1:], cs[1:]):
        if t.data.shape != shape:
            raise DimensionError(f"lincomb: shape {t.data.shape} != {shape}")
        acc += t.data * c
    out = _result(acc, "lincomb", _wants_grad(*tensors))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            for t, c in zip(tensors, cs):
                if t.requires_grad:
                    _acc_own(t, g * c)

        Tape.active.record(out, rule)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows: empty input")
    cols = parts[0].data.shape[1]
    for p in parts:
        if p.data.shape[1] != cols:
            raise DimensionError("concat_rows: column counts differ")
    out = _result(
        np.concatenate([p.data for p in parts], axis=0), "concat_rows", _wants_grad(*parts)
    )
    if out.requires_grad:
        offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

        def rule(g: np.ndarray) -> None:
            for p, i0, i1 in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    _acc_shared(p, g[i0:i1])

        Tape.active.record(out, rule)
    return out


def select_columns(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("select_columns: index list must be one-dimensional")
    out = _result(a.data[:, idx], "select_columns", _wants_grad(a))
    if out.requires_grad:
        shape = a.data.shape

        def rule(g: np.ndarray) -> None:
            full = np.zeros(shape)
            np.add.at(full, (slice(None), idx), g)
            _acc_own(a, full)

        Tape.active.record(out, rule)
    return out


def softmax_columns(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    sm = e / e.sum(axis=0, keepdims=True)
    out = _result(sm, "softmax_columns", _wants_grad(a))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            _acc_own(a, sm * (g - (sm * g).sum(axis=0, keepdims=True)))

        Tape.active.record(out, rule)
    return out


def log_softmax_columns(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
    out = _result(z - lse, "log_softmax_columns", _wants_grad(a))
    if out.requires_grad:
        sm = np.exp(out.data)

        def rule(g: np.ndarray) -> None:
            _acc_own(a, g - sm * g.sum(axis=0, keepdims=True))

        Tape.active.record(out, rule)
    return out


def frobenius_sq(a: Tensor) -> Tensor:
    val = float((a.data * a.data).sum())
    out = _result(np.array([[val]]), "frobenius_sq", _wants_grad(a))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            _acc_own(a, (2.0 * g[0, 0]) * a.data)

        Tape.active.record(out, rule)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _result(np.array([[float(a.data.sum())]]), "sum_all", _wants_grad(a))
    if out.requires_grad:
        shape = a.data.shape

        def rule(g: np.ndarray) -> None:
            _acc_own(a, np.full(shape, g[0, 0]))

        Tape.active.record(out, rule)
    return out


def block_attention(q: Tensor, k: Tensor, v: Tensor, blocks: int = 1) -> Tensor:
    """Scaled dot-product attention applied independently to column blocks.

    Inputs are head_dim x (blocks*L). Column block b holds one sequence; the
    op computes softmax_columns(K_b^T Q_b / sqrt(head_dim)) and V_b @ weights
    for every block without any cross-block mixing. With blocks == 1 this is
    plain single-sequence attention.
    """
    if not (q.data.shape == k.data.shape == v.data.shape):
        raise DimensionError(
            f"block_attention: q/k/v shapes differ: {q.data.shape}, {k.data.shape}, {v.data.shape}"
        )
    hd, total = q.data.shape
    if blocks < 1 or total % blocks != 0:
        raise ContractError(f"block_attention: {total} columns not divisible into {blocks} blocks")
    L = total // blocks
    inv_sqrt = 1.0 / math.sqrt(hd)

    # (B, hd, L) views; batched matmul beats einsum at these sizes.
    qb = q.data.reshape(hd, blocks, L).transpose(1, 0, 2)
    kb = k.data.reshape(hd, blocks, L).transpose(1, 0, 2)
    vb = v.data.reshape(hd, blocks, L).transpose(1, 0, 2)
    scores = np.matmul(kb.transpose(0, 2, 1), qb)  # (B, L, L): keys index rows
    scores *= inv_sqrt
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    out3 = np.matmul(vb, w)  # (B, hd, L)
    out = _result(out3.transpose(1, 0, 2).reshape(hd, total), "block_attention",
                  _wants_grad(q, k, v))
    if out.requires_grad:

        def rule(g: np.ndarray) -> None:
            gb = g.reshape(hd, blocks, L).transpose(1, 0, 2)
            if v.requires_grad:
                dv = np.matmul(gb, w.transpose(0, 2, 1))
                _acc_own(v, dv.transpose(1, 0, 2).reshape(hd, total))
            if q.requires_grad or k.requires_grad:
                dw = np.matmul(vb.transpose(0, 2, 1), gb)  # (B, L, L) grad wrt w
                ds = w * (dw - (w * dw).sum(axis=1, keepdims=True))
                ds *= inv_sqrt
                if q.requires_grad:
                    dq = np.matmul(kb, ds)
                    _acc_own(q, dq.transpose(1, 0, 2).reshape(hd, total))
                if k.requires_grad:
                    dk = np.matmul(qb, ds.transpose(0, 2, 1))
                    _acc_own(k, dk.transpose(1, 0, 2).reshape(hd, total))

        Tape.active.record(out, rule)
    return out


def attention_weights(q: Tensor, k: Tensor, v: Tensor, blocks: int = 1) -> np.ndarray:
    """Attention weight stack (blocks, L, L) for inspection; no tape recording."""
    hd, total = q.data.shape
    L = total // blocks
    q3 = q.data.reshape(hd, blocks, L)
    k3 = k.data.reshape(hd, blocks, L)
    scores = np.einsum("dbi,dbj->bij", k3, q3) / math.sqrt(hd)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Contributions accumulate additively, so tensors used several times in the
    graph receive the sum over all uses. Call ParameterSet.zero_grad between
    optimizer steps.
    """
    if loss.data.shape != (1, 1):
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = Tape.active
    if tape is None:
        raise ContractError("backward: no active tape")
    loss.grad = np.ones((1, 1))
    tape.run_backward()


class ParameterSet:
    """Named trainable tensors with deterministic iteration order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise ContractError(f"parameter name mismatch: {sorted(missing)}")
        for name, t in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != expected {t.data.shape}"
                )
            t.data = arr.copy()
