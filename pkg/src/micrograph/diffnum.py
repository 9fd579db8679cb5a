"""Dense float64 tensors with tape-recorded reverse-mode gradients, plus Adam.

Only the operations the training objective needs are provided. Every op
checks shapes eagerly, and every tensor rejects NaN/Inf at creation so a
numerical blow-up surfaces at the op that produced it.

Usage::

    x = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = sum_all(relu(x))
    backward(loss)
    x.grad  # array of ones
"""

from __future__ import annotations

import json
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_recorded", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, *, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._recorded = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable ops.

    Records are appended as ops execute, so inputs always precede their
    consumers and a reverse walk is a valid topological order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __len__(self) -> int:
        return len(self.records)

    def tensors(self):
        for rec in self.records:
            yield rec.output
            yield from rec.inputs

    def contains(self, t: Tensor) -> bool:
        return any(x is t for x in self.tensors())

    def clear(self) -> None:
        for rec in self.records:
            rec.output._recorded = False
        self.records.clear()


_local = threading.local()


def _ctx():
    if not hasattr(_local, "tape"):
        _local.tape = Tape()
        _local.grad_enabled = True
    return _local


def get_tape() -> Tape:
    return _ctx().tape


@contextmanager
def use_tape(tape: Tape):
    ctx = _ctx()
    prev = ctx.tape
    ctx.tape = tape
    try:
        yield tape
    finally:
        ctx.tape = prev


@contextmanager
def no_grad():
    ctx = _ctx()
    prev = ctx.grad_enabled
    ctx.grad_enabled = False
    try:
        yield
    finally:
        ctx.grad_enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    ctx = _ctx()
    needs = ctx.grad_enabled and any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=needs, _copy=False)
    if needs:
        ctx.tape.records.append(_Record(res, tuple(inputs), grad_fn))
        res._recorded = True
    return res


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"softmax temperature must be > 0, got {tau}")


# --- forward ops -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _make(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def spmm(m, x) -> Tensor:
    """Constant (dense or scipy sparse) matrix times a tensor; gradient flows to ``x`` only."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch {m.shape} @ {x.shape}")
    out = m @ x.data
    if sp.issparse(out):
        out = out.toarray()
    mt = m.T
    return _make(np.asarray(out), (x,), lambda g: (np.asarray(mt @ g),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a row vector of shape (D,) or (1, D) broadcast over rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
        bshape = b.shape
        return _make(a.data + b.data.reshape(1, -1), (a, b),
                     lambda g: (g, g.sum(axis=0).reshape(bshape)))
    raise ShapeError(f"add shape mismatch {a.shape} + {b.shape}")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul shape mismatch {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A))


elementwise_mul = mul


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    A = a.data
    return _make(np.log(A), (a,), lambda g: (g / A,))


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_op(a, tau: float, axis: int) -> Tensor:
    a = _as_tensor(a)
    _check_temperature(tau)
    if a.data.ndim != 2:
        raise ShapeError("softmax expects a matrix")
    y = _softmax(a.data / tau, axis)

    def grad(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y / tau,)

    return _make(y, (a,), grad)


def row_softmax(a, tau: float = 1.0) -> Tensor:
    return _softmax_op(a, tau, axis=1)


def col_softmax(a, tau: float = 1.0) -> Tensor:
    return _softmax_op(a, tau, axis=0)


def l2_normalize_rows(a) -> Tensor:
    """Rows scaled to unit length. Zero rows stay zero and pass zero gradient."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("l2_normalize_rows expects a matrix")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    zero = norms == 0
    safe = np.where(zero, 1.0, norms)
    y = np.where(zero, 0.0, a.data / safe)

    def grad(g):
        gx = (g - y * (g * y).sum(axis=1, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    return _make(y, (a,), grad)


def take_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    if isinstance(index, slice):
        idx = np.arange(a.shape[0])[index]
    else:
        idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("row index out of range")
    return _make(a.data[idx], (a,), grad)


def mean_rows(a, index_set=None) -> Tensor:
    """Mean of the selected rows (all rows when ``index_set`` is None), shape (D,)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("mean_rows expects a matrix")
    n = a.shape[0]
    idx = np.arange(n) if index_set is None else np.asarray(list(index_set), dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("empty index set")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("row index out of range")
    k = len(idx)

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g / k)
        return (out,)

    return _make(a.data[idx].sum(axis=0) / k, (a,), grad)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def trace_product(a, b) -> Tensor:
    """Tr(a^T b), i.e. the Frobenius inner product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"trace_product shape mismatch {a.shape}, {b.shape}")
    A, B = a.data, b.data
    return _make(np.array((A * B).sum()), (a, b), lambda g: (float(g) * B, float(g) * A))


# --- gradients -------------------------------------------------------------

def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires_grad leaf, then clear the tape."""
    tape = get_tape() if tape is None else tape
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if not loss.requires_grad or not loss._recorded:
        raise RuntimeError("backward called on a tensor that is not on the tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if not inp.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
            if inp._recorded:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    tape.clear()


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` with respect to ``x.data``."""
    out = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """Worst relative error between analytic and finite-difference gradients over ``inputs``."""
    tape = Tape()
    for x in inputs:
        x.grad = None
    with use_tape(tape):
        loss = fn()
        backward(loss, tape)
    worst = 0.0
    for x in inputs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        numeric = numerical_grad(fn, x, h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst


# --- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)

    def to_json(self) -> dict:
        return {
            "step": self.step, "lr": self.lr, "beta1": self.beta1,
            "beta2": self.beta2, "eps": self.eps,
            "first_moment": [_array_json(m) for m in self.first_moment],
            "second_moment": [_array_json(v) for v in self.second_moment],
        }

    @classmethod
    def from_json(cls, d: dict) -> "AdamState":
        return cls([_array_from_json(m) for m in d["first_moment"]],
                   [_array_from_json(v) for v in d["second_moment"]],
                   d["step"], d["lr"], d["beta1"], d["beta2"], d["eps"])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState):
    """One bias-corrected Adam update, applied in place. A missing gradient counts as zero."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimiser state differ in length")
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
             for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = b2 * state.second_moment[i] + (1.0 - b2) * g * g
        state.first_moment[i] = m
        state.second_moment[i] = v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# --- checkpoint blobs ------------------------------------------------------

CHECKPOINT_FORMAT = "micrograph-checkpoint"
CHECKPOINT_VERSION = 1


def _array_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": a.ravel().tolist()}


def _array_from_json(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def save_checkpoint(path, tensors: dict, adam: Optional[AdamState] = None, extra: Optional[dict] = None) -> None:
    """Write named tensors + optimiser state as JSON; floats round-trip exactly."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": {k: _array_json(t.data if isinstance(t, Tensor) else t) for k, t in tensors.items()},
        "adam": None if adam is None else adam.to_json(),
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(blob), encoding="utf-8")


def load_checkpoint(path):
    blob = json.loads(Path(path).read_text(encoding="utf-8"))
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    tensors = {k: _array_from_json(v) for k, v in blob["tensors"].items()}
    adam = None if blob["adam"] is None else AdamState.from_json(blob["adam"])
    return tensors, adam, blob["extra"]
