"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient::

    w = Tensor([2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_(hadamard(w, w))
    backward(tape, loss)
    w.grad  # array([4., 6.])

Only scalar-vs-tensor broadcasting is supported; every other elementwise
shape pair must match exactly.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised when an op sees or produces NaN/Inf values."""


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __float__(self) -> float:
        return self.item()

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other: float):
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


@dataclass
class Tape:
    """Ordered record of differentiable operations. Single use, single thread."""

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(op: str, *arrays: np.ndarray, where: str = "input") -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError(f"{op}: non-finite {where}")


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn) -> Tensor:
    _check_finite(op, out_data, where="output")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs_grad
    out.grad = None
    out.name = None
    tape = active_tape()
    if needs_grad and tape is not None:
        if tape.consumed:
            raise TapeError("cannot record on a tape that was already consumed")
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def _elementwise_pair(op: str, a: Tensor, b: Tensor) -> None:
    _check_finite(op, a.data, b.data)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # input was a single-element tensor broadcast against a larger one
    return np.full(shape, grad.sum())


def _result_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    return b.shape if a.size == 1 else a.shape


def _bcast(x: Tensor, shape: tuple[int, ...]) -> np.ndarray:
    return x.data if x.shape == shape else x.data.reshape(()) if x.size == 1 else x.data


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_finite("matmul", a.data, b.data)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_pair("add", a, b)
    shape = _result_shape(a, b)
    out = _bcast(a, shape) + _bcast(b, shape)
    return _emit("add", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_pair("sub", a, b)
    shape = _result_shape(a, b)
    out = _bcast(a, shape) - _bcast(b, shape)
    return _emit("sub", (a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _elementwise_pair("hadamard", a, b)
    shape = _result_shape(a, b)
    A, B = _bcast(a, shape), _bcast(b, shape)
    return _emit(
        "hadamard",
        (a, b),
        A * B,
        lambda g: (_unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    _check_finite("scale", x.data, np.asarray(c))
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def softplus(x: Tensor) -> Tensor:
    _check_finite("softplus", x.data)
    X = x.data
    out = np.logaddexp(0.0, X)
    sig = 0.5 * (1.0 + np.tanh(0.5 * X))
    return _emit("softplus", (x,), out, lambda g: (g * sig,))


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.data)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    _check_finite("log", x.data)
    X = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(X)
    return _emit("log", (x,), out, lambda g: (g / X,))


def sum_(x: Tensor) -> Tensor:
    _check_finite("sum", x.data)
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    _check_finite("mean", x.data)
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(shape, float(g) / n),))


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), slice(0, 3)))``."""
    _check_finite("slice", x.data)
    out = np.array(x.data[key])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _emit("slice", (x,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    _check_finite("concat", *(t.data for t in tensors))
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ----------------------------------------------- structural helpers (layers)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    _check_finite("reshape", x.data)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as err:
        raise ShapeError(f"reshape: cannot map {old} to {shape}") from err
    return _emit("reshape", (x,), out.copy(), lambda g: (g.reshape(old),))


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` of a 2-D tensor; repeated indices accumulate."""
    _check_finite("take_rows", x.data)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D input, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("take_rows", (x,), x.data[idx], bwd)


def pick(x: Tensor, cols) -> Tensor:
    """Per-row element ``x[b, cols[b]]`` of a 2-D tensor, shape (B,)."""
    _check_finite("pick", x.data)
    cols = np.asarray(cols, dtype=np.int64)
    if x.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"pick: shape mismatch {x.shape} vs {cols.shape}")
    rows = np.arange(x.shape[0])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[rows, cols] = g
        return (full,)

    return _emit("pick", (x,), x.data[rows, cols], bwd)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    _check_finite("log_softmax", x.data)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax: expected 2-D input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    soft = np.exp(out)
    return _emit("log_softmax", (x,), out, lambda g: (g - soft * g.sum(axis=1, keepdims=True),))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax on plain arrays (no tape)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


_PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scale": scale,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "slice": slice_,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "take_rows": take_rows,
    "pick": pick,
    "log_softmax": log_softmax,
    "identity": lambda x: x,
}


def forward_primitive(op_kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind in ("identity", "linear", None):
        return x
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor) -> None:
    """Fill ``.grad`` of every requires-grad tensor recorded on ``tape``.

    Tensors on the tape that ``loss`` does not depend on get a zero gradient.
    Existing gradients are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward: tape already consumed")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("backward: loss was not produced on this tape")
    tape.consumed = True

    produced = {id(node.output) for node in tape.nodes}
    for node in tape.nodes:
        node.output.grad = np.zeros(node.output.shape)
        for t in node.inputs:
            if t.requires_grad and id(t) not in produced:
                t.grad = np.zeros(t.shape)

    loss.grad = np.ones(loss.shape)
    for node in reversed(tape.nodes):
        g_out = node.output.grad
        if not g_out.any():
            continue
        for t, g in zip(node.inputs, node.backward_fn(g_out)):
            if g is not None and t.requires_grad:
                t.grad = t.grad + np.asarray(g, dtype=np.float64).reshape(t.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative deviation between tape gradients and central differences.

    ``f`` must rebuild its graph from ``x`` on every call and be deterministic;
    coordinates of ``x`` are perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    was = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            loss = f(x)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError("grad_check: f(x) is non-finite")
        if any(node.output is loss for node in tape.nodes):
            backward(tape, loss)
            analytic = np.array(x.grad, dtype=np.float64).ravel()
        else:
            analytic = np.zeros(x.size)

        flat = x.data.reshape(-1)
        numeric = np.empty(x.size)
        for i in range(x.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * step)
    finally:
        x.requires_grad = was
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ------------------------------------------------------------------- sampling


def _stream_words(parts) -> tuple[int, ...]:
    words = []
    for p in parts:
        if isinstance(p, (int, np.integer)):
            words.append(int(p) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(p).encode()))
    return tuple(words)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based (Philox) generator for ``stream`` under experiment ``seed``.

    Distinct stream ids give independent streams; the same (seed, stream)
    always reproduces the same draws.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=_stream_words(stream))
    return np.random.Generator(np.random.Philox(ss))


def _resolve_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return make_rng(int(rng))


def gaussian_sample(mu: Tensor, sigma: Tensor, rng) -> tuple[Tensor, Tensor]:
    """Reparameterized draw ``z = mu + sigma * eps`` with ``eps ~ N(0, I)``.

    ``rng`` is an integer seed or a numpy Generator. ``eps`` carries no
    gradient.
    """
    if mu.shape != sigma.shape:
        raise ShapeError(f"gaussian_sample: shape mismatch {mu.shape} vs {sigma.shape}")
    if np.any(sigma.data < 0):
        raise ValueError("gaussian_sample: sigma must be non-negative")
    eps = Tensor(_resolve_rng(rng).standard_normal(mu.shape))
    return add(mu, hadamard(sigma, eps)), eps
