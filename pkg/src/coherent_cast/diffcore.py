"""Small dense reverse-mode differentiation core.

Values are 2-D float64 numpy arrays.  Operations executed inside a
``with Tape() as tape:`` block are recorded; ``tape.backward(loss)``
replays the record in reverse and accumulates into ``Param.grad``.
Outside a tape the same functions just evaluate, which is what inference
and finite-difference checks use.
"""

from __future__ import annotations

import contextvars
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CoherentCastError, DimensionMismatch, NonFiniteLoss

_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("coherent_cast_tape", default=None)

CHECKPOINT_FORMAT = "coherent-cast-params"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Tensor{tag} shape={self.shape}>"

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


class Param(Tensor):
    """Trainable leaf.  ``grad`` always has the value's shape."""

    __slots__ = ("grad",)

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"<Param {self.name} shape={self.shape}>"


@dataclass
class _Entry:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations for one forward/backward pair."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self._token = None
        self._used = False

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple, vjp) -> None:
        self.entries.append(_Entry(out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        if self._used:
            raise CoherentCastError("tape already consumed; run a new forward pass")
        if loss.value.size != 1:
            raise DimensionMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.value).all():
            raise NonFiniteLoss(f"loss is {loss.item()}")
        self._used = True

        params = {}
        for entry in self.entries:
            for t in entry.inputs:
                if isinstance(t, Param):
                    params[id(t)] = t
        for p in params.values():
            p.grad = np.zeros_like(p.value)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            in_grads = entry.vjp(g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if isinstance(t, Param):
                    t.grad += gi
                else:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi
        self.entries.clear()


def active_tape() -> Tape | None:
    return _ACTIVE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(value: np.ndarray, inputs: tuple, vjp) -> Tensor:
    tape = _ACTIVE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def custom(inputs: Sequence[Tensor], value: np.ndarray, vjp) -> Tensor:
    """Record an externally computed op; ``vjp(g)`` returns one grad per input."""
    return _emit(np.asarray(value, dtype=np.float64), tuple(inputs), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(ax for ax, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- linear ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` with ``b`` a single row broadcast over the rows of ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[1] != W.shape[0] or b.shape != (1, W.shape[1]):
        raise DimensionMismatch(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.value, W.value
    return _emit(
        xv @ Wv + b.value,
        (x, W, b),
        lambda g: (g @ Wv.T, xv.T @ g, g.sum(axis=0, keepdims=True)),
    )


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _emit(a.value.T.copy(), (a,), lambda g: (g.T,))


# ------------------------------------------------------------ nonlinearities


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    y = np.empty_like(v)
    pos = v >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    y[~pos] = ev / (1.0 + ev)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.value)
    return _emit(np.abs(x.value), (x,), lambda g: (g * sign,))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _emit(v * v, (x,), lambda g: (2.0 * g * v,))


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


# ----------------------------------------------------------- index/reduce ops


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    n_rows = x.shape[0]

    def vjp(g):
        gx = np.zeros((n_rows, g.shape[1]))
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.value[idx], (x,), vjp)


def take_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    n_cols = x.shape[1]

    def vjp(g):
        gx = np.zeros((g.shape[0], n_cols))
        gx[:, start:stop] = g
        return (gx,)

    return _emit(x.value[:, start:stop].copy(), (x,), vjp)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])
    value = np.vstack([p.value for p in parts])
    return _emit(value, tuple(parts), lambda g: [g[a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def concat_cols(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    value = np.hstack([p.value for p in parts])
    return _emit(value, tuple(parts), lambda g: [g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def sum_rows(x) -> Tensor:
    """Row sums as a column vector."""
    x = as_tensor(x)
    n_cols = x.shape[1]
    return _emit(x.value.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, n_cols, axis=1),))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(x.value.sum().reshape(1, 1), (x,), lambda g: (np.full(shape, g.item()),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, size = x.shape, x.value.size
    return _emit(x.value.mean().reshape(1, 1), (x,), lambda g: (np.full(shape, g.item() / size),))


def segment_matrix(segments, n_segments: int) -> np.ndarray:
    seg = np.asarray(segments, dtype=np.intp)
    onehot = np.zeros((n_segments, seg.size))
    onehot[seg, np.arange(seg.size)] = 1.0
    return onehot


def segment_sum(x, segments, n_segments: int) -> Tensor:
    """Sum rows of ``x`` sharing a segment id; output has ``n_segments`` rows."""
    x = as_tensor(x)
    onehot = segment_matrix(segments, n_segments)
    return _emit(onehot @ x.value, (x,), lambda g: (onehot.T @ g,))


def segment_softmax(scores, segments, n_segments: int) -> Tensor:
    """Softmax of a column of scores within each segment."""
    scores = as_tensor(scores)
    if scores.shape[1] != 1:
        raise DimensionMismatch(f"segment_softmax expects a column, got {scores.shape}")
    seg = np.asarray(segments, dtype=np.intp)
    onehot = segment_matrix(seg, n_segments)
    s = scores.value[:, 0]
    seg_max = np.where(onehot > 0, s[None, :], -np.inf).max(axis=1)
    e = np.exp(s - seg_max[seg])
    y = (e / (onehot @ e)[seg]).reshape(-1, 1)

    def vjp(g):
        inner = onehot @ (g * y)
        return (y * (g - inner[seg]),)

    return _emit(y, (scores,), vjp)


# ------------------------------------------------------------ gradient check


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Param],
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients with central differences for every entry.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps round-off on near-zero gradients from dominating.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        v = f().item()
        if not np.isfinite(v):
            raise NonFiniteLoss(f"loss became {v} during finite differences")
        return v

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for k, (p, ga) in enumerate(zip(params, analytic)):
        worst = 0.0
        flat = p.value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = value()
            flat[j] = orig - eps
            down = value()
            flat[j] = orig
            num = (up - down) / (2.0 * eps)
            a = ga.reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report.per_param[p.name or f"param{k}"] = worst
        report.max_rel_err = max(report.max_rel_err, worst)
    return report


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Param]) -> "AdamState":
        return cls([np.zeros_like(p.value) for p in params], [np.zeros_like(p.value) for p in params])


def adam_step(
    params: Sequence[Param],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected adaptive-moment update, in place on ``params``."""
    if len(params) != len(state.m):
        raise DimensionMismatch("optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.value.shape or g.shape != p.value.shape:
            raise DimensionMismatch(f"state/grad shape mismatch for {p.name}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ------------------------------------------------------------ checkpoint I/O


def params_to_dict(params: Iterable[Param]) -> dict:
    return {
        p.name: {"shape": list(p.shape), "values": [float(v) for v in p.value.reshape(-1)]}
        for p in params
    }


def params_from_dict(doc: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in doc.items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DimensionMismatch(f"checkpoint entry {name}: {values.size} values for shape {shape}")
        out[name] = values.reshape(shape)
    return out


def save_params(path: str | Path, params: Iterable[Param], meta: dict | None = None) -> None:
    """JSON checkpoint: ``{"format", "version", "meta", "params": {name: {shape, values}}}``."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": params_to_dict(params),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CoherentCastError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CoherentCastError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    return params_from_dict(doc["params"]), doc.get("meta", {})
