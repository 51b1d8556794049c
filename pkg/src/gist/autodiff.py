"""Tape-based reverse-mode differentiation over numpy arrays.

Only the handful of primitives the model needs are provided. Every op appends
a record holding its vector-Jacobian product to the tape of its inputs, so
the tape is in topological order by construction and `backward` is a single
reverse sweep. Ops on values without a tape (or without trainable inputs)
just compute, which is how inference runs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tape",
    "Var",
    "OpRecord",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "reciprocal",
    "relu",
    "elu",
    "exp",
    "log",
    "reduce_sum",
    "mean",
    "transpose",
    "concat",
    "take_cols",
    "take_rows",
    "spmm",
    "log_softmax",
    "apply_feature_map",
    "linear_attention",
    "mse_loss",
    "cross_entropy",
    "GradientReport",
    "finite_difference_check",
    "SGD",
    "Adam",
    "TrainingDivergedError",
    "train",
    "write_loss_curve",
]


@dataclass(eq=False)
class OpRecord:
    op: str
    output: "Var"
    inputs: tuple["Var", ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Append-only list of op records plus the named leaf parameters."""

    def __init__(self) -> None:
        self.nodes: list[OpRecord] = []
        self.params: dict[str, Var] = {}

    def param(self, value: np.ndarray, name: str) -> "Var":
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = Var(np.asarray(value, dtype=np.float64), tape=self, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def params_from(self, weights: Mapping[str, np.ndarray]) -> dict[str, "Var"]:
        return {name: self.param(w, name) for name, w in weights.items()}

    def __len__(self) -> int:
        return len(self.nodes)


class Var:
    __slots__ = ("value", "tape", "requires_grad", "name")
    __array_ufunc__ = None  # make ndarray @ Var dispatch to Var.__rmatmul__

    def __init__(self, value, tape: Tape | None = None, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, grad={self.requires_grad})"


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _record(op: str, value: np.ndarray, inputs: Sequence[Var], vjp) -> Var:
    tape = next((v.tape for v in inputs if v.requires_grad and v.tape is not None), None)
    if tape is None:
        return Var(value)
    out = Var(value, tape=tape, requires_grad=True)
    tape.nodes.append(OpRecord(op, out, tuple(inputs), vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- primitives ----------------------------------------------------------------


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return _record(
        "add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.value.shape, b.value.shape
    return _record(
        "sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _record(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def neg(a) -> Var:
    a = _wrap(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def reciprocal(a) -> Var:
    a = _wrap(a)
    out = 1.0 / a.value
    return _record("reciprocal", out, (a,), lambda g: (-g * out * out,))


def relu(a) -> Var:
    # relu'(0) = 0
    a = _wrap(a)
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def elu(a) -> Var:
    a = _wrap(a)
    pos = a.value > 0
    ex = np.exp(np.minimum(a.value, 0.0))
    out = np.where(pos, a.value, ex - 1.0)
    return _record("elu", out, (a,), lambda g: (g * np.where(pos, 1.0, ex),))


def exp(a) -> Var:
    a = _wrap(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = _wrap(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Var:
    a = _wrap(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("reduce_sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis: int | None = None) -> Var:
    a = _wrap(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def transpose(a) -> Var:
    a = _wrap(a)
    return _record("transpose", a.value.T, (a,), lambda g: (g.T,))


def concat(items: Sequence, axis: int = 1) -> Var:
    items = [_wrap(x) for x in items]
    sizes = [x.value.shape[axis] for x in items]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(items))
        )

    return _record("concat", np.concatenate([x.value for x in items], axis=axis), items, vjp)


def take_cols(a, start: int, stop: int) -> Var:
    a = _wrap(a)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record("slice", a.value[:, start:stop], (a,), vjp)


def take_rows(a, idx: np.ndarray) -> Var:
    a = _wrap(a)
    shape = a.value.shape
    idx = np.asarray(idx)

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take_rows", a.value[idx], (a,), vjp)


def spmm(m: sparse.spmatrix, a) -> Var:
    """Constant sparse matrix times a variable."""
    a = _wrap(a)
    mt = m.T.tocsr()
    return _record("spmm", m @ a.value, (a,), lambda g: (mt @ g,))


def log_softmax(a, axis: int = 1) -> Var:
    a = _wrap(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _record(
        "log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),)
    )


# -- composites ------------------------------------------------------------------


def apply_feature_map(a, name: str) -> Var:
    if name == "relu":
        return relu(a)
    if name == "elu_plus_one":
        return add(elu(a), 1.0)
    if name == "identity":
        return _wrap(a)
    raise ValueError(f"unknown feature map {name!r}")


def linear_attention(q, k, v, feature_map: str = "relu", eps: float = 1e-6) -> Var:
    """Linear attention assembled from primitives (no custom adjoint)."""
    fq = apply_feature_map(q, feature_map)
    fk = apply_feature_map(k, feature_map)
    s = matmul(transpose(fk), v)
    ksum = reduce_sum(fk, axis=0, keepdims=True)
    z = reciprocal(add(matmul(fq, transpose(ksum)), eps))
    return mul(matmul(fq, s), z)


def mse_loss(pred, target, idx: np.ndarray | None = None) -> Var:
    pred = _wrap(pred)
    target = np.asarray(target, dtype=np.float64).reshape(pred.value.shape)
    if idx is not None:
        pred, target = take_rows(pred, idx), target[idx]
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def cross_entropy(logits, labels: np.ndarray, idx: np.ndarray | None = None) -> Var:
    labels = np.asarray(labels)
    if idx is not None:
        logits, labels = take_rows(logits, idx), labels[idx]
    lp = log_softmax(logits, axis=1)
    onehot = np.zeros(lp.value.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return neg(mean(reduce_sum(mul(lp, onehot), axis=1)))


# -- reverse sweep -------------------------------------------------------------------


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every tape parameter."""
    if np.size(loss.value) != 1:
        raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.value)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(tape.nodes):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else gi
    return {
        name: grads.get(id(p), np.zeros_like(p.value)).reshape(p.value.shape)
        for name, p in tape.params.items()
    }


# -- finite differences ----------------------------------------------------------------


@dataclass
class GradientReport:
    """Per-parameter worst error between analytic and finite-difference gradients.

    ``errors[name]`` is ``max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf)``
    over the checked coordinates (or probe directions), at the best step size.
    Coordinates where one-sided differences disagree (kinks) are counted in
    ``kinks`` and excluded.
    """

    errors: dict[str, float]
    h: dict[str, float]
    kinks: dict[str, int] = field(default_factory=dict)
    probes: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "max_rel_err", "h", "kinks", "probes"])
            for name in self.errors:
                w.writerow([name, self.errors[name], self.h[name], self.kinks.get(name, 0), self.probes.get(name, 0)])


def _scaled_err(a: np.ndarray, n: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def finite_difference_check(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float | Sequence[float] = 1e-5,
    max_coords: int = 1000,
    num_probes: int = 20,
    kink_tol: float = 1e-3,
    seed: int = 0,
) -> GradientReport:
    """Compare ``analytic`` gradients of ``f`` with central differences.

    ``analytic`` is typically the output of `backward`. Parameters with more
    than ``max_coords`` entries are checked along ``num_probes`` random unit
    directions instead of coordinate by coordinate. With several step sizes
    the best one is kept per parameter.
    """
    steps = [h] if np.isscalar(h) else list(h)
    if any(s <= 0 for s in steps):
        raise ValueError("finite-difference step must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    def scalar(p) -> float:
        return float(np.asarray(f(p)).reshape(()))

    f0 = scalar(base)
    rng = np.random.default_rng(seed)
    report = GradientReport({}, {}, {}, {})

    for name, value in base.items():
        if value.size <= max_coords:
            dirs = [None] * value.size
        else:
            dirs = [d / np.linalg.norm(d) for d in rng.standard_normal((num_probes,) + value.shape)]
        a_full = np.asarray(analytic[name])
        best = (math.inf, steps[0], 0)
        for step in steps:
            a_vals, n_vals, kinks = [], [], 0
            for idx, d in enumerate(dirs):
                if d is None:
                    d = np.zeros(value.size)
                    d[idx] = 1.0
                    d = d.reshape(value.shape)
                plus = dict(base, **{name: value + step * d})
                minus = dict(base, **{name: value - step * d})
                fp, fm = scalar(plus), scalar(minus)
                fwd, bwd = (fp - f0) / step, (f0 - fm) / step
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    kinks += 1
                    continue
                n_vals.append((fp - fm) / (2.0 * step))
                a_vals.append(float(np.sum(a_full * d)))
            err = _scaled_err(np.array(a_vals), np.array(n_vals))
            if err < best[0]:
                best = (err, step, kinks)
        report.errors[name], report.h[name], report.kinks[name] = best
        report.probes[name] = len(dirs)
    return report


# -- optimizers and training ----------------------------------------------------------------


class SGD:
    def __init__(self, lr: float = 1e-2):
        self.lr = lr

    def step(self, weights: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            weights[name] = weights[name] - self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-2, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, weights: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            weights[name] = weights[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class Trainable(Protocol):
    def init_weights(self, rng: np.random.Generator) -> dict[str, np.ndarray]: ...

    def loss(self, weights: Mapping[str, Var], data) -> Var: ...


def train(
    model: Trainable,
    data,
    optimizer: str | SGD | Adam = "adam",
    epochs: int = 100,
    seed: int = 0,
    lr: float = 1e-2,
    weights: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Full-batch training loop; returns final weights and the per-epoch loss."""
    if isinstance(optimizer, str):
        optimizer = {"sgd": SGD, "adam": Adam}[optimizer](lr=lr)
    rng = np.random.default_rng(seed)
    weights = dict(model.init_weights(rng) if weights is None else weights)
    losses = []
    for epoch in range(epochs):
        tape = Tape()
        loss = model.loss(tape.params_from(weights), data)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDivergedError(epoch, value)
        losses.append(value)
        optimizer.step(weights, backward(tape, loss))
    return weights, losses


def write_loss_curve(losses: Iterable[float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
