"""A small tape-based reverse-mode differentiator over numpy arrays.

Every operation appends a node to the tape of its inputs.  A node stores its
forward value, the indices of its parents and a closure mapping the output
cotangent to parent cotangents.  :func:`backward` walks the tape once in
reverse.

    from tensorized_transformer import autodiff as ad
    tape = ad.Tape()
    w = tape.param("w", np.ones(3))
    loss = ad.sum(w * w)
    grads = ad.backward(tape, loss)   # {"w": array([2., 2., 2.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ArgumentError, NumericError

Gradients = dict


class Var:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "name")

    def __init__(self, tape, index, value, parents=(), vjp=None, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var#{self.index}{label}(shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Tape:
    """Append-only record of operations plus the registry of trainable leaves."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def _record(self, value, parents=(), vjp=None, name=None) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ArgumentError(f"{p!r} belongs to a different tape")
        v = Var(self, len(self.nodes), value, tuple(parents), vjp, name)
        self.nodes.append(v)
        return v

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ArgumentError(f"parameter {name!r} registered twice")
        v = self._record(np.asarray(value), name=name)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return self._record(np.asarray(value))

    def params_from(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Var]:
        return {k: self.param(k, a) for k, a in arrays.items()}


def _lift(x, tape: Tape, like=None) -> Var:
    if isinstance(x, Var):
        return x
    if np.isscalar(x) and isinstance(like, Var):
        return tape.const(np.asarray(x, dtype=like.dtype))
    return tape.const(np.asarray(x))


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ArgumentError("at least one operand must be a Var")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def backward(tape: Tape, loss: Var) -> Gradients:
    """Gradients of the scalar ``loss`` with respect to every registered parameter."""
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise ArgumentError("loss node does not belong to this tape")
    if loss.value.size != 1:
        raise ArgumentError(f"loss must be a scalar, got shape {loss.shape}")
    grads: list = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.index + 1]):
        g = grads[node.index]
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            i = parent.index
            grads[i] = pg if grads[i] is None else grads[i] + pg
    out = {}
    for name, p in tape.params.items():
        g = grads[p.index] if p.index < len(grads) else None
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g).reshape(p.shape)
    return out


# ---------------------------------------------------------------- operations


def add(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(a, t, b), _lift(b, t, a)
    return t._record(
        a.value + b.value,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(a, t, b), _lift(b, t, a)
    return t._record(
        a.value - b.value,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Var:
    t = _tape_of(a, b)
    a, b = _lift(a, t, b), _lift(b, t, a)
    av, bv = a.value, b.value
    return t._record(
        av * bv,
        (a, b),
        lambda g: (unbroadcast(g * bv, a.shape), unbroadcast(g * av, b.shape)),
    )


def matmul(a, b) -> Var:
    """Batched matrix product with numpy broadcasting over leading axes."""
    t = _tape_of(a, b)
    a, b = _lift(a, t, b), _lift(b, t, a)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ArgumentError("matmul operands must have at least two axes")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return t._record(av @ bv, (a, b), vjp)


def sum(a: Var, axis=None, keepdims=False) -> Var:
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape._record(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: Var, axis=None, keepdims=False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Var, i: int, j: int) -> Var:
    return a.tape._record(
        np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),)
    )


def getitem(a: Var, key) -> Var:
    shape, dtype = a.shape, a.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        if _is_basic(key):
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return a.tape._record(a.value[key], (a,), vjp)


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts)


def concat(xs, axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(x, t) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return t._record(
        np.concatenate([x.value for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(xs, axis: int = 0) -> Var:
    t = _tape_of(*xs)
    xs = [_lift(x, t) for x in xs]
    return t._record(
        np.stack([x.value for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape._record(np.where(mask, a.value, 0), (a,), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return a.tape._record(y, (a,), lambda g: (g * y,))


def log(a: Var) -> Var:
    x = a.value
    return a.tape._record(np.log(x), (a,), lambda g: (g / x,))


def softmax(a: Var, axis: int = -1) -> Var:
    """Max-shifted softmax; entries equal to ``-inf`` get probability 0."""
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return a.tape._record(y, (a,), vjp)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    """Normalise the last axis, then scale by ``gain`` and shift by ``bias``."""
    t = x.tape
    xv, gv = x.value, gain.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gx_hat = g * gv
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = unbroadcast(g * xhat, gv.shape)
        gbias = unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return t._record(xhat * gv + bias.value, (x, gain, bias), vjp)


def embedding(table: Var, ids) -> Var:
    ids = np.asarray(ids)
    shape, dtype = table.shape, table.dtype

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return table.tape._record(table.value[ids], (table,), vjp)


def dropout(x: Var, p: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity when ``p == 0`` or no generator is supplied."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x.tape._record(x.value * keep, (x,), lambda g: (g * keep,))


def label_smoothed_ce(logits: Var, targets, eps: float = 0.0, ignore_index: int | None = None) -> Var:
    """Mean cross-entropy against ``(1-eps)`` on the target and ``eps/(V-1)`` elsewhere.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    """
    lv = logits.value
    V = lv.shape[-1]
    flat = lv.reshape(-1, V)
    tgt = np.asarray(targets).reshape(-1)
    if tgt.shape[0] != flat.shape[0]:
        raise ArgumentError("targets do not match the logits' leading shape")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise ArgumentError("target id out of range")
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full_like(flat, eps / (V - 1) if V > 1 else 0.0)
    q[np.arange(tgt.size), tgt] = 1.0 - eps
    keep = np.ones(tgt.size, dtype=flat.dtype)
    if ignore_index is not None:
        keep[tgt == ignore_index] = 0.0
    count = max(keep.sum(), 1.0)
    per_pos = -(q * logp).sum(axis=1)
    loss = np.asarray((per_pos * keep).sum() / count, dtype=flat.dtype)

    def vjp(g):
        p = np.exp(logp)
        # q rows sum to 1, so d/dz of -sum q log softmax(z) is p - q
        d = (p - q) * (keep / count)[:, None] * g
        return (d.reshape(lv.shape),)

    return logits.tape._record(loss, (logits,), vjp)


# ------------------------------------------------------ finite-difference oracle


@dataclass
class FDReport:
    name: str
    max_rel_error: float
    coords: list = field(default_factory=list)


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def finite_diff_check(
    f: Callable[[Tape, dict], Var],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, FDReport]:
    """Compare :func:`backward` against central differences for every parameter.

    ``f(tape, vars)`` must build a scalar loss from the parameter Vars.  When a
    parameter has more than ``max_coords`` entries a seeded random subset of
    coordinates is probed; the probed flat indices are kept on the report.
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    loss = f(tape, tape.params_from(params))
    analytic = backward(tape, loss)

    def value_at(arrays):
        t = Tape()
        return float(np.asarray(f(t, t.params_from(arrays)).value).reshape(()))

    rng = np.random.default_rng(seed)
    reports = {}
    for name, base in params.items():
        n = base.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            probe = dict(params)
            vals = []
            for sign in (1.0, -1.0):
                moved = base.copy()
                moved.flat[c] += sign * eps
                probe[name] = moved
                fv = value_at(probe)
                if not np.isfinite(fv):
                    raise NumericError(f"non-finite loss when perturbing {name}[{c}]")
                vals.append(fv)
            numeric = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, float(rel_error(analytic[name].flat[c], numeric)))
        reports[name] = FDReport(name, worst, coords.tolist())
    return reports
