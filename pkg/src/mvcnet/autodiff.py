"""Tape-based reverse-mode differentiation over numpy arrays.

Nodes hold whole (batched) arrays, so one ``eigfn`` node applies a matrix
function to a full stack of SPD pixels.  Forward values are computed
eagerly when a primitive is recorded; :meth:`Tape.backward` walks the tape
once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import ContractError, PoisonedGradientError


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "ctx", "name", "requires_grad")

    def __init__(self, tape, nid, op, inputs, value, ctx, name=None, requires_grad=False):
        self.tape = tape
        self.id = nid
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.op}{label} shape={self.value.shape}>"


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _t(x):
    return np.swapaxes(x, -1, -2)


# Each primitive: forward(values, **attrs) -> (out, ctx)
#                 backward(g, values, out, ctx, **attrs) -> tuple of input adjoints


def _add_fwd(vals):
    return vals[0] + vals[1], None


def _add_bwd(g, vals, out, ctx):
    return _unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)


def _sub_fwd(vals):
    return vals[0] - vals[1], None


def _sub_bwd(g, vals, out, ctx):
    return _unbroadcast(g, vals[0].shape), -_unbroadcast(g, vals[1].shape)


def _mul_fwd(vals):
    return vals[0] * vals[1], None


def _mul_bwd(g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(vals, factor):
    return factor * vals[0], None


def _scale_bwd(g, vals, out, ctx, factor):
    return (factor * g,)


def _matmul_fwd(vals):
    return vals[0] @ vals[1], None


def _matmul_bwd(g, vals, out, ctx):
    a, b = vals
    return _unbroadcast(g @ _t(b), a.shape), _unbroadcast(_t(a) @ g, b.shape)


def _trace_fwd(vals):
    return np.trace(vals[0], axis1=-2, axis2=-1), None


def _trace_bwd(g, vals, out, ctx):
    n = vals[0].shape[-1]
    return (np.asarray(g)[..., None, None] * np.eye(n),)


def _eigfn_fwd(vals, fn):
    d = linalg._eigh(linalg.symmetrize(vals[0]))
    return linalg.eig_apply(None, fn, decomp=d), d


def _eigfn_bwd(g, vals, out, ctx, fn):
    return (linalg.dsym_apply(ctx, fn, linalg.symmetrize(g)),)


def _relu_fwd(vals, threshold=0.0):
    x = vals[0]
    mask = x > threshold
    return np.where(mask, x, threshold), mask


def _relu_bwd(g, vals, out, mask, threshold=0.0):
    return (g * mask,)


def _clip_fwd(vals):
    x, t = vals
    mask = x > t
    return np.where(mask, x, t), mask


def _clip_bwd(g, vals, out, mask):
    x, t = vals
    return g * mask, _unbroadcast(np.where(mask, 0.0, g), np.shape(t))


def _affine_fwd(vals):
    x, w, b = vals
    return x @ w.T + b, None


def _affine_bwd(g, vals, out, ctx):
    x, w, b = vals
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    gw = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return g @ w, gw, gb


def _xent_fwd(vals, labels):
    z = vals[0]
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    idx = np.arange(z.shape[0])
    loss = -logp[idx, labels].mean()
    return np.asarray(loss), np.exp(logp)


def _xent_bwd(g, vals, out, probs, labels):
    grad = probs.copy()
    grad[np.arange(grad.shape[0]), labels] -= 1.0
    return (g * grad / grad.shape[0],)


def _mse_fwd(vals, target):
    r = vals[0].reshape(-1) - np.asarray(target, dtype=np.float64).reshape(-1)
    return np.asarray(np.mean(r * r)), r


def _mse_bwd(g, vals, out, r, target):
    return ((g * 2.0 / r.size * r).reshape(vals[0].shape),)


def _spd_dist_grad(a, b, d):
    # d/dB of |log(A^{-1/2} B A^{-1/2})|_F = A^{-1/2} C^{-1} log(C) A^{-1/2} / d
    _, aih = linalg.sqrt_and_invsqrt(a)
    dec = linalg._eigh(linalg.symmetrize(aih @ b @ aih))
    lam = dec.eigenvalues
    inner = linalg.apply_decomp(dec, lambda x: np.log(x) / x)
    safe = np.where(d > 0, d, 1.0)[..., None, None]
    return np.where(d[..., None, None] > 0, aih @ inner @ aih / safe, 0.0), lam


def _dist_fwd(vals):
    a, b = vals
    _, aih = linalg.sqrt_and_invsqrt(a)
    lam = np.linalg.eigvalsh(linalg.symmetrize(aih @ b @ aih))
    if np.min(lam) < linalg.POS_FLOOR:
        raise linalg.PositivityError("distance argument is not positive definite")
    return np.sqrt(np.sum(np.log(lam) ** 2, axis=-1)), None


def _dist_bwd(g, vals, out, ctx):
    a, b = vals
    a_b, b_b = np.broadcast_arrays(a, b)
    gb, _ = _spd_dist_grad(a_b, b_b, out)
    ga, _ = _spd_dist_grad(b_b, a_b, out)
    gg = np.asarray(g)[..., None, None]
    return _unbroadcast(gg * ga, a.shape), _unbroadcast(gg * gb, b.shape)


def _gather_fwd(vals, index, axis):
    return np.take(vals[0], index, axis=axis), None


def _gather_bwd(g, vals, out, ctx, index, axis):
    x = vals[0]
    acc = np.zeros(x.shape, dtype=g.dtype)
    ax = axis % x.ndim
    gm = np.moveaxis(g, tuple(range(ax, ax + index.ndim)), tuple(range(index.ndim)))
    accm = np.moveaxis(acc, ax, 0)
    np.add.at(accm, index, gm)
    return (acc,)


def _einsum_fwd(vals, subscripts):
    return np.einsum(subscripts, *vals, optimize=True), None


def _einsum_bwd(g, vals, out, ctx, subscripts):
    ins, outs = subscripts.replace(" ", "").split("->")
    a_sub, b_sub = ins.split(",")
    a, b = vals
    ga = np.einsum(f"{outs},{b_sub}->{a_sub}", g, b, optimize=True)
    gb = np.einsum(f"{outs},{a_sub}->{b_sub}", g, a, optimize=True)
    return ga, gb


def _reshape_fwd(vals, shape):
    return vals[0].reshape(shape), None


def _reshape_bwd(g, vals, out, ctx, shape):
    return (g.reshape(vals[0].shape),)


def _sum_fwd(vals, axis=None):
    return np.sum(vals[0], axis=axis), None


def _sum_bwd(g, vals, out, ctx, axis=None):
    x = vals[0]
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)


def _fm_fwd(vals, manifold, tol, max_iter):
    return manifold.frechet_mean(vals[0], tol=tol, max_iter=max_iter), None


def _stop_bwd(g, vals, out, ctx, **attrs):
    return (None,) * len(vals)


def _stop_fwd(vals):
    return vals[0].copy(), None


PRIMITIVES = {
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    "trace": (_trace_fwd, _trace_bwd),
    "eigfn": (_eigfn_fwd, _eigfn_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "clip": (_clip_fwd, _clip_bwd),
    "affine": (_affine_fwd, _affine_bwd),
    "softmax_xent": (_xent_fwd, _xent_bwd),
    "mse": (_mse_fwd, _mse_bwd),
    "dist": (_dist_fwd, _dist_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "einsum": (_einsum_fwd, _einsum_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    # Fréchet mean anchor: value flows forward, no gradient flows back
    "frechet_mean": (_fm_fwd, _stop_bwd),
    "stop_gradient": (_stop_fwd, _stop_bwd),
}


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _push(self, op, inputs, value, ctx, attrs=None, name=None, requires_grad=False):
        node = Node(self, len(self.nodes), op, inputs, value, (ctx, attrs or {}), name, requires_grad)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        node = self._push("param", (), np.array(value, dtype=np.float64), None, name=name, requires_grad=True)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        return self._push("const", (), np.asarray(value, dtype=np.float64), None)

    def record(self, op: str, *inputs, **attrs) -> Node:
        try:
            fwd, _ = PRIMITIVES[op]
        except KeyError:
            raise ContractError(f"unregistered primitive {op!r}") from None
        ins = []
        for x in inputs:
            if not isinstance(x, Node):
                x = self.const(x)
            elif x.tape is not self:
                raise ContractError("input node belongs to another tape")
            ins.append(x)
        value, ctx = fwd([x.value for x in ins], **attrs)
        rg = any(x.requires_grad for x in ins) and op not in ("frechet_mean", "stop_gradient")
        return self._push(op, tuple(x.id for x in ins), np.asarray(value), ctx, attrs, requires_grad=rg)

    def backward(self, loss: Node) -> "GradBundle":
        if loss.tape is not self:
            raise ContractError("loss node belongs to another tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = adj.pop(node.id, None)
            if g is None or not node.requires_grad or not node.inputs:
                if g is not None and node.op == "param":
                    adj[node.id] = g
                continue
            _, bwd = PRIMITIVES[node.op]
            ctx, attrs = node.ctx
            vals = [self.nodes[i].value for i in node.inputs]
            grads = bwd(g, vals, node.value, ctx, **attrs)
            for i, gi in zip(node.inputs, grads):
                src = self.nodes[i]
                if gi is None or not src.requires_grad:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise PoisonedGradientError(
                        f"non-finite adjoint produced by node {node.id} ({node.op}) for input node {i}"
                    )
                adj[i] = adj[i] + gi if i in adj else np.array(gi, dtype=np.float64)
        grads = {}
        for name in sorted(self.params):
            node = self.params[name]
            g = adj.get(node.id)
            grads[name] = np.zeros(node.value.size) if g is None else np.asarray(g).reshape(-1)
        return GradBundle(grads)


@dataclass
class GradBundle:
    """Parameter name -> flat gradient vector."""

    grads: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(sorted(self.grads))

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum([float(g @ g) for g in self.grads.values()])))

    def clipped(self, max_norm: float) -> "GradBundle":
        norm = self.global_norm()
        if not max_norm or norm <= max_norm:
            return self
        s = max_norm / norm
        return GradBundle({k: v * s for k, v in self.grads.items()})

    @staticmethod
    def reduce(bundles: list["GradBundle"]) -> "GradBundle":
        """Sum per-batch gradients in parameter-name order."""
        out = {}
        for name in sorted(bundles[0].grads):
            acc = np.zeros_like(bundles[0].grads[name])
            for b in bundles:
                acc = acc + b.grads[name]
            out[name] = acc
        return GradBundle(out)


# convenience wrappers ---------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ContractError("at least one operand must be a tape node")


def add(a, b):
    return _tape_of(a, b).record("add", a, b)


def sub(a, b):
    return _tape_of(a, b).record("sub", a, b)


def mul(a, b):
    return _tape_of(a, b).record("mul", a, b)


def scale(factor, x):
    return x.tape.record("scale", x, factor=float(factor))


def matmul(a, b):
    return _tape_of(a, b).record("matmul", a, b)


def trace(x):
    return x.tape.record("trace", x)


def eigfn(x, fn):
    return x.tape.record("eigfn", x, fn=fn)


def relu(x, threshold=0.0):
    return x.tape.record("relu", x, threshold=float(threshold))


def clip(x, threshold):
    """max(x, threshold) with a differentiable (node) threshold."""
    return _tape_of(x, threshold).record("clip", x, threshold)


def affine(x, w, b):
    return _tape_of(x, w, b).record("affine", x, w, b)


def softmax_xent(logits, labels):
    return logits.tape.record("softmax_xent", logits, labels=np.asarray(labels, dtype=np.int64))


def mse(pred, target):
    return pred.tape.record("mse", pred, target=np.asarray(target, dtype=np.float64))


def dist(a, b):
    return _tape_of(a, b).record("dist", a, b)


def gather(x, index, axis):
    return x.tape.record("gather", x, index=np.asarray(index, dtype=np.intp), axis=axis)


def einsum(subscripts, a, b):
    return _tape_of(a, b).record("einsum", a, b, subscripts=subscripts)


def reshape(x, shape):
    return x.tape.record("reshape", x, shape=tuple(shape))


def sum(x, axis=None):  # noqa: A001
    return x.tape.record("sum", x, axis=axis)


def frechet_mean(points, manifold, tol=1e-10, max_iter=200):
    return points.tape.record("frechet_mean", points, manifold=manifold, tol=tol, max_iter=max_iter)


def stop_gradient(x):
    return x.tape.record("stop_gradient", x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# optimizer ----------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_adam_step(params, grads, state: AdamState, lr=0.005, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update.  ``params`` maps name -> array, ``grads`` name -> flat
    gradient (or a GradBundle).  Returns new params; ``state`` is updated."""
    if isinstance(grads, GradBundle):
        grads = grads.grads
    b1, b2 = betas
    state.step += 1
    t = state.step
    out = {}
    for name in sorted(params):
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64).reshape(p.shape)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out
