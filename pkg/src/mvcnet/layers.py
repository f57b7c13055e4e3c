"""Manifold-valued convolution and the layers stacked around it.

These are plain numpy evaluations on :class:`ManifoldImage` values and work
for any :class:`~mvcnet.manifolds.Manifold`.  The trainable, taped versions
used during optimization live in :mod:`mvcnet.network`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ChartError, ContractError, PreconditionError, ValidationError
from .manifolds import Manifold, ManifoldPoint, Sphere, Spd

PADDING_MODES = ("none", "periodic")
# The image-wide mean is started at the first pixel, so a shifted image starts
# the iteration elsewhere; solving tighter keeps the anchor start-independent
# far below the shift-equivariance tolerance.
GLOBAL_FM_TOL = 1e-13


@dataclass(frozen=True, eq=False)
class ManifoldImage:
    """Grid of manifold points.

    ``data`` has shape ``(*dims, channels, *manifold.point_shape)`` with one
    to three grid axes.
    """

    manifold: Manifold
    data: np.ndarray
    ndim: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", data)
        if self.ndim not in (1, 2, 3):
            raise ValidationError(f"grid must be 1-, 2- or 3-D, got {self.ndim}")
        expect = self.ndim + 1 + self.manifold.point_ndim
        if data.ndim != expect or data.shape[self.ndim + 1 :] != self.manifold.point_shape:
            raise ValidationError(f"image data shape {data.shape} does not match {self.manifold} on a {self.ndim}-D grid")
        if min(data.shape[: self.ndim + 1]) < 1:
            raise ValidationError("grid sides and channel count must be >= 1")

    @classmethod
    def from_array(cls, manifold, data, ndim=None):
        data = np.asarray(data, dtype=np.float64)
        if ndim is None:
            ndim = data.ndim - 1 - manifold.point_ndim
        return cls(manifold, data, ndim)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[: self.ndim]

    @property
    def channels(self) -> int:
        return self.data.shape[self.ndim]

    def validate(self):
        self.manifold.check_point(self.data, "image pixel")
        return self

    def points(self) -> np.ndarray:
        """All pixels flattened to ``(sites * channels, *point_shape)``."""
        return self.data.reshape((-1,) + self.manifold.point_shape)

    def map(self, fn) -> "ManifoldImage":
        return ManifoldImage(self.manifold, fn(self.data), self.ndim)

    def shift(self, offset) -> "ManifoldImage":
        offset = tuple(np.broadcast_to(offset, (self.ndim,)))
        return ManifoldImage(self.manifold, np.roll(self.data, offset, axis=tuple(range(self.ndim))), self.ndim)


@dataclass(frozen=True)
class AnchorPolicy:
    """Where the tangent-space combination is anchored.

    ``window_fm``: Fréchet mean of the window's points (all input channels).
    ``center``: window center pixel, input channel 0.
    ``global_fm``: Fréchet mean of the whole input image.
    ``fixed``: a given point.
    """

    kind: str = "window_fm"
    point: tuple | None = None

    KINDS = ("window_fm", "center", "global_fm", "fixed")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"unknown anchor policy {self.kind!r}; choose from {self.KINDS}")
        if (self.kind == "fixed") != (self.point is not None):
            raise ValidationError("a fixed anchor needs exactly one point")

    @classmethod
    def fixed(cls, point) -> "AnchorPolicy":
        return cls("fixed", tuple(np.asarray(point, dtype=np.float64).reshape(-1).tolist()))

    @classmethod
    def parse(cls, value) -> "AnchorPolicy":
        if isinstance(value, AnchorPolicy):
            return value
        return cls(str(value))

    def point_array(self, manifold) -> np.ndarray:
        return np.asarray(self.point, dtype=np.float64).reshape(manifold.point_shape)

    def to_dict(self):
        d = {"kind": self.kind}
        if self.point is not None:
            d["point"] = list(self.point)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], None if d.get("point") is None else tuple(d["point"]))


@dataclass(frozen=True, eq=False)
class MvcKernel:
    """Real weights of shape ``(out_channels, in_channels, *window)``."""

    weights: np.ndarray
    anchor: AnchorPolicy = AnchorPolicy()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "anchor", AnchorPolicy.parse(self.anchor))
        if w.ndim < 3:
            raise ValidationError("kernel weights need shape (out, in, *window)")
        if any(s % 2 == 0 for s in w.shape[2:]):
            raise ValidationError(f"window sides must be odd, got {w.shape[2:]}")
        if not np.all(np.isfinite(w)):
            raise ValidationError("kernel weights must be finite")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def window(self):
        return self.weights.shape[2:]


def _tuple(v, k, name):
    t = tuple(int(x) for x in np.broadcast_to(np.asarray(v), (k,)))
    if any(x < 1 for x in t):
        raise ValidationError(f"{name} must be positive, got {t}")
    return t


def window_index(dims, window, stride=1, padding="none"):
    """Flat input-site indices for every (output site, window offset).

    Returns ``(out_dims, index)`` with ``index`` of shape
    ``(prod(out_dims), prod(window))``; offsets are in row-major window
    order.  Periodic padding centers the window on the output site and wraps.
    """
    k = len(dims)
    window = _tuple(window, k, "window")
    stride = _tuple(stride, k, "stride")
    if padding not in PADDING_MODES:
        raise ValidationError(f"padding must be one of {PADDING_MODES}, got {padding!r}")
    axes_idx = []
    out_dims = []
    for d, w, s in zip(dims, window, stride):
        if padding == "none":
            if w > d:
                raise ValidationError(f"window {w} larger than image side {d}")
            n_out = (d - w) // s + 1
            base = np.arange(n_out)[:, None] * s + np.arange(w)[None, :]
        else:
            n_out = (d - 1) // s + 1
            base = (np.arange(n_out)[:, None] * s + np.arange(w)[None, :] - w // 2) % d
        axes_idx.append(base)
        out_dims.append(n_out)
    # combine per-axis (out, w) tables into (prod out, prod w) flat indices
    grids_o = np.meshgrid(*[np.arange(n) for n in out_dims], indexing="ij")
    grids_w = np.meshgrid(*[np.arange(w) for w in window], indexing="ij")
    coords = []
    for ax in range(k):
        o = grids_o[ax].reshape(-1)[:, None]
        z = grids_w[ax].reshape(-1)[None, :]
        coords.append(axes_idx[ax][o, z])
    index = np.ravel_multi_index(tuple(coords), dims)
    return tuple(out_dims), index


def _expand(a, extra):
    return a.reshape(a.shape[:1] + (1,) * extra + a.shape[1:])


def tangent_combination(manifold, points, weights, anchor):
    """Exp_m( sum_i w_i Log_m x_i ) for a batch of point sets.

    points: ``(S, N, *ps)``; weights: ``(N,)`` or ``(O, N)``; anchor: ``(S, *ps)``.
    Returns ``(S, *ps)`` or ``(S, O, *ps)``.
    """
    logs = manifold.log(anchor[:, None], points)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        v = np.einsum("sn...,n->s...", logs, w)
        _check_chart(manifold, v)
        return manifold.exp(anchor, v)
    v = np.einsum("sn...,on->so...", logs, w)
    _check_chart(manifold, v)
    return manifold.exp(_expand(anchor, 1), v)


def _check_chart(manifold, v):
    if isinstance(manifold, Sphere):
        nv = np.linalg.norm(v, axis=-1)
        bad = np.argwhere(nv >= math.pi)
        if bad.size:
            site = tuple(int(i) for i in bad[0])
            raise ChartError(f"combined tangent at output index {site} has norm {nv[tuple(bad[0])]:.4f} >= pi")


def _anchor_points(manifold, xw, policy, image_points, window_size, fm_tol):
    s = xw.shape[0]
    ps = manifold.point_shape
    if policy.kind == "window_fm":
        return manifold.frechet_mean(xw.reshape((s, -1) + ps), tol=fm_tol)
    if policy.kind == "center":
        return xw[:, window_size // 2, 0]
    if policy.kind == "global_fm":
        m = manifold.frechet_mean(image_points, tol=min(fm_tol, GLOBAL_FM_TOL))
        return np.broadcast_to(m, (s,) + ps).copy()
    return np.broadcast_to(policy.point_array(manifold), (s,) + ps).copy()


def _sphere_cut_check(manifold, anchors, xw, out_dims):
    if not isinstance(manifold, Sphere):
        return
    c = np.einsum("sd,skcd->skc", anchors, xw)
    bad = np.argwhere(c <= -1.0 + 1e-10)
    if bad.size:
        site = np.unravel_index(int(bad[0][0]), out_dims)
        raise ChartError(f"window at output site {tuple(int(i) for i in site)} contains the anchor's antipode")


def mvc_forward(image: ManifoldImage, kernel: MvcKernel, stride=1, padding="none", fm_tol=1e-10, anchors=None):
    """Manifold-valued convolution.

    Every output site gathers its window over all input channels, picks an
    anchor m by ``kernel.anchor`` and returns Exp_m of the weighted sum of
    Log_m over window offsets and input channels.  ``anchors`` (shape
    ``(*out_dims, *ps)``) overrides the policy.
    """
    m = image.manifold
    if kernel.in_channels != image.channels:
        raise ContractError(f"kernel expects {kernel.in_channels} input channels, image has {image.channels}")
    if len(kernel.window) != image.ndim:
        raise ContractError(f"{len(kernel.window)}-D window on a {image.ndim}-D image")
    out_dims, idx = window_index(image.dims, kernel.window, stride, padding)
    ps = m.point_shape
    x = image.data.reshape((-1, image.channels) + ps)
    xw = x[idx]  # (S, K, C, *ps)
    s, k = idx.shape
    if anchors is None:
        anchors = _anchor_points(m, xw, kernel.anchor, image.points(), k, fm_tol)
    else:
        anchors = np.asarray(anchors, dtype=np.float64).reshape((s,) + ps)
    _sphere_cut_check(m, anchors, xw, out_dims)
    # weights (O, C, K) -> (O, K*C) matching xw's (K, C) flattening
    w = kernel.weights.reshape(kernel.out_channels, kernel.in_channels, k)
    w = np.swapaxes(w, 1, 2).reshape(kernel.out_channels, k * image.channels)
    out = tangent_combination(m, xw.reshape((s, k * image.channels) + ps), w, anchors)
    if isinstance(m, Spd):
        out = linalg.symmetrize(out)
    return ManifoldImage(m, out.reshape(out_dims + (kernel.out_channels,) + ps), image.ndim)


TRELU_BASES = ("canonical", "image_fm")


def trelu_base(image: ManifoldImage, base_policy="canonical", fm_tol=1e-10):
    if base_policy == "canonical":
        return image.manifold.origin()
    if base_policy == "image_fm":
        return image.manifold.frechet_mean(image.points(), tol=fm_tol)
    raise ValidationError(f"unknown tReLU base {base_policy!r}; choose from {TRELU_BASES}")


def trelu(image: ManifoldImage, base_policy="canonical", threshold=0.0, fm_tol=1e-10):
    """Tangent ReLU: Log at a base point, clip coordinates below ``threshold``, Exp back.

    SPD coordinates are the symmetric matrix entries of Log_b x; sphere
    coordinates are ambient, re-projected onto the tangent plane after clipping.
    """
    m = image.manifold
    b = trelu_base(image, base_policy, fm_tol)
    v = m.log(b, image.data)
    v = np.maximum(v, threshold)
    if isinstance(m, Sphere):
        v = m.project(b, v)
    out = m.exp(b, v)
    if isinstance(m, Spd):
        out = linalg.symmetrize(out)
    return ManifoldImage(m, out, image.ndim)


def mvfc_features(manifold, points, fm_tol=1e-10):
    """Distances of each point to the set's Fréchet mean; batched over leading axes."""
    pax = -1 - manifold.point_ndim
    fm = manifold.frechet_mean(points, tol=fm_tol)
    return manifold.dist(np.expand_dims(fm, pax), points)


def mvfc(points) -> np.ndarray:
    """Distance-to-Fréchet-mean vector for a list of ManifoldPoint."""
    if not points:
        raise ValidationError("mvfc needs at least one point")
    m = points[0].manifold
    return mvfc_features(m, np.stack([p.array for p in points]))


def covariance_block(features, ridge=1e-6):
    """SPD(C+1) descriptor of a ``(..., C, H, W)`` feature map.

    Spatial positions are samples of a C-vector.  Assembles
    [[cov + ridge I, mean], [mean^T, 1]] and, when that is not positive
    definite to the ``ridge`` floor, lifts the whole diagonal just enough.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim < 3:
        raise ValidationError("features need shape (..., C, H, W)")
    if not np.all(np.isfinite(f)):
        raise ValidationError("features contain non-finite values")
    c = f.shape[-3]
    samples = f.reshape(f.shape[:-2] + (-1,))
    n = samples.shape[-1]
    if n < 2:
        raise ValidationError("covariance block needs at least 2 spatial positions")
    mu = samples.mean(axis=-1)
    centered = samples - mu[..., None]
    cov = centered @ np.swapaxes(centered, -1, -2) / n
    out = np.zeros(f.shape[:-3] + (c + 1, c + 1))
    out[..., :c, :c] = cov + ridge * np.eye(c)
    out[..., :c, c] = mu
    out[..., c, :c] = mu
    out[..., c, c] = 1.0
    out = linalg.symmetrize(out)
    lo = np.linalg.eigvalsh(out)[..., 0]
    lift = np.where(lo < ridge, ridge - lo, 0.0)
    # a second pass absorbs rounding in the first eigenvalue estimate
    out = out + (lift * (1 + 1e-9) + np.where(lo < ridge, linalg.POS_FLOOR, 0.0))[..., None, None] * np.eye(c + 1)
    return out


def collapse_two_layers(w, h, first_anchor=None, second_anchor=None):
    """Single-layer weights equal to two cascaded MVC layers with a shared anchor.

    ``w`` holds the two first-layer filters, shape ``(2, N)``; ``h`` the
    second-layer pair.  Returns ``(h1 w_1..w_N, h2 w_{N+1}..w_{2N})``.
    Both anchors must be the same fixed point when given.
    """
    if first_anchor is not None or second_anchor is not None:
        a1 = AnchorPolicy.parse(first_anchor) if first_anchor is not None else None
        a2 = AnchorPolicy.parse(second_anchor) if second_anchor is not None else None
        if a1 is None or a2 is None or a1.kind != "fixed" or a2.kind != "fixed" or a1 != a2:
            raise PreconditionError("collapse needs both layers anchored at the same fixed point")
    w = np.asarray(w, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if w.ndim != 2 or w.shape[0] != 2 or h.shape != (2,):
        raise ValidationError("w must have shape (2, N) and h shape (2,)")
    return np.concatenate([h[0] * w[0], h[1] * w[1]])


def cascade_two_layers(manifold, points, w, h, anchor, activation=None):
    """Evaluate filter 1 on points[:N], filter 2 on points[N:], then combine with h.

    ``activation`` (e.g. a tReLU on raw arrays) is applied to the two
    intermediate points when given.
    """
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[1]
    a = np.asarray(anchor, dtype=np.float64)[None]
    m1 = tangent_combination(manifold, points[None, :n], w[0], a)
    m2 = tangent_combination(manifold, points[None, n:], w[1], a)
    mids = np.concatenate([m1, m2])
    if activation is not None:
        mids = activation(mids)
    return tangent_combination(manifold, mids[None], np.asarray(h, dtype=np.float64), a)[0]


def single_layer(manifold, points, w_tilde, anchor):
    a = np.asarray(anchor, dtype=np.float64)[None]
    return tangent_combination(manifold, points[None], w_tilde, a)[0]


def trelu_points(manifold, points, base_policy="canonical", threshold=0.0):
    """tReLU on a raw point array (canonical base)."""
    img = ManifoldImage.from_array(manifold, points.reshape((points.shape[0], 1) + manifold.point_shape), ndim=1)
    return trelu(img, base_policy, threshold).data.reshape(points.shape)


def to_points(image: ManifoldImage) -> list[ManifoldPoint]:
    return [ManifoldPoint.from_array(image.manifold, p) for p in image.points()]
