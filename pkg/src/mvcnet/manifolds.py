"""Riemannian manifolds used by the layers: SPD(n) with the affine-invariant
metric and the unit sphere S^n.

The manifold classes work on raw arrays with arbitrary leading batch axes
(SPD points are ``(..., n, n)``, sphere points ``(..., n+1)``).  The
``ManifoldPoint`` / ``TangentVector`` wrappers and the module-level
functions give the single-point API on top of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import (
    ChartError,
    ContractError,
    ConvergenceError,
    NonUniquenessError,
    ValidationError,
)

FM_TOL = 1e-10
FM_MAX_ITER = 200


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class Manifold:
    """Base class; concrete manifolds double as the manifold id."""

    n: int
    kind = "abstract"

    @property
    def point_shape(self) -> tuple[int, ...]:
        raise NotImplementedError

    @property
    def point_ndim(self) -> int:
        return len(self.point_shape)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n": self.n}

    def __str__(self):
        return f"{self.kind}({self.n})"

    # array API --------------------------------------------------------
    def exp(self, base, v):
        raise NotImplementedError

    def log(self, base, x):
        raise NotImplementedError

    def dist(self, a, b):
        raise NotImplementedError

    def inner(self, base, u, v):
        raise NotImplementedError

    def norm(self, base, v):
        return np.sqrt(np.maximum(self.inner(base, v, v), 0.0))

    def origin(self) -> np.ndarray:
        raise NotImplementedError

    def check_point(self, x, name="point"):
        raise NotImplementedError

    def check_tangent(self, base, v, name="tangent vector"):
        raise NotImplementedError

    def random_point(self, seed, spread=1.0, size=()):
        raise NotImplementedError

    def random_tangent(self, seed, base, norm_bound=1.0):
        raise NotImplementedError

    def act(self, matrix, x):
        raise NotImplementedError

    def act_tangent(self, matrix, v):
        return self.act(matrix, v)

    def check_spread(self, points):
        """Raise if a point set is outside the region where the FM is unique."""

    def _batch_weights(self, points, weights):
        npts = points.shape[points.ndim - self.point_ndim - 1]
        if weights is None:
            weights = np.full(npts, 1.0 / npts)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape[-1] != npts:
            raise ContractError(f"{weights.shape[-1]} weights for {npts} points")
        if np.any(weights < 0):
            raise ValidationError("Fréchet mean weights must be nonnegative")
        if np.any(np.abs(weights.sum(axis=-1) - 1.0) > 1e-9):
            raise ValidationError("Fréchet mean weights must sum to 1")
        return weights

    def _wsum(self, weights, vectors):
        # vectors (..., N, *ps), weights (N,) or (..., N)
        w = weights.reshape(weights.shape + (1,) * self.point_ndim)
        return np.sum(w * vectors, axis=-1 - self.point_ndim)

    def frechet_mean(self, points, weights=None, tol=FM_TOL, max_iter=FM_MAX_ITER):
        """Weighted Karcher mean over axis ``-1 - point_ndim`` of ``points``.

        Fixed-point iteration m <- Exp_m(sum_i w_i Log_m x_i) started at the
        first point.  Returns once the gradient norm is below ``tol``.
        """
        points = np.asarray(points, dtype=np.float64)
        weights = self._batch_weights(points, weights)
        self.check_spread(points)
        pax = -1 - self.point_ndim
        m = np.take(points, 0, axis=pax)
        resid = np.inf
        for it in range(max_iter + 1):
            v = self._wsum(weights, self.log(np.expand_dims(m, pax), points))
            resid = float(np.max(self.norm(m, v))) if v.size else 0.0
            if resid < tol or it == max_iter:
                break
            m = self.exp(m, v)
        if resid > 1e3 * tol:
            raise ConvergenceError(
                f"Fréchet mean on {self} did not converge in {max_iter} iterations "
                f"(residual {resid:.3e}, tol {tol:g})"
            )
        return m

    def incremental_mean(self, points, weights=None):
        """Single-pass geodesic running mean; cheap approximation of the FM."""
        points = np.asarray(points, dtype=np.float64)
        weights = self._batch_weights(points, weights)
        pax = -1 - self.point_ndim
        npts = points.shape[pax]
        w = np.broadcast_to(weights, points.shape[: points.ndim - self.point_ndim])
        m = np.take(points, 0, axis=pax)
        total = np.take(w, 0, axis=-1)
        for k in range(1, npts):
            wk = np.take(w, k, axis=-1)
            total = total + wk
            t = np.divide(wk, total, out=np.ones_like(wk), where=total > 0)
            t = t.reshape(t.shape + (1,) * self.point_ndim)
            xk = np.take(points, k, axis=pax)
            m = self.exp(m, t * self.log(m, xk))
        return m


@dataclass(frozen=True)
class Spd(Manifold):
    """Symmetric positive definite n x n matrices, affine-invariant metric."""

    kind = "spd"

    def __post_init__(self):
        if self.n < 2:
            raise ValidationError(f"Spd needs n >= 2, got {self.n}")

    @property
    def point_shape(self):
        return (self.n, self.n)

    @property
    def dim(self):
        return self.n * (self.n + 1) // 2

    def origin(self):
        return np.eye(self.n)

    def check_point(self, x, name="point"):
        x = linalg.check_symmetric(x, name)
        if x.shape[-2:] != self.point_shape:
            raise ValidationError(f"{name} has shape {x.shape}, expected (..., {self.n}, {self.n})")
        lo = np.min(np.linalg.eigvalsh(x)) if x.size else 1.0
        if lo < linalg.POS_FLOOR:
            raise linalg.PositivityError(f"{name} is not positive definite (min eigenvalue {lo:.3e})")
        return x

    def check_tangent(self, base, v, name="tangent vector"):
        v = linalg.check_symmetric(v, name)
        if v.shape[-2:] != self.point_shape:
            raise ValidationError(f"{name} has shape {v.shape}")
        return v

    def exp(self, base, v):
        ph, pih = linalg.sqrt_and_invsqrt(base)
        return linalg.symmetrize(ph @ linalg.spd_expm(pih @ v @ pih) @ ph)

    def log(self, base, x):
        ph, pih = linalg.sqrt_and_invsqrt(base)
        return linalg.symmetrize(ph @ linalg.spd_logm(pih @ x @ pih) @ ph)

    def dist(self, a, b):
        _, aih = linalg.sqrt_and_invsqrt(a)
        lam = np.linalg.eigvalsh(linalg.symmetrize(aih @ b @ aih))
        if np.min(lam) < linalg.POS_FLOOR:
            raise linalg.PositivityError("distance argument is not positive definite")
        return np.sqrt(np.sum(np.log(lam) ** 2, axis=-1))

    def inner(self, base, u, v):
        pu = np.linalg.solve(base, u)
        pv = np.linalg.solve(base, v)
        return np.einsum("...ij,...ji->...", pu, pv)

    def norm(self, base, v):
        _, pih = linalg.sqrt_and_invsqrt(base)
        return np.linalg.norm(pih @ v @ pih, axis=(-2, -1))

    def random_point(self, seed, spread=1.0, size=()):
        if spread <= 0:
            raise ValidationError("spread must be positive")
        rng = _as_rng(seed)
        s = rng.uniform(-spread, spread, size=tuple(size) + self.point_shape)
        s = np.triu(s) + np.swapaxes(np.triu(s, 1), -1, -2)
        return linalg.spd_expm(s)

    def random_tangent(self, seed, base, norm_bound=1.0):
        rng = _as_rng(seed)
        base = np.asarray(base, dtype=np.float64)
        g = rng.standard_normal(base.shape)
        g = linalg.symmetrize(g)
        g /= np.linalg.norm(g, axis=(-2, -1), keepdims=True)
        r = norm_bound * rng.uniform(size=base.shape[:-2] + (1, 1))
        ph, _ = linalg.sqrt_and_invsqrt(base)
        return linalg.symmetrize(ph @ (r * g) @ ph)

    def act(self, matrix, x):
        return matrix @ x @ np.swapaxes(matrix, -1, -2)

    def frechet_mean(self, points, weights=None, tol=FM_TOL, max_iter=FM_MAX_ITER):
        # Whitened form of the base-class iteration: one eigendecomposition
        # of the iterate per step instead of two.  Widely spread sets make
        # the full step zig-zag and crawl: a step that fails to halve the
        # residual halves the step size (down to 1/8), a rejected step
        # (neither objective nor residual improved) halves it without that
        # floor, and fast progress grows it back.  Whitened points with
        # condition number kappa carry log errors near eps * kappa, so the
        # residual target is max(tol, eps * kappa) per set.
        points = np.asarray(points, dtype=np.float64)
        weights = self._batch_weights(points, weights)
        eps = np.finfo(np.float64).eps

        def state(m):
            mh, mih = linalg.sqrt_and_invsqrt(m)
            d = linalg.eig_symmetrized(mih[..., None, :, :] @ points @ mih[..., None, :, :])
            t = linalg.eig_apply(None, "log", decomp=d)
            s = self._wsum(weights, t)
            f = self._wsum(weights, np.sum(t * t, axis=(-2, -1))[..., None, None])[..., 0, 0]
            lam = d.eigenvalues
            floor = eps * np.max(lam[..., -1] / lam[..., 0], axis=-1)
            return mh, s, np.linalg.norm(s, axis=(-2, -1)), f, np.maximum(tol, floor)

        m = points[..., 0, :, :]
        mh, s, r, f, target = state(m)
        step = np.ones(r.shape)
        for _ in range(max_iter):
            if not r.size or np.all(r < target):
                break
            cand = linalg.symmetrize(mh @ linalg.spd_expm(step[..., None, None] * s) @ mh)
            c_mh, c_s, c_r, c_f, c_target = state(cand)
            done = r < target
            ok = ~done & ((c_f <= f * (1 + 1e-12)) | (c_r < r))
            slow = ok & (c_r > 0.5 * r)
            fast = ok & (c_r < 0.1 * r)
            step = np.where(~ok & ~done, np.maximum(0.5 * step, 2.0**-20),
                            np.where(slow, np.maximum(0.5 * step, 0.125),
                                     np.where(fast, np.minimum(1.0, 2 * step), step)))
            m = np.where(ok[..., None, None], cand, m)
            mh = np.where(ok[..., None, None], c_mh, mh)
            s = np.where(ok[..., None, None], c_s, s)
            r, f = np.where(ok, c_r, r), np.where(ok, c_f, f)
            target = np.where(ok, c_target, target)
        bad = r > np.maximum(1e3 * tol, target)
        if np.any(bad):
            raise ConvergenceError(
                f"Fréchet mean on {self} did not converge in {max_iter} iterations "
                f"(residual {float(np.max(r[bad])):.3e}, tol {tol:g})"
            )
        return m


@dataclass(frozen=True)
class Sphere(Manifold):
    """Unit sphere S^n embedded in R^{n+1}, round metric."""

    kind = "sphere"

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f"Sphere needs n >= 1, got {self.n}")

    @property
    def point_shape(self):
        return (self.n + 1,)

    @property
    def dim(self):
        return self.n

    def origin(self):
        e = np.zeros(self.n + 1)
        e[0] = 1.0
        return e

    def check_point(self, x, name="point"):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1:] != self.point_shape:
            raise ValidationError(f"{name} has shape {x.shape}, expected (..., {self.n + 1})")
        if not np.all(np.isfinite(x)):
            raise ValidationError(f"{name} has non-finite entries")
        if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > 1e-12):
            raise ValidationError(f"{name} is not a unit vector")
        return x

    def check_tangent(self, base, v, name="tangent vector"):
        v = np.asarray(v, dtype=np.float64)
        if np.any(np.abs(np.sum(v * base, axis=-1)) > 1e-10):
            raise ValidationError(f"{name} is not orthogonal to its anchor")
        return v

    def exp(self, base, v):
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
        if np.any(nv >= math.pi):
            raise ChartError(f"tangent norm {float(np.max(nv)):.6f} >= pi leaves the normal chart")
        small = nv < 1e-12
        safe = np.where(small, 1.0, nv)
        out = np.cos(nv) * base + np.sin(nv) * v / safe
        out = np.where(small, base, out)
        return out / np.linalg.norm(out, axis=-1, keepdims=True)

    def log(self, base, x):
        c = np.sum(base * x, axis=-1, keepdims=True)
        if np.any(c <= -1.0 + 1e-10):
            raise ChartError("antipodal pair: Log is undefined on the cut locus")
        u = x - c * base
        su = np.linalg.norm(u, axis=-1, keepdims=True)
        theta = self._angle(base, x)[..., None]
        small = theta < 1e-12
        return np.where(small, 0.0, theta * u / np.where(su == 0, 1.0, su))

    @staticmethod
    def _angle(a, b):
        # 2 atan2(|a-b|, |a+b|): symmetric and accurate near 0 and pi
        return 2.0 * np.arctan2(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))

    def dist(self, a, b):
        return self._angle(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))

    def inner(self, base, u, v):
        return np.sum(u * v, axis=-1)

    def norm(self, base, v):
        return np.linalg.norm(v, axis=-1)

    def project(self, base, v):
        return v - np.sum(v * base, axis=-1, keepdims=True) * base

    def random_point(self, seed, spread=1.0, size=()):
        # normalize(e1 + spread * gaussian): concentrates at e1 as spread -> 0,
        # approaches the uniform (normalized gaussian) law as spread grows
        if spread <= 0:
            raise ValidationError("spread must be positive")
        rng = _as_rng(seed)
        g = rng.standard_normal(tuple(size) + self.point_shape)
        x = self.origin() + spread * g
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def random_tangent(self, seed, base, norm_bound=1.0):
        rng = _as_rng(seed)
        base = np.asarray(base, dtype=np.float64)
        g = self.project(base, rng.standard_normal(base.shape))
        g /= np.linalg.norm(g, axis=-1, keepdims=True)
        r = norm_bound * rng.uniform(size=base.shape[:-1] + (1,))
        return self.project(base, r * g)

    def act(self, matrix, x):
        return np.einsum("...ij,...j->...i", matrix, x)

    def check_spread(self, points):
        mean = np.sum(points, axis=-2)
        nm = np.linalg.norm(mean, axis=-1, keepdims=True)
        if np.any(nm < 1e-12):
            raise NonUniquenessError("points have zero Euclidean mean; Fréchet mean is not unique")
        center = mean / nm
        d = self.dist(center[..., None, :], points)
        if np.any(d >= math.pi / 2):
            raise NonUniquenessError(
                f"points spread {float(np.max(d)):.4f} rad from their center; "
                "need < pi/2 for a unique Fréchet mean"
            )


def manifold_from(kind: str, n: int) -> Manifold:
    kinds = {"spd": Spd, "sphere": Sphere}
    try:
        return kinds[kind.lower()](int(n))
    except KeyError:
        raise ValidationError(f"unknown manifold kind {kind!r}") from None


# single-point API -----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ManifoldPoint:
    manifold: Manifold
    coords: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.coords, dtype=np.float64).reshape(self.manifold.point_shape)
        self.manifold.check_point(arr)
        object.__setattr__(self, "coords", arr.reshape(-1))

    @classmethod
    def from_array(cls, manifold, array):
        return cls(manifold, np.asarray(array, dtype=np.float64).reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.coords.reshape(self.manifold.point_shape)


@dataclass(frozen=True, eq=False)
class TangentVector:
    anchor: ManifoldPoint
    coords: np.ndarray
    manifold: Manifold = field(init=False)

    def __post_init__(self):
        m = self.anchor.manifold
        object.__setattr__(self, "manifold", m)
        arr = np.asarray(self.coords, dtype=np.float64).reshape(m.point_shape)
        m.check_tangent(self.anchor.array, arr)
        object.__setattr__(self, "coords", arr.reshape(-1))

    @property
    def array(self) -> np.ndarray:
        return self.coords.reshape(self.manifold.point_shape)


@dataclass(frozen=True, eq=False)
class IsometryAction:
    """SPD: P -> G P G^T for invertible G.  Sphere: p -> R p for orthogonal R."""

    manifold: Manifold
    matrix: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.matrix, dtype=np.float64)
        object.__setattr__(self, "matrix", g)
        k = self.manifold.point_shape[0]
        if g.shape != (k, k):
            raise ValidationError(f"isometry matrix must be {k}x{k}, got {g.shape}")
        if isinstance(self.manifold, Spd):
            if abs(np.linalg.det(g)) < 1e-8:
                raise ValidationError("congruence matrix is singular")
        elif np.linalg.norm(g.T @ g - np.eye(k)) > 1e-10:
            raise ValidationError("sphere isometry must be orthogonal")

    @classmethod
    def identity(cls, manifold):
        return cls(manifold, np.eye(manifold.point_shape[0]))

    @classmethod
    def random(cls, manifold, seed, scale=0.5):
        """Random congruence (SPD) or rotation (sphere)."""
        rng = _as_rng(seed)
        k = manifold.point_shape[0]
        q, r = np.linalg.qr(rng.standard_normal((k, k)))
        q = q * np.sign(np.diag(r))
        if isinstance(manifold, Spd):
            s = np.exp(rng.uniform(-scale, scale, size=k))
            q2, _ = np.linalg.qr(rng.standard_normal((k, k)))
            return cls(manifold, q @ np.diag(s) @ q2)
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        return cls(manifold, q)

    def __call__(self, x):
        return self.manifold.act(self.matrix, x)


def exp_map(v: TangentVector) -> ManifoldPoint:
    m = v.manifold
    return ManifoldPoint.from_array(m, m.exp(v.anchor.array, v.array))


def log_map(p: ManifoldPoint, q: ManifoldPoint) -> TangentVector:
    _same(p.manifold, q.manifold)
    return TangentVector(p, p.manifold.log(p.array, q.array))


def dist(p: ManifoldPoint, q: ManifoldPoint) -> float:
    _same(p.manifold, q.manifold)
    return float(p.manifold.dist(p.array, q.array))


def metric_inner(u: TangentVector, v: TangentVector) -> float:
    _same(u.manifold, v.manifold)
    if not np.array_equal(u.anchor.coords, v.anchor.coords):
        raise ContractError("metric_inner needs tangent vectors at the same anchor")
    return float(u.manifold.inner(u.anchor.array, u.array, v.array))


def frechet_mean(points, weights=None, tol=FM_TOL, max_iter=FM_MAX_ITER) -> ManifoldPoint:
    if not points:
        raise ValidationError("Fréchet mean of an empty set")
    m = points[0].manifold
    for p in points[1:]:
        _same(m, p.manifold)
    arr = np.stack([p.array for p in points])
    return ManifoldPoint.from_array(m, m.frechet_mean(arr, weights, tol=tol, max_iter=max_iter))


def apply_isometry(phi: IsometryAction, p: ManifoldPoint) -> ManifoldPoint:
    _same(phi.manifold, p.manifold)
    out = phi(p.array)
    if isinstance(p.manifold, Spd):
        out = linalg.symmetrize(out)
    return ManifoldPoint.from_array(p.manifold, out)


def apply_isometry_tangent(phi: IsometryAction, v: TangentVector) -> TangentVector:
    _same(phi.manifold, v.manifold)
    anchor = apply_isometry(phi, v.anchor)
    out = phi.manifold.act_tangent(phi.matrix, v.array)
    if isinstance(v.manifold, Spd):
        out = linalg.symmetrize(out)
    return TangentVector(anchor, out)


def random_point(manifold: Manifold, spread: float, seed) -> ManifoldPoint:
    return ManifoldPoint.from_array(manifold, manifold.random_point(seed, spread))


def random_tangent(anchor: ManifoldPoint, norm_bound: float, seed) -> TangentVector:
    return TangentVector(anchor, anchor.manifold.random_tangent(seed, anchor.array, norm_bound))


def _same(a: Manifold, b: Manifold):
    if a != b:
        raise ContractError(f"manifold mismatch: {a} vs {b}")
