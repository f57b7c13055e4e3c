"""Symmetric matrix functions via eigendecomposition.

Every function here accepts a single ``(n, n)`` matrix or a stack
``(..., n, n)`` and works in float64.  All matrix functions share one
backend, :func:`eig_apply`, so their directional derivatives come from the
same eigendecomposition through the Daleckii-Krein formula
(:func:`dsym_apply`).
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np

from .errors import ConvergenceError, PositivityError, ValidationError

SYM_TOL = 1e-12
POS_FLOOR = 1e-10
DEGENERATE_GAP = 1e-8


class EigDecomp(NamedTuple):
    """Eigenvalues in ascending order and the matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        q = self.eigenvectors
        return (q * self.eigenvalues[..., None, :]) @ np.swapaxes(q, -1, -2)


def _inv(x):
    return 1.0 / x


def _invsqrt(x):
    return 1.0 / np.sqrt(x)


def _dinvsqrt(x):
    return -0.5 * x ** -1.5


def _dsqrt(x):
    return 0.5 / np.sqrt(x)


def _dlog(x):
    return 1.0 / x


def _ident(x):
    return x


def _one(x):
    return np.ones_like(x)


# id -> (f, f', needs positive spectrum)
SCALAR_FUNCTIONS: dict[str, tuple[Callable, Callable, bool]] = {
    "identity": (_ident, _one, False),
    "exp": (np.exp, np.exp, False),
    "log": (np.log, _dlog, True),
    "sqrt": (np.sqrt, _dsqrt, True),
    "invsqrt": (_invsqrt, _dinvsqrt, True),
    "inv": (_inv, lambda x: -1.0 / (x * x), True),
}


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_symmetric(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValidationError(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{name} has non-finite entries")
    at = np.swapaxes(a, -1, -2)
    if np.any(np.abs(a - at) > SYM_TOL * np.maximum(1.0, np.abs(a))):
        raise ValidationError(f"{name} is not symmetric (max asymmetry {np.max(np.abs(a - at)):.3e})")
    return a


def _eigh(a: np.ndarray) -> EigDecomp:
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        norm = float(np.max(np.linalg.norm(a, axis=(-2, -1))))
        raise ConvergenceError(
            f"eigendecomposition did not converge within the LAPACK iteration cap "
            f"(Frobenius norm {norm:.3e})"
        ) from exc
    return EigDecomp(w, q)


def sym_eig(a: np.ndarray) -> EigDecomp:
    """Eigendecomposition of a symmetric matrix (or a stack of them)."""
    a = check_symmetric(a)
    return _eigh(symmetrize(a))


def eig_symmetrized(a: np.ndarray) -> EigDecomp:
    """Decomposition of the symmetric part of ``a``, without the symmetry check."""
    return _eigh(symmetrize(np.asarray(a, dtype=np.float64)))


def _check_positive(w: np.ndarray, what: str) -> None:
    lo = np.min(w) if w.size else 1.0
    if lo < POS_FLOOR:
        raise PositivityError(f"{what}: smallest eigenvalue {lo:.3e} is below {POS_FLOOR:g}")


def _resolve(f) -> tuple[Callable, Callable | None, bool, str]:
    if isinstance(f, str):
        try:
            fn, dfn, pos = SCALAR_FUNCTIONS[f]
        except KeyError:
            raise ValidationError(f"unknown scalar function id {f!r}") from None
        return fn, dfn, pos, f
    return f, None, False, getattr(f, "__name__", "f")


def apply_decomp(decomp: EigDecomp, f) -> np.ndarray:
    fn = _resolve(f)[0]
    q = decomp.eigenvectors
    return (q * fn(decomp.eigenvalues)[..., None, :]) @ np.swapaxes(q, -1, -2)


def eig_apply(a: np.ndarray, f, *, decomp: EigDecomp | None = None) -> np.ndarray:
    """f(A) = Q diag(f(lambda)) Q^T for symmetric ``a``.

    ``a`` is symmetrized before decomposition; callers that need the strict
    invariant check use :func:`sym_eig` first.
    """
    fn, _, positive, name = _resolve(f)
    if decomp is None:
        decomp = _eigh(symmetrize(np.asarray(a, dtype=np.float64)))
    if positive:
        _check_positive(decomp.eigenvalues, f"matrix {name}")
    return apply_decomp(decomp, fn)


def spd_expm(v: np.ndarray) -> np.ndarray:
    return eig_apply(v, "exp")


def spd_logm(p: np.ndarray) -> np.ndarray:
    return eig_apply(p, "log")


def spd_sqrtm(p: np.ndarray) -> np.ndarray:
    return eig_apply(p, "sqrt")


def spd_invsqrtm(p: np.ndarray) -> np.ndarray:
    return eig_apply(p, "invsqrt")


def sqrt_and_invsqrt(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Both P^{1/2} and P^{-1/2} from a single decomposition."""
    d = _eigh(symmetrize(np.asarray(p, dtype=np.float64)))
    _check_positive(d.eigenvalues, "matrix sqrt")
    return apply_decomp(d, np.sqrt), apply_decomp(d, _invsqrt)


def loewner_matrix(eigenvalues: np.ndarray, f, df: Callable | None = None) -> np.ndarray:
    """First divided differences of f on the spectrum.

    Pairs closer than ``DEGENERATE_GAP`` use f' at their midpoint instead of
    the divided difference.
    """
    fn, dfn, _, name = _resolve(f)
    if df is not None:
        dfn = df
    if dfn is None:
        raise ValidationError(f"no derivative registered for {name}; pass df")
    lam = np.asarray(eigenvalues, dtype=np.float64)
    li = lam[..., :, None]
    lj = lam[..., None, :]
    diff = li - lj
    close = np.abs(diff) < DEGENERATE_GAP
    fl = fn(lam)
    num = fl[..., :, None] - fl[..., None, :]
    safe = np.where(close, 1.0, diff)
    return np.where(close, dfn(0.5 * (li + lj)), num / safe)


def dsym_apply(decomp: EigDecomp, f, direction: np.ndarray, df: Callable | None = None) -> np.ndarray:
    """Directional derivative Df(A)[H] = Q (L o Q^T H Q) Q^T.

    The Loewner matrix L is symmetric, so this map is self-adjoint under the
    Frobenius inner product and doubles as its own reverse-mode rule.
    """
    q = decomp.eigenvectors
    qt = np.swapaxes(q, -1, -2)
    lw = loewner_matrix(decomp.eigenvalues, f, df)
    return q @ (lw * (qt @ direction @ q)) @ qt
