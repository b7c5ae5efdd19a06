"""C4 Matern kernel, interpolation matrix assembly and shape parameter search."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.optimize import brentq
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

NORM_KINDS = ("one_norm", "two_norm", "max_norm")


class DistinctCentersError(ValueError):
    """Two data sites coincide (or nearly so), so the kernel matrix is singular."""

    def __init__(self, i, j, distance):
        self.pair = (int(i), int(j))
        self.distance = float(distance)
        super().__init__(
            f"centers {self.pair[0]} and {self.pair[1]} are not distinct "
            f"(distance {self.distance:.3e})"
        )


class BracketError(ValueError):
    """The condition-number target is not bracketed by the search interval."""

    def __init__(self, lo, hi, kappa_lo, kappa_hi, target):
        self.kappa_lo = kappa_lo
        self.kappa_hi = kappa_hi
        super().__init__(
            f"target condition {target:.3e} not bracketed: "
            f"kappa({lo:g}) = {kappa_lo:.3e}, kappa({hi:g}) = {kappa_hi:.3e}"
        )


@dataclass(frozen=True)
class KernelConfig:
    target_condition: float = 1e12
    bracket_lo: float = 1e-3
    bracket_hi: float = 1e2
    norm_kind: str = "one_norm"

    def __post_init__(self):
        if not self.target_condition > 1:
            raise ValueError("target_condition must exceed 1")
        if not 0 < self.bracket_lo < self.bracket_hi:
            raise ValueError("need 0 < bracket_lo < bracket_hi")
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"unknown norm_kind {self.norm_kind!r}")


@dataclass(frozen=True)
class InterpMatrix:
    entries: np.ndarray
    shape_parameter: float
    centers: np.ndarray


def _phi(t):
    # t = eps * r, elementwise
    return (3.0 + 3.0 * t + t * t) * np.exp(-t)


def matern_c4(eps, r):
    """Evaluate the C4 Matern kernel ``(3 + 3 eps r + eps^2 r^2) exp(-eps r)``.

    Broadcasts over array arguments.
    """
    eps = np.asarray(eps, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any(eps <= 0) or not np.all(np.isfinite(eps)):
        raise ValueError("shape parameter must be positive and finite")
    if np.any(r < 0):
        raise ValueError("radius must be nonnegative")
    out = _phi(eps * r)
    return float(out) if out.ndim == 0 else out


def separation_tolerance(centers):
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    diag = np.linalg.norm(centers.max(axis=0) - centers.min(axis=0))
    return 1e-12 * max(diag, 1.0)


def closest_pair(centers):
    """Indices ``(i, j)`` with ``i < j`` of the closest pair and their distance."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    d, idx = cKDTree(centers).query(centers, k=2)
    i = int(np.argmin(d[:, 1]))
    j = int(idx[i, 1])
    return min(i, j), max(i, j), float(d[i, 1])


def check_distinct(centers, tol=None):
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if len(centers) < 2:
        return
    if tol is None:
        tol = separation_tolerance(centers)
    i, j, d = closest_pair(centers)
    if d <= tol:
        raise DistinctCentersError(i, j, d)


def assemble(centers, eps, tol=None):
    """Dense interpolation matrix ``A_ij = phi(eps * |x_i - x_j|)``."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if eps <= 0:
        raise ValueError("shape parameter must be positive")
    check_distinct(centers, tol)
    r = cdist(centers, centers)
    A = _phi(eps * r)
    # cdist is symmetric up to rounding; enforce it exactly
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 3.0)
    return InterpMatrix(A, float(eps), centers)


def condition_estimate(A, norm_kind="one_norm"):
    """Condition number of ``A`` in the requested norm.

    ``two_norm`` uses singular values. ``one_norm`` and ``max_norm`` use the
    LAPACK reciprocal condition estimators on an LU factorization, which
    costs a factorization plus O(n^2). A numerically singular matrix yields
    ``inf``.
    """
    M = A.entries if isinstance(A, InterpMatrix) else np.asarray(A, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix must be square")
    if norm_kind not in NORM_KINDS:
        raise ValueError(f"unknown norm_kind {norm_kind!r}")
    if not np.all(np.isfinite(M)):
        return np.inf
    if norm_kind == "two_norm":
        s = linalg.svdvals(M)
        if s[-1] <= 0 or s[-1] < s[0] * np.finfo(float).eps:
            return np.inf
        return float(s[0] / s[-1])
    norm_char = "1" if norm_kind == "one_norm" else "I"
    anorm = np.abs(M).sum(axis=0 if norm_kind == "one_norm" else 1).max()
    lu, piv, info = lapack.dgetrf(M)
    if info > 0:
        return np.inf
    rcond, info = lapack.dgecon(lu, anorm, norm=norm_char)
    if info != 0 or rcond <= 0:
        return np.inf
    return float(1.0 / rcond)


def log_condition(centers, eps, norm_kind="one_norm"):
    kappa = condition_estimate(assemble(centers, eps), norm_kind)
    # cap so the root finder always sees a finite value; rounding strips the
    # last-bit jitter the LAPACK estimator shows across workspace alignments
    return round(float(np.log10(min(kappa, 1e300))), 8)


def find_shape_parameter(centers, cfg=None):
    """Shape parameter at which the interpolation matrix hits the target condition.

    Root-finds ``log10 kappa(A(eps)) - log10 kappa_t`` with Brent's method
    over ``[cfg.bracket_lo, cfg.bracket_hi]``.
    """
    cfg = cfg or KernelConfig()
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    check_distinct(centers)
    target = np.log10(cfg.target_condition)

    def f(eps):
        return log_condition(centers, eps, cfg.norm_kind) - target

    f_lo, f_hi = f(cfg.bracket_lo), f(cfg.bracket_hi)
    if f_lo == 0.0:
        return float(cfg.bracket_lo)
    if f_hi == 0.0:
        return float(cfg.bracket_hi)
    if np.sign(f_lo) == np.sign(f_hi):
        raise BracketError(cfg.bracket_lo, cfg.bracket_hi,
                           10 ** (f_lo + target), 10 ** (f_hi + target),
                           cfg.target_condition)
    eps_star = brentq(f, cfg.bracket_lo, cfg.bracket_hi, xtol=1e-10, rtol=1e-10)
    logger.debug("eps* = %.6g for %d centers", eps_star, len(centers))
    return float(eps_star)
