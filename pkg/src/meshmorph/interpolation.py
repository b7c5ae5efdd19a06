"""Vector-valued RBF interpolant of a boundary deformation.

The interpolant is fitted once with a single shape parameter and can then be
evaluated with a different shape parameter at every evaluation point, which
is what the smoother exploits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.spatial.distance import cdist

from .kernel import DistinctCentersError, _phi, assemble, closest_pair

DEFAULT_BLOCK = 2048


@dataclass(frozen=True)
class DeformationInterpolant:
    """Fitted interpolant.

    Attributes
    ----------
    centers : (N_d, s) array
        Data sites.
    coefficients : (N_d, s) array
        One column of expansion coefficients per output component.
    eps_fit : float
        Shape parameter used for the fit.
    targets : (N_d, s) array
        Values the interpolant was fitted to.
    """

    centers: np.ndarray
    coefficients: np.ndarray
    eps_fit: float
    targets: np.ndarray

    @property
    def dim(self):
        return self.centers.shape[1]

    def residual(self):
        """Max-norm residual of the linear system at the data sites."""
        A = assemble(self.centers, self.eps_fit).entries
        return float(np.abs(A @ self.coefficients - self.targets).max())


def solve(A, targets):
    """Coefficients for a pre-assembled kernel matrix: Cholesky solve plus one refinement step.

    Raises ``numpy.linalg.LinAlgError`` when ``A`` is not numerically positive definite.
    """
    A = np.asarray(A, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(Y))):
        raise ValueError("matrix and targets must be finite")
    # A is symmetric, so its transpose is the same matrix in Fortran order (no copy)
    L, info = lapack.dpotrf(A.T, lower=1, clean=0)
    if info != 0:
        raise linalg.LinAlgError(f"kernel matrix not positive definite (dpotrf info {info})")
    lam, _ = lapack.dpotrs(L, Y, lower=1)
    # one step of iterative refinement with the same factorization
    corr, _ = lapack.dpotrs(L, Y - A @ lam, lower=1)
    return lam + corr


def fit(data_sites, targets, eps_star):
    """Solve ``A(eps*) lam_c = targets_c`` for every component with one Cholesky factorization."""
    X = np.atleast_2d(np.asarray(data_sites, dtype=float))
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(Y) != len(X):
        raise ValueError(f"{len(Y)} targets for {len(X)} data sites")
    A = assemble(X, eps_star).entries
    try:
        lam = solve(A, Y)
    except linalg.LinAlgError as exc:
        # numerically indefinite: blame the closest pair of sites
        i, j, d = closest_pair(X)
        raise DistinctCentersError(i, j, d) from exc
    return DeformationInterpolant(X, lam, float(eps_star), Y.copy())


def _check_points(interp, points):
    P = np.asarray(points, dtype=float)
    if P.size == 0:
        return P.reshape(0, interp.dim)
    P = np.atleast_2d(P)
    if P.shape[1] != interp.dim:
        raise ValueError(f"points have dimension {P.shape[1]}, expected {interp.dim}")
    if not np.all(np.isfinite(P)):
        raise ValueError("evaluation points must be finite")
    return P


def evaluate_pointwise(interp, points, eps_vec, block=DEFAULT_BLOCK):
    """Evaluate with shape parameter ``eps_vec[j]`` at ``points[j]``.

    Coefficients stay the ones fitted at ``interp.eps_fit``.
    """
    P = _check_points(interp, points)
    eps_vec = np.asarray(eps_vec, dtype=float).reshape(-1)
    if len(eps_vec) != len(P):
        raise ValueError(f"{len(eps_vec)} shape parameters for {len(P)} points")
    if np.any(~(eps_vec > 0)):
        raise ValueError("pointwise shape parameters must be positive")
    out = np.empty((len(P), interp.dim))
    for start in range(0, len(P), block):
        stop = min(start + block, len(P))
        r = cdist(P[start:stop], interp.centers)
        out[start:stop] = _phi(eps_vec[start:stop, None] * r) @ interp.coefficients
    return out


def evaluate_uniform(interp, points, block=DEFAULT_BLOCK):
    """Evaluate with the fitted shape parameter everywhere."""
    P = _check_points(interp, points)
    return evaluate_pointwise(interp, P, np.full(len(P), interp.eps_fit), block)
