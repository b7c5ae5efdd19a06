"""Shape-parameter smoothing loop and the Laplace baseline.

The loop fits the boundary deformation once, then repeatedly lowers the
evaluation shape parameter around vertices whose quality differs from their
2-ring neighbours, re-evaluates the interpolant and re-tessellates. It stops
as soon as the 2-norm of the element qualities drops below the best value
seen so far and hands back the best mesh.
"""
from __future__ import annotations

import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import interpolation, kernel
from .mesh import quality_report, tessellate

logger = logging.getLogger(__name__)

EPS_FLOOR = 1e-3  # relative to eps*


@dataclass(frozen=True)
class SmoothingParams:
    delta: float = 1e-6
    sigma: float = 0.1
    alpha: float = 1e-3
    max_iterations: int = 50
    # only vertices with q_y below the gate drive updates; None applies to all
    quality_gate: float | None = None
    mu_source: str = "data_sites"

    def __post_init__(self):
        if self.delta < 0 or self.sigma <= 0 or self.alpha <= 0:
            raise ValueError("delta must be >= 0 and sigma, alpha > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.mu_source not in ("data_sites", "boundary"):
            raise ValueError("mu_source must be 'data_sites' or 'boundary'")


@dataclass
class SmoothingState:
    eps: np.ndarray
    current_nodes: np.ndarray
    current_mesh: object
    history: list = field(default_factory=list)
    iteration: int = 0
    converged: bool = False


@dataclass
class SmoothingContext:
    """Everything a step needs besides the evolving state."""

    interp: interpolation.DeformationInterpolant
    undeformed: np.ndarray
    mu_points: np.ndarray | None
    boundary_index: np.ndarray
    holes: list = field(default_factory=list)
    eps_floor: float = 0.0
    snap: tuple | None = None  # (indices, exact images) overriding evaluated rows


# --- per-vertex quantities -----------------------------------------------


def boundary_proximity(points, boundary, alpha):
    """Distance to the nearest boundary point, zeroed within ``alpha`` (inclusive)."""
    boundary = np.atleast_2d(np.asarray(boundary, dtype=float))
    if boundary.size == 0:
        raise ValueError("boundary point set is empty")
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    d, _ = cKDTree(boundary).query(np.atleast_2d(pts))
    mu = np.where(d <= alpha, 0.0, d)
    return float(mu[0]) if single else mu


def quality_gap(q_y, k, stencil):
    """``|q_y[k] - q_y[j]|`` for the stencil members ``j``."""
    q_y = np.asarray(q_y, dtype=float)
    return np.abs(q_y[k] - q_y[np.asarray(stencil, dtype=np.int64)])


def falloff(psi, sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return np.exp(-sigma * np.asarray(psi, dtype=float))


def update_shape_parameters(eps, q_y, stencils, mu, params, floor=0.0):
    """One sweep of shape-parameter decrements.

    Each vertex ``k`` subtracts ``delta * mu_k * exp(-sigma |q_k - q_j|)``
    from the shape parameter of every member ``j`` of its 2-ring stencil
    (itself included). All decrements are computed against the incoming
    ``eps`` and summed in ascending ``k`` order, then the result is floored.

    Parameters
    ----------
    eps : (N,) array
    q_y : (N,) array
        Per-vertex quality.
    stencils : sparse (N, N) matrix
        Row ``k`` holds the 2-ring stencil of ``k``, diagonal included.
    mu : (N,) array
        Boundary proximity of each vertex.
    """
    eps = np.asarray(eps, dtype=float)
    q_y = np.asarray(q_y, dtype=float)
    theta = params.delta * np.asarray(mu, dtype=float)
    if params.quality_gate is not None:
        theta = np.where(q_y < params.quality_gate, theta, 0.0)
    R = stencils.tocsr()
    rows = np.repeat(np.arange(R.shape[0]), np.diff(R.indptr))
    cols = R.indices
    w = theta[rows] * falloff(np.abs(q_y[rows] - q_y[cols]), params.sigma)
    dec = np.bincount(cols, weights=w, minlength=len(eps))
    return np.maximum(eps - dec, floor)


# --- the loop ------------------------------------------------------------


def _evaluate(ctx, eps):
    Y = interpolation.evaluate_pointwise(ctx.interp, ctx.undeformed, eps)
    if ctx.snap is not None:
        idx, images = ctx.snap
        Y[idx] = images
    return Y


def _mu_points(ctx, Y):
    return ctx.mu_points if ctx.mu_points is not None else Y[ctx.boundary_index]


def smoothing_step(state, ctx, params, timings=None):
    """Score the current mesh and, unless the stopping rule fires, produce the next one.

    Returns the new state and the quality report of the mesh that was scored.
    """
    tick = _Timer(timings)
    report = quality_report(state.current_mesh)
    tick("18")
    history = state.history + [report.norm2_qe]
    tick("19")
    stop = len(history) > 1 and history[-1] < max(history[:-1])
    tick("20")
    if stop:
        return replace(state, history=history, converged=True), report
    q_y = report.q_y
    tick("21")
    mu = boundary_proximity(state.current_nodes, _mu_points(ctx, state.current_nodes), params.alpha)
    eps = update_shape_parameters(state.eps, q_y, state.current_mesh.two_ring_matrix,
                                  mu, params, ctx.eps_floor)
    tick("23-30")
    Y = _evaluate(ctx, eps)
    tick("32")
    mesh = tessellate(Y, ctx.holes)
    tick("33")
    mesh.two_ring_matrix
    tick("34")
    new = SmoothingState(eps=eps, current_nodes=Y, current_mesh=mesh, history=history,
                         iteration=state.iteration + 1)
    return new, report


class _Timer:
    def __init__(self, sink):
        self.sink = sink
        self.t = time.perf_counter()

    def __call__(self, key):
        now = time.perf_counter()
        if self.sink is not None:
            self.sink[key].append(now - self.t)
        self.t = now


@dataclass
class RunResult:
    eps_star: float
    interp: interpolation.DeformationInterpolant
    undeformed_mesh: object
    meshes: list
    reports: list
    history: list
    eps_history: list
    best_index: int
    iterations: int
    reason: str
    timings: dict

    @property
    def best_mesh(self):
        return self.meshes[self.best_index]

    @property
    def best_report(self):
        return self.reports[self.best_index]

    @property
    def unsmoothed_mesh(self):
        return self.meshes[0]


def build_context(nodes, domain, deformation, interp, params, snap_boundary=False, holes=None):
    data = np.flatnonzero(nodes.data_mask)
    bidx = np.flatnonzero(nodes.boundary_mask)
    snap = None
    if snap_boundary:
        other = np.flatnonzero(nodes.boundary_mask & ~nodes.data_mask)
        snap = (other, deformation(nodes.coords[other]))
    return SmoothingContext(
        interp=interp,
        undeformed=nodes.coords,
        mu_points=interp.targets if params.mu_source == "data_sites" else None,
        boundary_index=bidx,
        holes=domain.hole_loops(nodes) if holes is None else holes,
        eps_floor=EPS_FLOOR * interp.eps_fit,
        snap=snap,
    )


def run(nodes, domain, deformation, params, kernel_cfg=None, snap_boundary=False):
    """Fit, deform and smooth.

    Parameters
    ----------
    nodes : NodeSet
        Undeformed nodes with data sites marked.
    domain : DomainSpec
    deformation : callable
        Maps undeformed boundary points to their deformed images.
    params : SmoothingParams
    kernel_cfg : KernelConfig, optional

    Returns
    -------
    RunResult
        ``meshes[i]`` is the mesh scored at iteration ``i`` (``0`` is the
        deformed, unsmoothed mesh); ``best_index`` is the argmax of the
        history.
    """
    kernel_cfg = kernel_cfg or kernel.KernelConfig()
    timings = defaultdict(list)
    tick = _Timer(timings)
    Xd = nodes.coords[nodes.data_mask]
    if len(Xd) == 0:
        raise ValueError("no data sites selected")
    Yd = deformation(Xd)
    undeformed_mesh = tessellate(nodes.coords, domain.hole_loops(nodes))
    tick("setup")
    eps_star = kernel.find_shape_parameter(Xd, kernel_cfg)
    tick("10")
    kernel.assemble(Xd, eps_star)
    tick("12")
    interp = interpolation.fit(Xd, Yd, eps_star)
    tick("13")
    ctx = build_context(nodes, domain, deformation, interp, params, snap_boundary)
    eps = np.full(len(nodes), eps_star)
    Y = _evaluate(ctx, eps)
    tick("14")
    mesh = tessellate(Y, ctx.holes)
    tick("15")
    mesh.two_ring_matrix
    tick("16")

    state = SmoothingState(eps=eps, current_nodes=Y, current_mesh=mesh)
    meshes, reports, eps_history = [], [], []
    reason = "max_iterations"
    while True:
        meshes.append(state.current_mesh)
        eps_history.append(state.eps)
        if state.iteration >= params.max_iterations:
            # score the last mesh but do not produce another
            report = quality_report(state.current_mesh)
            state = replace(state, history=state.history + [report.norm2_qe])
            reports.append(report)
            break
        state, report = smoothing_step(state, ctx, params, timings)
        reports.append(report)
        logger.info("iteration %d: |q_e|_2 = %.6f, min q_e = %.4f",
                    len(reports) - 1, report.norm2_qe, report.min_qe)
        if state.converged:
            reason = "quality_decrease"
            break
    history = state.history
    best = int(np.argmax(history))
    return RunResult(
        eps_star=eps_star, interp=interp, undeformed_mesh=undeformed_mesh,
        meshes=meshes, reports=reports, history=list(history), eps_history=eps_history,
        best_index=best, iterations=state.iteration, reason=reason,
        timings={k: v for k, v in timings.items()},
    )


# --- Laplace baseline ----------------------------------------------------


def laplace_smooth(mesh, fixed, iterations, holes=()):
    """Jacobi Laplace smoothing with fixed vertices, then re-tessellation.

    Every free vertex moves to the mean of its 1-ring neighbours, all
    computed from the previous positions.
    """
    fixed = np.asarray(fixed, dtype=bool)
    A = mesh.adjacency
    deg = np.asarray(A.sum(axis=1)).ravel()
    free = ~fixed & (deg > 0)
    V = mesh.vertices.copy()
    for _ in range(int(iterations)):
        mean = (A @ V) / np.maximum(deg, 1)[:, None]
        V[free] = mean[free]
    return tessellate(V, holes)
