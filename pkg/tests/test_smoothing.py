import itertools
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from meshmorph import mesh as mesh_mod
from meshmorph import smoothing
from meshmorph.geometry import DomainSpec, generate_nodes, select_data_sites, square_to_disk
from meshmorph.interpolation import evaluate_uniform
from meshmorph.mesh import SimplicialMesh, quality_report, tessellate
from meshmorph.smoothing import (EPS_FLOOR, SmoothingParams, SmoothingState, boundary_proximity,
                                 build_context, falloff, laplace_smooth, quality_gap, run,
                                 smoothing_step, update_shape_parameters)


@pytest.fixture(scope="module")
def small_square():
    d = DomainSpec("unit_square")
    nodes = select_data_sites(generate_nodes(d, 0.1, seed=2), 0.86, seed=2)
    return d, nodes


def grid_mesh(n=3):
    x, y = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    V = np.c_[x.ravel(), y.ravel()]
    E = []
    for j in range(n - 1):
        for i in range(n - 1):
            a, b, c, d = j * n + i, j * n + i + 1, (j + 1) * n + i, (j + 1) * n + i + 1
            E += [[a, b, d], [a, d, c]]
    return SimplicialMesh(V, np.array(E))


# --- per-vertex pieces ---------------------------------------------------


def test_proximity_examples():
    B = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert boundary_proximity([0.0, 0.0], B, 1e-3) == 0.0
    assert boundary_proximity([0.0, 0.25], B, 0.25) == 0.0  # exactly alpha: inclusive
    assert boundary_proximity([0.5, 0.5 * math.sqrt(3)], B, 1e-3) == pytest.approx(1.0)
    assert boundary_proximity([0.5, 0.0], B[:1], 1e-3) == 0.5
    with pytest.raises(ValueError):
        boundary_proximity([0.0, 0.0], np.empty((0, 2)), 1e-3)


def test_quality_gap_examples():
    np.testing.assert_array_equal(quality_gap(np.full(4, 0.7), 0, [1, 2, 3]), [0, 0, 0])
    np.testing.assert_allclose(quality_gap([0.9, 0.9, 0.5], 0, [1, 2]), [0.0, 0.4])


def test_quality_gap_random(rng):
    m = tessellate(rng.uniform(0, 1, (20, 2)))
    q = rng.uniform(0, 1, 20)
    for k in range(20):
        st_k = mesh_mod.two_ring(m, k)
        np.testing.assert_array_equal(quality_gap(q, k, st_k), [abs(q[k] - q[j]) for j in st_k])


def test_falloff_examples():
    assert falloff(0.0, 3.0) == 1.0
    assert falloff(math.log(2) / 0.7, 0.7) == pytest.approx(0.5, rel=1e-15)
    g = falloff([0.0, 0.1, 0.5, 2.0], 1.3)
    assert np.all(np.diff(g) < 0) and np.all((g > 0) & (g <= 1))
    with pytest.raises(ValueError):
        falloff(0.1, 0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        SmoothingParams(delta=-1)
    with pytest.raises(ValueError):
        SmoothingParams(sigma=0)
    with pytest.raises(ValueError):
        SmoothingParams(max_iterations=0)
    with pytest.raises(ValueError):
        SmoothingParams(mu_source="all")


# --- the update ----------------------------------------------------------


def test_update_single_triangle_uniform_quality():
    m = SimplicialMesh(np.array([[0, 0], [1, 0], [0, 1.0]]), [[0, 1, 2]])
    mu = np.array([0.2, 0.3, 0.5])
    p = SmoothingParams(delta=0.01, sigma=2.0)
    eps = update_shape_parameters(np.full(3, 1.0), np.full(3, 0.6), m.two_ring_matrix, mu, p)
    # every vertex is in all three stencils and gamma = 1
    np.testing.assert_allclose(eps, 1.0 - 0.01 * mu.sum(), rtol=1e-15)


def test_update_zero_proximity_is_noop():
    m = grid_mesh()
    eps0 = np.linspace(0.5, 1.0, 9)
    eps = update_shape_parameters(eps0, np.random.default_rng(0).uniform(size=9),
                                  m.two_ring_matrix, np.zeros(9), SmoothingParams(delta=0.1))
    assert np.array_equal(eps, eps0)


def manual_trace(eps, q_y, mesh, mu, delta, sigma):
    """Literal transcription of the per-vertex loop with a snapshot of eps."""
    adj = {v: set() for v in range(mesh.n_vertices)}
    for e in mesh.elements.tolist():
        for a, b in itertools.combinations(e, 2):
            adj[a].add(b)
            adj[b].add(a)
    new = list(eps)
    for k in range(len(eps)):
        # stencil: k and everything within two hops
        seen, frontier = {k: 0}, deque([k])
        while frontier:
            v = frontier.popleft()
            for w in adj[v]:
                if w not in seen and seen[v] < 2:
                    seen[w] = seen[v] + 1
                    frontier.append(w)
        theta = delta * mu[k]
        for j in sorted(seen):
            psi = abs(q_y[k] - q_y[j])
            new[j] -= theta * math.exp(-sigma * psi)
    return np.array(new)


def test_update_matches_manual_trace():
    m = grid_mesh(3)
    q_y = np.array([0.9, 0.8, 0.85, 0.4, 0.95, 0.7, 0.6, 0.88, 0.77])
    mu = np.array([0.0, 0.1, 0.0, 0.3, 0.25, 0.0, 0.05, 0.2, 0.15])
    eps0 = np.full(9, 0.5)
    p = SmoothingParams(delta=0.02, sigma=1.5)
    got = update_shape_parameters(eps0, q_y, m.two_ring_matrix, mu, p)
    np.testing.assert_allclose(got, manual_trace(eps0, q_y, m, mu, 0.02, 1.5), rtol=0, atol=1e-15)
    # corner 8's stencil covers vertices 2..8; corner 0's covers 0..6
    assert got[0] < eps0[0]


def test_update_floor_and_gate():
    m = grid_mesh(3)
    mu = np.ones(9)
    eps = update_shape_parameters(np.full(9, 1.0), np.full(9, 0.5), m.two_ring_matrix, mu,
                                  SmoothingParams(delta=10.0), floor=1e-3)
    np.testing.assert_array_equal(eps, 1e-3)
    m = grid_mesh(4)
    mu = np.ones(16)
    q = np.r_[np.full(15, 0.9), 0.2]
    gated = update_shape_parameters(np.full(16, 1.0), q, m.two_ring_matrix, mu,
                                    SmoothingParams(delta=0.01, quality_gate=0.5))
    ungated = update_shape_parameters(np.full(16, 1.0), q, m.two_ring_matrix, mu,
                                      SmoothingParams(delta=0.01))
    # only vertex 15 drives updates when gated; its stencil is {5,6,7,9,10,11,13,14,15}
    untouched = [0, 1, 2, 3, 4, 8, 12]
    assert np.all(gated[untouched] == 1.0) and np.all(np.delete(gated, untouched) < 1.0)
    assert np.all(ungated <= gated)


@given(st.integers(0, 2 ** 31))
def test_update_monotone_and_positive(seed):
    rng = np.random.default_rng(seed)
    m = tessellate(rng.uniform(0, 1, (30, 2)))
    eps0 = rng.uniform(0.1, 1.0, 30)
    eps = update_shape_parameters(eps0, rng.uniform(size=30), m.two_ring_matrix,
                                  rng.uniform(0, 1, 30), SmoothingParams(delta=rng.uniform(0, 1)),
                                  floor=1e-4)
    assert np.all(eps <= eps0) and np.all(eps >= 1e-4)


# --- steps and runs ------------------------------------------------------


def _prepared(domain, nodes, params):
    from meshmorph import interpolation, kernel
    Xd = nodes.coords[nodes.data_mask]
    interp = interpolation.fit(Xd, square_to_disk(Xd), kernel.find_shape_parameter(Xd))
    ctx = build_context(nodes, domain, square_to_disk, interp, params)
    eps = np.full(len(nodes), interp.eps_fit)
    Y = evaluate_uniform(interp, nodes.coords)
    return ctx, SmoothingState(eps=eps, current_nodes=Y, current_mesh=tessellate(Y))


def test_step_with_zero_delta_is_fixed_point(small_square):
    d, nodes = small_square
    p = SmoothingParams(delta=0.0)
    ctx, state = _prepared(d, nodes, p)
    new, report = smoothing_step(state, ctx, p)
    assert np.array_equal(new.current_nodes, state.current_nodes)
    assert np.array_equal(new.current_mesh.elements, state.current_mesh.elements)
    assert new.history == [report.norm2_qe] and new.iteration == 1


def test_step_updates_even_with_perfect_quality(small_square, monkeypatch):
    d, nodes = small_square
    p = SmoothingParams(delta=1e-3, alpha=1e-3)
    ctx, state = _prepared(d, nodes, p)
    real = smoothing.quality_report

    def perfect(mesh):
        r = real(mesh)
        r.q_e[:] = 1.0
        r.q_y[:] = 1.0
        return r

    monkeypatch.setattr(smoothing, "quality_report", perfect)
    new, _ = smoothing_step(state, ctx, p)
    mu = boundary_proximity(state.current_nodes, ctx.mu_points, p.alpha)
    assert np.all(new.eps[mu > 0] < state.eps[mu > 0])


def test_step_moves_only_updated_rows(small_square):
    d, nodes = small_square
    p = SmoothingParams(delta=1e-3, sigma=0.1, alpha=1e-3)
    ctx, state = _prepared(d, nodes, p)
    new, _ = smoothing_step(state, ctx, p)
    touched = new.eps != state.eps
    moved = np.any(new.current_nodes != state.current_nodes, axis=1)
    assert np.array_equal(moved, touched)
    # data sites sit at distance 0 from their own images, so their own stencils add nothing,
    # but at this spacing every node is within two rings of some node with mu > 0
    mu = boundary_proximity(state.current_nodes, ctx.mu_points, p.alpha)
    assert np.all(mu[nodes.data_mask] == 0)
    assert np.all(moved[mu > 0])


@pytest.fixture(scope="module")
def square_run(small_square):
    d, nodes = small_square
    return run(nodes, d, square_to_disk, SmoothingParams(delta=1e-3, sigma=0.1, alpha=1e-3))


def test_run_history_and_stopping(square_run):
    r = square_run
    assert len(r.history) == len(r.meshes) == len(r.reports) == r.iterations + 1
    for h, m in zip(r.history, r.meshes):
        assert h == quality_report(m).norm2_qe
    if r.reason == "quality_decrease":
        assert r.history[-1] < max(r.history[:-1])
        assert all(r.history[i] >= max(r.history[:i]) for i in range(1, len(r.history) - 1))
    assert r.best_index == int(np.argmax(r.history))
    assert r.best_mesh is r.meshes[r.best_index]


def test_run_eps_monotone_and_floored(square_run):
    E = np.array(square_run.eps_history)
    assert np.all(np.diff(E, axis=0) <= 0)
    assert np.all(E >= EPS_FLOOR * square_run.eps_star)
    assert np.all(E[0] == square_run.eps_star)


def test_run_untouched_data_sites_stay_interpolated(square_run, small_square):
    _, nodes = small_square
    r = square_run
    data = np.flatnonzero(nodes.data_mask)
    for eps, m in zip(r.eps_history, r.meshes):
        keep = data[eps[data] == r.eps_star]
        np.testing.assert_allclose(m.vertices[keep], square_to_disk(nodes.coords[keep]), atol=1e-8)


def test_run_with_zero_delta(small_square):
    d, nodes = small_square
    r = run(nodes, d, square_to_disk, SmoothingParams(delta=0.0, max_iterations=4))
    assert r.reason == "max_iterations" and r.iterations == 4
    for m in r.meshes[1:]:
        assert np.array_equal(m.vertices, r.meshes[0].vertices)
        assert np.array_equal(m.elements, r.meshes[0].elements)
    assert len(set(r.history)) == 1 and r.best_index == 0


def test_run_rejects_missing_data_sites(small_square):
    d, nodes = small_square
    with pytest.raises(ValueError):
        run(nodes.with_roles(np.where(nodes.boundary_mask, 1, 0)), d, square_to_disk,
            SmoothingParams())


def test_run_snap_boundary(small_square):
    d, nodes = small_square
    r = run(nodes, d, square_to_disk, SmoothingParams(delta=0.0, max_iterations=1),
            snap_boundary=True)
    B = nodes.boundary_mask
    np.testing.assert_allclose(np.linalg.norm(r.meshes[0].vertices[B], axis=1), 1.0, atol=1e-8)


def test_run_timings_keys(square_run):
    assert {"10", "12", "13", "14", "15", "16"} <= set(square_run.timings)
    assert all(t >= 0 for v in square_run.timings.values() for t in v)


# --- Laplace -------------------------------------------------------------


def hexagon(perturb=(0.0, 0.0)):
    t = np.arange(6) * np.pi / 3
    V = np.vstack([np.asarray(perturb, dtype=float), np.c_[np.cos(t), np.sin(t)]])
    E = [[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)]
    return SimplicialMesh(V, np.array(E))


def test_laplace_centroidal_vertex_unchanged():
    m = hexagon()
    out = laplace_smooth(m, np.r_[False, np.ones(6, bool)], 3)
    np.testing.assert_allclose(out.vertices[0], [0, 0], atol=1e-15)


def test_laplace_returns_to_centroid_in_one_sweep():
    m = hexagon((0.3, -0.2))
    out = laplace_smooth(m, np.r_[False, np.ones(6, bool)], 1)
    np.testing.assert_allclose(out.vertices[0], [0, 0], atol=1e-15)
    np.testing.assert_array_equal(out.vertices[1:], m.vertices[1:])
    assert quality_report(out).inverted_count == 0


def test_laplace_zero_iterations_keeps_vertices(small_square):
    d, nodes = small_square
    m = tessellate(nodes.coords)
    out = laplace_smooth(m, nodes.boundary_mask, 0)
    assert np.array_equal(out.vertices, m.vertices)


def test_laplace_stays_in_ring_hull(rng):
    m = tessellate(rng.uniform(0, 1, (60, 2)))
    hull = ConvexHull(m.vertices).vertices
    fixed = np.zeros(60, bool)
    fixed[hull] = True
    out = laplace_smooth(m, fixed, 1)
    A = m.adjacency
    for k in np.flatnonzero(~fixed):
        ring = m.vertices[A[k].indices]
        h = ConvexHull(ring) if len(ring) >= 3 else None
        if h is None:
            continue
        eq = h.equations
        assert np.all(eq[:, :2] @ out.vertices[k] + eq[:, 2] <= 1e-12)
