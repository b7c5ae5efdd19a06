"""Simplicial meshes: Delaunay tessellation, stencils, quality and validity."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial import Delaunay, QhullError


class DegenerateInputError(ValueError):
    pass


@dataclass(eq=False)
class SimplicialMesh:
    vertices: np.ndarray
    elements: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, self.dim + 1)

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @cached_property
    def incidence(self):
        """Sparse ``N x E`` vertex-element incidence matrix."""
        E, k = self.elements.shape
        rows = self.elements.ravel()
        cols = np.repeat(np.arange(E), k)
        return sparse.csr_matrix((np.ones(E * k), (rows, cols)), shape=(self.n_vertices, E))

    @cached_property
    def vertex_to_elements(self):
        inc = self.incidence
        return [inc.indices[inc.indptr[i]:inc.indptr[i + 1]] for i in range(self.n_vertices)]

    @cached_property
    def adjacency(self):
        """Boolean 1-ring adjacency without the diagonal (vertices sharing an edge)."""
        A = (self.incidence @ self.incidence.T).tocsr()
        A.setdiag(0)
        A.eliminate_zeros()
        A.data[:] = 1.0
        return A

    @cached_property
    def two_ring_matrix(self):
        """Boolean matrix of vertices within two edges, diagonal included."""
        A = self.adjacency
        R = (sparse.identity(self.n_vertices, format="csr") + A + A @ A).tocsr()
        R.data[:] = 1.0
        R.sort_indices()
        return R

    def edges(self):
        A = sparse.triu(self.adjacency, k=1).tocoo()
        e = np.c_[A.row, A.col]
        return e[np.lexsort((e[:, 1], e[:, 0]))]


# --- geometry of simplices -----------------------------------------------


def signed_measure(vertices, elements):
    """Signed area (2D) or volume (3D) of each element in stored vertex order."""
    P = np.asarray(vertices, dtype=float)[np.asarray(elements)]
    D = P[:, 1:] - P[:, :1]
    if P.shape[-1] == 2:
        return 0.5 * (D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0])
    return np.linalg.det(D) / 6.0


def _triangle_quality(P):
    a = np.linalg.norm(P[:, 1] - P[:, 2], axis=1)
    b = np.linalg.norm(P[:, 0] - P[:, 2], axis=1)
    c = np.linalg.norm(P[:, 0] - P[:, 1], axis=1)
    D = P[:, 1:] - P[:, :1]
    if P.shape[-1] == 2:
        area = 0.5 * np.abs(D[:, 0, 0] * D[:, 1, 1] - D[:, 0, 1] * D[:, 1, 0])
    else:
        area = 0.5 * np.linalg.norm(np.cross(D[:, 0], D[:, 1]), axis=1)
    denom = a * b * c * (a + b + c)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(denom > 0, 16.0 * area * area / denom, 0.0)
    return q


def _tet_quality(P):
    a, b, c = P[:, 1] - P[:, 0], P[:, 2] - P[:, 0], P[:, 3] - P[:, 0]
    bxc, cxa, axb = np.cross(b, c), np.cross(c, a), np.cross(a, b)
    det = np.einsum("ij,ij->i", a, bxc)
    vol = np.abs(det) / 6.0

    def tri_area(u, v, w):
        return 0.5 * np.linalg.norm(np.cross(v - u, w - u), axis=1)

    faces = (tri_area(P[:, 1], P[:, 2], P[:, 3]) + tri_area(P[:, 0], P[:, 2], P[:, 3])
             + tri_area(P[:, 0], P[:, 1], P[:, 3]) + tri_area(P[:, 0], P[:, 1], P[:, 2]))
    num = ((a * a).sum(1)[:, None] * bxc + (b * b).sum(1)[:, None] * cxa
           + (c * c).sum(1)[:, None] * axb)
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.linalg.norm(num, axis=1) / (2.0 * np.abs(det))
        r = 3.0 * vol / faces
        q = np.where((vol > 0) & (faces > 0), 3.0 * r / R, 0.0)
    return q


def element_qualities(vertices, elements):
    """Normalized inradius/circumradius ratio for every element, 1 for regular simplices.

    Triangles use ``16 A^2 / (abc (a + b + c))``, tetrahedra ``3 r / R``.
    Zero-measure elements score 0.
    """
    P = np.asarray(vertices, dtype=float)[np.asarray(elements)]
    if P.shape[1] == 3:
        q = _triangle_quality(P)
    elif P.shape[1] == 4:
        q = _tet_quality(P)
    else:
        raise ValueError("elements must be triangles or tetrahedra")
    return np.clip(q, 0.0, 1.0)


def element_quality(coords):
    """Quality of a single element given its ``(s + 1, s)`` vertex coordinates."""
    coords = np.asarray(coords, dtype=float)
    return float(element_qualities(coords, np.arange(len(coords))[None, :])[0])


# --- robust predicates ---------------------------------------------------


def _lifted(simplex, q):
    # rows (p - q, |p - q|^2) for the simplex vertices
    rows = []
    for p in simplex:
        d = [pi - qi for pi, qi in zip(p, q)]
        rows.append(d + [sum(x * x for x in d)])
    return rows


def _det(M):
    n = len(M)
    if n == 1:
        return M[0][0]
    total = 0
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in M[1:]]
        term = M[0][j] * _det(minor)
        total = total + term if j % 2 == 0 else total - term
    return total


def _orient_exact(simplex):
    base = simplex[0]
    return _det([[pi - bi for pi, bi in zip(p, base)] for p in simplex[1:]])


def in_circumball(simplex, q):
    """Sign of the in-circle (2D) / in-sphere (3D) test for point ``q``.

    Positive when ``q`` is strictly inside the circumball of ``simplex``,
    zero when cocircular, negative outside; independent of vertex order.
    A floating-point determinant is used when it clears a conservative error
    bound, exact rational arithmetic otherwise.
    """
    S = np.asarray(simplex, dtype=float)
    q = np.asarray(q, dtype=float)
    D = S - q
    L = np.c_[D, (D * D).sum(1)]
    O = S[1:] - S[0]
    det_l, det_o = np.linalg.det(L), np.linalg.det(O)
    mag = np.prod(np.abs(L).sum(axis=1))
    mag_o = np.prod(np.abs(O).sum(axis=1))
    bound = 1e-13 * mag
    if abs(det_l) > bound and abs(det_o) > 1e-13 * mag_o:
        sgn = np.sign(det_l) * np.sign(det_o)
        # lifted determinant sign convention differs by dimension
        return int(sgn if S.shape[1] == 2 else -sgn)
    Sx = [[Fraction(float(v)) for v in p] for p in S]
    qx = [Fraction(float(v)) for v in q]
    dl = _det(_lifted(Sx, qx))
    do = _orient_exact(Sx)
    if do == 0:
        raise DegenerateInputError("flat simplex in in-circumball test")
    sgn = (dl > 0) - (dl < 0)
    sgn *= 1 if do > 0 else -1
    return int(sgn if S.shape[1] == 2 else -sgn)


def delaunay_violations(mesh, tol=None):
    """Elements with a mesh vertex strictly inside their circumball.

    A vertex counts only when it lies inside by more than ``tol`` in the
    squared-distance sense (``|c - q|^2 < R^2 - tol``).
    """
    if tol is None:
        tol = 0.0
    P = mesh.vertices
    bad = []
    for e, simp in enumerate(mesh.elements):
        S = P[simp]
        c, R2 = circumsphere(S)
        d2 = ((P - c) ** 2).sum(1)
        cand = np.flatnonzero(d2 < R2 - tol)
        cand = cand[~np.isin(cand, simp)]
        for v in cand:
            if tol > 0 or in_circumball(S, P[v]) > 0:
                bad.append((e, int(v)))
                break
    return bad


def circumsphere(S):
    S = np.asarray(S, dtype=float)
    A = 2.0 * (S[1:] - S[0])
    b = (S[1:] ** 2).sum(1) - (S[0] ** 2).sum()
    c = np.linalg.solve(A, b)
    return c, float(((S[0] - c) ** 2).sum())


# --- tessellation --------------------------------------------------------


def points_in_polygon(points, polygon):
    """Even-odd rule containment of ``points`` in the closed ``polygon``."""
    x, y = points[:, 0][:, None], points[:, 1][:, None]
    x0, y0 = polygon[:, 0][None, :], polygon[:, 1][None, :]
    x1, y1 = np.roll(polygon[:, 0], -1)[None, :], np.roll(polygon[:, 1], -1)[None, :]
    straddle = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return (np.count_nonzero(straddle & (x < xc), axis=1) % 2) == 1


def orient(vertices, elements):
    """Swap the last two indices of negatively oriented elements."""
    el = np.array(elements, dtype=np.int64, copy=True)
    neg = signed_measure(vertices, el) < 0
    el[neg, -2:] = el[neg, -2:][:, ::-1]
    return el


def tessellate(vertices, holes=()):
    """Delaunay tessellation with canonically (positively) oriented elements.

    Parameters
    ----------
    vertices : (N, s) array
    holes : sequence of index arrays
        Closed boundary loops (2D only); elements whose centroid falls inside
        the polygon traced by a loop are discarded.
    """
    P = np.asarray(vertices, dtype=float)
    N, s = P.shape
    if N < s + 1:
        raise DegenerateInputError(f"need at least {s + 1} points, got {N}")
    try:
        tri = Delaunay(P)
        if len(tri.coplanar):
            # a vertex was dropped as numerically coincident; joggle instead
            tri = Delaunay(P, qhull_options="QJ")
    except QhullError as exc:
        raise DegenerateInputError(f"tessellation failed: {exc}".splitlines()[0]) from exc
    el = tri.simplices.astype(np.int64)
    vol = signed_measure(P, el)
    # relative to the bounding-box measure so anisotropic inputs are treated fairly
    scale = np.prod(np.ptp(P, axis=0))
    el = el[np.abs(vol) > 1e-14 * scale]
    if len(el) == 0:
        raise DegenerateInputError("all points are affinely dependent")
    for loop in holes:
        if len(loop) >= 3:
            cen = P[el].mean(axis=1)
            el = el[~points_in_polygon(cen, P[np.asarray(loop)])]
    el = orient(P, el)
    # deterministic element order
    el = el[np.lexsort(np.sort(el, axis=1).T[::-1])]
    return SimplicialMesh(P.copy(), el)


# --- stencils and quality ------------------------------------------------


def two_ring(mesh, k):
    """Vertices within two edges of ``k``, excluding ``k``, ascending."""
    R = mesh.two_ring_matrix
    nb = R.indices[R.indptr[k]:R.indptr[k + 1]]
    return nb[nb != k]


def per_vertex_quality(mesh, q_e, stencils=None):
    """Mean element quality over elements touching any vertex of the 2-ring stencil."""
    q_e = np.asarray(q_e, dtype=float)
    if len(q_e) != mesh.n_elements:
        raise ValueError("q_e must have one entry per element")
    R = mesh.two_ring_matrix if stencils is None else stencils
    M = (R @ mesh.incidence).tocsr()
    M.data[:] = 1.0
    counts = np.asarray(M.sum(axis=1)).ravel()
    with np.errstate(invalid="ignore", divide="ignore"):
        q_y = (M @ q_e) / counts
    # vertices in no element (should not happen) inherit the global mean
    q_y[counts == 0] = q_e.mean() if len(q_e) else 0.0
    return q_y


def orientation_check(mesh, vertices=None):
    """Count elements with nonpositive signed measure in stored order.

    Pass ``vertices`` to test the mesh's connectivity at other (e.g. deformed)
    positions.
    """
    V = mesh.vertices if vertices is None else vertices
    return int(np.count_nonzero(signed_measure(V, mesh.elements) <= 0))


@dataclass
class QualityReport:
    q_e: np.ndarray
    q_y: np.ndarray
    norm2_qe: float
    norm2_qy: float
    min_qe: float
    mean_qe: float
    min_qy: float
    inverted_count: int


def quality_report(mesh):
    q_e = element_qualities(mesh.vertices, mesh.elements)
    q_y = per_vertex_quality(mesh, q_e)
    return QualityReport(
        q_e=q_e, q_y=q_y,
        norm2_qe=float(np.linalg.norm(q_e)), norm2_qy=float(np.linalg.norm(q_y)),
        min_qe=float(q_e.min()), mean_qe=float(q_e.mean()), min_qy=float(q_y.min()),
        inverted_count=orientation_check(mesh),
    )
