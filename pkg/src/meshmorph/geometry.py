"""Canonical domains, node generation and boundary deformation maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import Delaunay

INTERIOR, BOUNDARY, DATA_SITE = 0, 1, 2

DOMAIN_KINDS = ("unit_square", "unit_disk", "annulus", "unit_cube", "unit_ball")

# default Joukowsky pre-map centre; the scale is chosen so the circle hits z = 1
JOUKOWSKY_CENTER = complex(-0.08, 0.08)


class InfeasibleSpacingError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    """Undeformed domain. Squares and cubes are ``[-1, 1]^s``."""

    kind: str
    r_in: float = 0.5
    r_out: float = 1.0

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.kind == "annulus" and not 0 < self.r_in < self.r_out:
            raise ValueError("annulus requires 0 < r_in < r_out")

    @property
    def dim(self):
        return 3 if self.kind in ("unit_cube", "unit_ball") else 2

    def boundary_fn(self, points):
        """Signed distance to the boundary, negative inside."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind in ("unit_square", "unit_cube"):
            q = np.abs(p) - 1.0
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            return outside + np.minimum(q.max(axis=1), 0.0)
        r = np.linalg.norm(p, axis=1)
        if self.kind == "annulus":
            return np.maximum(r - self.r_out, self.r_in - r)
        return r - 1.0

    def gradient(self, points, step=1e-7):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d0 = self.boundary_fn(p)
        g = np.empty_like(p)
        for k in range(p.shape[1]):
            dp = p.copy()
            dp[:, k] += step
            g[:, k] = (self.boundary_fn(dp) - d0) / step
        return g

    @property
    def diameter(self):
        if self.kind == "unit_square":
            return 2.0 * math.sqrt(2.0)
        if self.kind == "unit_cube":
            return 2.0 * math.sqrt(3.0)
        return 2.0 * (self.r_out if self.kind == "annulus" else 1.0)

    def hole_loops(self, nodes):
        """Ordered index loops of boundary nodes that bound holes (annulus inner circle)."""
        if self.kind != "annulus":
            return []
        X = nodes.coords
        r = np.linalg.norm(X, axis=1)
        inner = np.flatnonzero(nodes.boundary_mask & (np.abs(r - self.r_in) < np.abs(r - self.r_out)))
        theta = np.arctan2(X[inner, 1], X[inner, 0])
        return [inner[np.argsort(theta, kind="stable")]]


@dataclass
class NodeSet:
    coords: np.ndarray
    role: np.ndarray
    spacing: float = field(default=float("nan"))

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.role = np.asarray(self.role, dtype=np.int8)
        if len(self.role) != len(self.coords):
            raise ValueError("role array must align with coords")

    def __len__(self):
        return len(self.coords)

    @property
    def dim(self):
        return self.coords.shape[1]

    @property
    def boundary_mask(self):
        return self.role != INTERIOR

    @property
    def interior_mask(self):
        return self.role == INTERIOR

    @property
    def data_mask(self):
        return self.role == DATA_SITE

    @property
    def n_interior(self):
        return int(self.interior_mask.sum())

    @property
    def n_boundary(self):
        return int(self.boundary_mask.sum())

    @property
    def n_data(self):
        return int(self.data_mask.sum())

    def with_roles(self, role):
        return replace(self, coords=self.coords.copy(), role=np.asarray(role, dtype=np.int8))


# --- node generation -----------------------------------------------------


def _square_perimeter(m, half=1.0):
    # 4m points counterclockwise from (-half, -half), corners included
    t = np.arange(m) / m
    side = 2.0 * half * t - half
    one = np.full(m, half)
    return np.concatenate([
        np.c_[side, -one], np.c_[one, side], np.c_[-side, one], np.c_[-one, -side],
    ])


def _circle(n, radius):
    t = 2.0 * np.pi * np.arange(n) / n
    return radius * np.c_[np.cos(t), np.sin(t)]


def _cube_surface(m):
    g = np.linspace(-1.0, 1.0, m + 1)
    P = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    on_face = np.any(np.abs(P) == 1.0, axis=1)
    return P[on_face]


def _fibonacci_sphere(n):
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    rho = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - math.sqrt(5.0)) * k
    return np.c_[rho * np.cos(phi), rho * np.sin(phi), z]


def boundary_nodes(domain, h):
    """Boundary sample with spacing close to ``h``."""
    if domain.kind == "unit_square":
        return _square_perimeter(max(1, round(2.0 / h)))
    if domain.kind == "unit_disk":
        return _circle(max(3, round(2.0 * np.pi / h)), 1.0)
    if domain.kind == "annulus":
        return np.vstack([
            _circle(max(3, round(2.0 * np.pi * domain.r_out / h)), domain.r_out),
            _circle(max(3, round(2.0 * np.pi * domain.r_in / h)), domain.r_in),
        ])
    if domain.kind == "unit_cube":
        return _cube_surface(max(1, round(2.0 / h)))
    return _fibonacci_sphere(max(4, round(8.0 * np.pi / (math.sqrt(3.0) * h * h))))


def _lattice(domain, h, rng):
    s = domain.dim
    ext = domain.r_out if domain.kind == "annulus" else 1.0
    if s == 2:
        dy = h * math.sqrt(3.0) / 2.0
        ys = np.arange(-ext, ext + dy, dy)
        xs = np.arange(-ext, ext + h, h)
        X, Y = np.meshgrid(xs, ys)
        X = X + 0.5 * h * (np.arange(len(ys))[:, None] % 2)
        P = np.c_[X.ravel(), Y.ravel()]
    else:
        g = np.arange(-ext, ext + h, h)
        P = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    # small jitter breaks the cospherical ties of a perfect lattice
    P = P + 0.05 * h * rng.uniform(-1.0, 1.0, P.shape)
    return P[domain.boundary_fn(P) < -0.5 * h]


def _bars(simplices):
    s = simplices.shape[1]
    pairs = [(a, b) for a in range(s) for b in range(a + 1, s)]
    e = np.vstack([simplices[:, [a, b]] for a, b in pairs])
    e.sort(axis=1)
    n = int(e.max()) + 1
    key = np.unique(e[:, 0].astype(np.int64) * n + e[:, 1])
    return np.c_[key // n, key % n]


def generate_nodes(domain, h, seed=0, max_iter=500, tol=1e-3):
    """Quasi-uniform nodes with spacing ``h``: a fixed boundary sample plus relaxed interior nodes.

    Interior nodes start on a jittered lattice and are relaxed with
    DistMesh-style repulsive bar forces against a Delaunay triangulation. They
    are kept at least ``h/2`` inside the boundary.
    """
    if h <= 0:
        raise ValueError("spacing must be positive")
    rng = np.random.default_rng(seed)
    s = domain.dim
    B = boundary_nodes(domain, h)
    P = _lattice(domain, h, rng)
    if len(P) < s + 2:
        raise InfeasibleSpacingError(
            f"spacing {h:g} leaves {len(P)} interior nodes in {domain.kind}; need {s + 2}")
    nb = len(B)
    fscale = 1.0 + 0.4 / 2 ** (s - 1)
    deltat = 0.2
    # retriangulation dominates the cost in 3D
    retri = 0.1 * h if s == 2 else 0.3 * h
    pts = np.vstack([B, P])
    last = np.full_like(pts, np.inf)
    bars = None
    for _ in range(max_iter):
        if np.max(np.linalg.norm(pts - last, axis=1)) > retri:
            last = pts.copy()
            simp = Delaunay(pts).simplices
            centroids = pts[simp].mean(axis=1)
            simp = simp[domain.boundary_fn(centroids) < -1e-3 * h]
            bars = _bars(simp)
        vec = pts[bars[:, 0]] - pts[bars[:, 1]]
        L = np.linalg.norm(vec, axis=1)
        L0 = fscale * h * math.sqrt(np.sum(L ** 2) / (len(L) * h * h))
        F = np.maximum(L0 - L, 0.0)
        Fvec = (F / L)[:, None] * vec
        Ftot = np.zeros_like(pts)
        for k in range(s):
            Ftot[:, k] += np.bincount(bars[:, 0], Fvec[:, k], minlength=len(pts))
            Ftot[:, k] -= np.bincount(bars[:, 1], Fvec[:, k], minlength=len(pts))
        Ftot[:nb] = 0.0
        move = deltat * Ftot
        pts = pts + move
        inner = pts[nb:]
        d = domain.boundary_fn(inner)
        out = d > -0.5 * h
        if np.any(out):
            g = domain.gradient(inner[out])
            g /= np.linalg.norm(g, axis=1, keepdims=True)
            inner[out] -= (d[out] + 0.5 * h)[:, None] * g
            pts[nb:] = inner
        if np.max(np.linalg.norm(move[nb:], axis=1)) < tol * h:
            break
    role = np.r_[np.full(nb, BOUNDARY), np.full(len(pts) - nb, INTERIOR)]
    return NodeSet(pts, role, float(h))


def node_count(domain, h, seed=0):
    """Number of nodes :func:`generate_nodes` returns, without the relaxation."""
    return len(boundary_nodes(domain, h)) + len(_lattice(domain, h, np.random.default_rng(seed)))


def spacing_for_count(domain, n, seed=0):
    """Spacing whose node count is closest to ``n`` (bisection in ``log h``)."""
    if n < 2 * (domain.dim + 2):
        raise InfeasibleSpacingError(f"node count {n} is too small")
    # below a quarter of the uniform-cell spacing the count is far above n
    lo, hi = 0.25 * (2.0 ** domain.dim / n) ** (1.0 / domain.dim), 1.0
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if node_count(domain, mid, seed) > n:
            lo = mid
        else:
            hi = mid
    return min((lo, hi), key=lambda h: abs(node_count(domain, h, seed) - n))


def classify_boundary(nodes, domain, alpha):
    """Role ``BOUNDARY`` where ``|boundary_fn| <= alpha``, ``INTERIOR`` elsewhere."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    d = domain.boundary_fn(nodes.coords)
    return nodes.with_roles(np.where(np.abs(d) <= alpha, BOUNDARY, INTERIOR))


def select_data_sites(nodes, p, seed=0):
    """Mark ``ceil(p * N_b)`` boundary nodes, drawn uniformly, as data sites."""
    if not 0 < p <= 1:
        raise ValueError("fraction p must lie in (0, 1]")
    b = np.flatnonzero(nodes.boundary_mask)
    if len(b) == 0:
        raise ValueError("node set has no boundary nodes")
    # guard against p * N_b landing a hair above an integer
    n = min(len(b), math.ceil(p * len(b) - 1e-9))
    pick = np.random.default_rng(seed).choice(b, size=n, replace=False)
    role = np.where(nodes.boundary_mask, BOUNDARY, INTERIOR)
    role[pick] = DATA_SITE
    return nodes.with_roles(role)


# --- deformation maps ----------------------------------------------------


def _check_box(p, s):
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != s:
        raise ValueError(f"expected {s}-dimensional points")
    if np.any(np.abs(p) > 1.0 + 1e-12):
        raise ValueError(f"points outside [-1, 1]^{s}")
    return np.clip(p, -1.0, 1.0)


def square_to_disk(p):
    """``(x, y) -> (x sqrt(1 - y^2/2), y sqrt(1 - x^2/2))`` on ``[-1, 1]^2``."""
    p = _check_box(p, 2)
    x, y = p[..., 0], p[..., 1]
    return np.stack([x * np.sqrt(1.0 - 0.5 * y * y), y * np.sqrt(1.0 - 0.5 * x * x)], axis=-1)


def cube_to_sphere(p):
    p = _check_box(p, 3)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    x2, y2, z2 = x * x, y * y, z * z
    return np.stack([
        x * np.sqrt(1.0 - y2 / 2 - z2 / 2 + y2 * z2 / 3),
        y * np.sqrt(1.0 - z2 / 2 - x2 / 2 + z2 * x2 / 3),
        z * np.sqrt(1.0 - x2 / 2 - y2 / 2 + x2 * y2 / 3),
    ], axis=-1)


def from_unit_box(p):
    """Affine map ``[0, 1]^s -> [-1, 1]^s``."""
    return 2.0 * np.asarray(p, dtype=float) - 1.0


def joukowsky(p, center=JOUKOWSKY_CENTER, scale=None):
    """``w = z + 1/z`` with ``z = center + scale * p`` (points as complex numbers).

    ``scale`` defaults to ``1 - center`` so the point ``(1, 0)`` of the unit
    circle lands on ``z = 1``, the cusped trailing edge.
    """
    p = np.asarray(p, dtype=float)
    if scale is None:
        scale = 1.0 - center
    z = center + scale * (p[..., 0] + 1j * p[..., 1])
    if np.any(np.abs(z) < 1e-14):
        raise ValueError("Joukowsky map has a pole at z = 0")
    w = z + 1.0 / z
    return np.stack([w.real, w.imag], axis=-1)


def circle_to_square(theta, half=1.0):
    """Arclength-proportional angle to square-perimeter map, corners at 45 + 90k degrees."""
    # perimeter parameter in [0, 8) measured from the right-edge midpoint
    t = np.mod(np.asarray(theta, dtype=float) / (np.pi / 4.0), 8.0)
    side = np.floor((t + 1.0) / 2.0) % 4
    u = (t + 1.0) - 2.0 * np.floor((t + 1.0) / 2.0) - 1.0  # in [-1, 1) along the side
    out = np.empty(np.shape(t) + (2,))
    out[..., 0] = np.select([side == 0, side == 1, side == 2], [1.0, -u, -1.0], u)
    out[..., 1] = np.select([side == 0, side == 1, side == 2], [u, 1.0, -u], -1.0)
    return half * out


@dataclass(frozen=True)
class AnnulusMap:
    """Annulus boundary to a square with an airfoil cavity."""

    r_in: float = 0.5
    r_out: float = 1.0
    center: complex = JOUKOWSKY_CENTER
    scale: complex | None = None
    airfoil_scale: float = 0.3
    square_half: float = 1.0
    alpha: float = 1e-2

    def __call__(self, p, which=None):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        r = np.linalg.norm(p, axis=1)
        if which is None:
            inner = np.abs(r - self.r_in) < np.abs(r - self.r_out)
        else:
            if which not in ("inner", "outer"):
                raise ValueError("which must be 'inner' or 'outer'")
            inner = np.full(len(p), which == "inner")
        radius = np.where(inner, self.r_in, self.r_out)
        if np.any(np.abs(r - radius) > self.alpha):
            raise ValueError("point is not on the requested annulus circle")
        out = np.empty_like(p)
        if np.any(inner):
            out[inner] = self.airfoil_scale * joukowsky(p[inner] / self.r_in, self.center, self.scale)
        if np.any(~inner):
            q = p[~inner]
            out[~inner] = circle_to_square(np.arctan2(q[:, 1], q[:, 0]), self.square_half)
        return out


def annulus_boundary_map(p, which, **params):
    return AnnulusMap(**params)(p, which)
