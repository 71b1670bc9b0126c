"""Smooth convex sets, Gauss maps, sphere sampling, hulls and distances.

All set methods are vectorized over leading axes: a direction array of
shape ``(..., n)`` maps to a point array of shape ``(..., n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree
from scipy.stats import norm, qmc

from chreach.errors import (
    ConfigError,
    DomainError,
    InvalidDirectionError,
    UnsupportedLiftError,
)

DIRECTION_TOL = 1e-9
BOUNDARY_TOL = 1e-8


def make_rng(seed) -> np.random.Generator:
    """Returns the package-wide seeded generator (Philox, counter-based)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


def check_directions(d, tol: float = DIRECTION_TOL) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    norms = np.linalg.norm(d, axis=-1)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > tol):
        raise InvalidDirectionError(
            f"directions must be unit-norm within {tol:g}; "
            f"got norms in [{np.min(norms):.3g}, {np.max(norms):.3g}]")
    return d


def _matvec(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    # einsum keeps each row's arithmetic independent of the batch size
    return np.einsum("ij,...j->...i", A, v)


class SmoothConvexSet:
    """Compact convex set whose boundary is an ovaloid.

    Subclasses define a normalized level function ``level`` that equals 1
    on the boundary, the Gauss map of the boundary, and its inverse.
    """

    dim: int

    def level(self, x) -> np.ndarray:
        raise NotImplementedError

    def _gauss_map(self, x) -> np.ndarray:
        raise NotImplementedError

    def _inverse_gauss_map(self, d) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _sample_interior(self, rng, count) -> np.ndarray:
        raise NotImplementedError

    def inverse_gauss_map(self, d) -> np.ndarray:
        """Boundary point whose outward unit normal is ``d``."""
        d = check_directions(d)
        self._check_dim(d)
        return self._inverse_gauss_map(d)

    def support_point(self, d) -> np.ndarray:
        """Maximizer of ``d^T v`` over the set (unique by strict convexity)."""
        return self.inverse_gauss_map(d)

    def gauss_map(self, x) -> np.ndarray:
        """Outward unit normal at boundary points ``x``."""
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        residual = np.abs(self.level(x) - 1.0)
        if np.any(residual > BOUNDARY_TOL):
            raise DomainError(
                f"point is off the boundary (level residual "
                f"{np.max(residual):.3g} > {BOUNDARY_TOL:g})")
        return self._gauss_map(x)

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        return self.level(x) <= 1.0 + tol

    def sample(self, rng, count: int) -> np.ndarray:
        """Uniform i.i.d. samples from the set."""
        return self._sample_interior(make_rng(rng), int(count))

    def sample_boundary(self, rng, count: int) -> np.ndarray:
        """Boundary points at random normals (not area-uniform)."""
        d = make_rng(rng).standard_normal((int(count), self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self._inverse_gauss_map(d)

    def _check_dim(self, v):
        if v.shape[-1] != self.dim:
            raise ConfigError(
                f"expected vectors of dimension {self.dim}, got {v.shape[-1]}")


def _unit_ball_samples(rng, count, n):
    g = rng.standard_normal((count, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(count) ** (1.0 / n)
    return g * r[:, None]


class Ball(SmoothConvexSet):
    """Closed Euclidean ball ``B(center, radius)``."""

    def __init__(self, center, radius: float):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.radius = float(radius)
        self.dim = self.center.shape[0]
        if not self.radius > 0:
            raise ConfigError(f"ball radius must be positive, got {radius}")

    def __repr__(self):
        return f"Ball(center={self.center.tolist()}, radius={self.radius!r})"

    def level(self, x):
        diff = np.asarray(x, dtype=float) - self.center
        return np.sum(diff * diff, axis=-1) / self.radius ** 2

    def _gauss_map(self, x):
        diff = x - self.center
        nrm = np.linalg.norm(diff, axis=-1, keepdims=True)
        return diff / nrm

    def _inverse_gauss_map(self, d):
        return self.center + self.radius * d

    def bounding_box(self):
        return self.center - self.radius, self.center + self.radius

    def _sample_interior(self, rng, count):
        return self.center + self.radius * _unit_ball_samples(rng, count, self.dim)


class Ellipsoid(SmoothConvexSet):
    """Ellipsoid ``{x: (x - c)^T Q^{-1} (x - c) <= 1}`` with ``Q`` SPD."""

    def __init__(self, center, shape):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        Q = np.atleast_2d(np.asarray(shape, dtype=float))
        self.dim = self.center.shape[0]
        if Q.shape != (self.dim, self.dim):
            raise ConfigError(f"shape matrix must be {self.dim}x{self.dim}")
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ConfigError("ellipsoid shape matrix must be symmetric")
        eigs = np.linalg.eigvalsh(Q)
        if eigs[0] <= 0:
            raise ConfigError("ellipsoid shape matrix must be positive definite")
        self.shape = 0.5 * (Q + Q.T)
        self.shape_inv = np.linalg.inv(self.shape)
        self._chol = np.linalg.cholesky(self.shape)

    def __repr__(self):
        return f"Ellipsoid(center={self.center.tolist()}, shape={self.shape.tolist()})"

    def level(self, x):
        diff = np.asarray(x, dtype=float) - self.center
        return np.einsum("...i,...i->...", diff, _matvec(self.shape_inv, diff))

    def _gauss_map(self, x):
        v = _matvec(self.shape_inv, x - self.center)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def _inverse_gauss_map(self, d):
        Qd = _matvec(self.shape, d)
        scale = np.sqrt(np.einsum("...i,...i->...", d, Qd))
        return self.center + Qd / scale[..., None]

    def bounding_box(self):
        half = np.sqrt(np.diag(self.shape))
        return self.center - half, self.center + half

    def _sample_interior(self, rng, count):
        u = _unit_ball_samples(rng, count, self.dim)
        return self.center + _matvec(self._chol, u)


class LambdaBall(SmoothConvexSet):
    """Smooth inner/outer surrogate of the box ``|x_i - c_i| <= delta_i``.

    The set is ``{x: ||(x - c) / delta||_lam^2 <= s^2}`` with ``s = 1`` for
    ``mode="under"`` (inscribed in the box) and ``s = n^(1/lam)`` for
    ``mode="over"`` (circumscribing the box).
    """

    def __init__(self, center, half_widths, lam: float, mode: str = "under"):
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.half_widths = np.atleast_1d(np.asarray(half_widths, dtype=float))
        self.dim = self.center.shape[0]
        self.lam = float(lam)
        self.mode = mode
        if self.half_widths.shape != self.center.shape:
            raise ConfigError("half_widths and center must have equal length")
        if np.any(self.half_widths <= 0):
            raise ConfigError("half_widths must be strictly positive")
        if not self.lam > 1:
            raise ConfigError(f"lambda must be > 1, got {lam}")
        if mode not in ("under", "over"):
            raise ConfigError(f"mode must be 'under' or 'over', got {mode!r}")
        self.scale = 1.0 if mode == "under" else self.dim ** (1.0 / self.lam)

    def __repr__(self):
        return (f"LambdaBall(center={self.center.tolist()}, "
                f"half_widths={self.half_widths.tolist()}, lam={self.lam!r}, "
                f"mode={self.mode!r})")

    def _lam_norm(self, y):
        a = np.abs(y)
        top = np.max(a, axis=-1, keepdims=True)
        safe = np.where(top > 0, top, 1.0)
        return top[..., 0] * np.sum((a / safe) ** self.lam, axis=-1) ** (1.0 / self.lam)

    def level(self, x):
        y = (np.asarray(x, dtype=float) - self.center) / self.half_widths
        return (self._lam_norm(y) / self.scale) ** 2

    def _gauss_map(self, x):
        y = (x - self.center) / self.half_widths
        top = np.max(np.abs(y), axis=-1, keepdims=True)
        v = np.sign(y) * (np.abs(y) / top) ** (self.lam - 1.0) / self.half_widths
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    def _inverse_gauss_map(self, d):
        p = 1.0 / (self.lam - 1.0)
        # sign(d)|d|^(1/(lam-1)) is the singularity-free form of d|d|^((2-lam)/(lam-1))
        a = np.abs(d * self.half_widths) ** p
        y = np.sign(d) * a
        return self.center + self.scale * self.half_widths * y / self._lam_norm(a)[..., None]

    def bounding_box(self):
        half = self.scale * self.half_widths
        return self.center - half, self.center + half

    def _sample_interior(self, rng, count):
        lo, hi = self.bounding_box()
        out = np.empty((0, self.dim))
        while out.shape[0] < count:
            need = count - out.shape[0]
            cand = lo + (hi - lo) * rng.random((2 * need + 16, self.dim))
            out = np.vstack([out, cand[self.contains(cand)]])
        return out[:count]


def inverse_gauss_map(set_: SmoothConvexSet, d) -> np.ndarray:
    return set_.inverse_gauss_map(d)


def gauss_map(set_: SmoothConvexSet, x) -> np.ndarray:
    return set_.gauss_map(x)


def support_point(set_: SmoothConvexSet, d) -> np.ndarray:
    return set_.support_point(d)


def lift_set(base: SmoothConvexSet, n: int) -> Ellipsoid:
    """Smooth full-dimensional set whose projection on the first m axes is ``base``.

    The lifted level function is ``h(w[:m]) + 0.5 * ||w[m:]||^2`` with ``h``
    the base level function, which for centered balls and ellipsoids is
    again an ellipsoid.
    """
    m = base.dim
    if not n > m:
        raise UnsupportedLiftError(f"lift dimension {n} must exceed base dimension {m}")
    if isinstance(base, Ball):
        Q = base.radius ** 2 * np.eye(m)
    elif isinstance(base, Ellipsoid):
        Q = base.shape
    else:
        raise UnsupportedLiftError(f"cannot lift {type(base).__name__}; use Ball or Ellipsoid")
    if np.any(base.center != 0):
        raise UnsupportedLiftError("only centered base sets can be lifted")
    shape = np.zeros((n, n))
    shape[:m, :m] = Q
    shape[m:, m:] = 2.0 * np.eye(n - m)
    return Ellipsoid(np.zeros(n), shape)


def level_set_inverse_gauss_map(h: Callable, grad_h_inverse: Callable, d) -> np.ndarray:
    """Inverse Gauss map of ``{h = 1}`` from ``h`` and the inverse of its gradient.

    Valid when ``h(grad_h^{-1}(n(x))) = 1 / ||grad h(x)||^2`` on the boundary,
    which holds for balls, ellipsoids and lambda-balls.
    """
    d = check_directions(d)
    y = grad_h_inverse(d)
    return grad_h_inverse(d / np.sqrt(h(y))[..., None])


def lifted_level_maps(base: SmoothConvexSet, n: int) -> Tuple[Callable, Callable]:
    """Level function of the lifted set and the inverse of its gradient."""
    m = base.dim
    if isinstance(base, Ball):
        Q = base.radius ** 2 * np.eye(m)
    elif isinstance(base, Ellipsoid):
        Q = base.shape
    else:
        raise UnsupportedLiftError(f"cannot lift {type(base).__name__}")
    Qinv = np.linalg.inv(Q)

    def h(w):
        head, tail = w[..., :m], w[..., m:]
        return (np.einsum("...i,...i->...", head, _matvec(Qinv, head))
                + 0.5 * np.sum(tail * tail, axis=-1))

    def grad_h_inverse(y):
        return np.concatenate([0.5 * _matvec(Q, y[..., :m]), y[..., m:]], axis=-1)

    return h, grad_h_inverse


# -- sphere sampling -------------------------------------------------------

SPHERE_SCHEMES = ("uniform-angle", "fibonacci", "random")


def sample_sphere(n: int, M: int, scheme: str = "random", seed=0) -> np.ndarray:
    """Returns ``M`` unit vectors in ``R^n`` as an ``(M, n)`` array.

    ``uniform-angle`` (n = 2) places directions at angles ``2 pi i / M``;
    ``fibonacci`` (n = 3) uses the spherical Fibonacci lattice;
    ``random`` draws uniform directions from the seeded generator.
    """
    if n < 2 or M < 1:
        raise ConfigError(f"need n >= 2 and M >= 1, got n={n}, M={M}")
    if scheme == "uniform-angle":
        if n != 2:
            raise ConfigError("uniform-angle sampling requires n = 2")
        theta = 2.0 * np.pi * np.arange(M) / M
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    if scheme == "fibonacci":
        if n != 3:
            raise ConfigError("fibonacci sampling requires n = 3")
        i = np.arange(M)
        z = 1.0 - (2.0 * i + 1.0) / M
        r = np.sqrt(1.0 - z * z)
        phi = i * np.pi * (3.0 - np.sqrt(5.0))
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if scheme == "random":
        g = make_rng(seed).standard_normal((M, n))
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    raise ConfigError(f"unknown sphere sampling scheme {scheme!r}")


def default_scheme(n: int) -> str:
    return {2: "uniform-angle", 3: "fibonacci"}.get(n, "random")


def probe_directions(n: int, probes: int, seed=0) -> np.ndarray:
    """Deterministic quasi-random directions (scrambled Halton)."""
    if n == 2:
        u = qmc.Halton(1, scramble=True, seed=seed).random(probes)[:, 0]
        theta = 2.0 * np.pi * u
        return np.stack([np.cos(theta), np.sin(theta)], axis=1)
    u = qmc.Halton(n, scramble=True, seed=seed).random(probes)
    g = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def covering_radius(dirs, probes: int = 100_000, seed=0) -> float:
    """Estimated covering radius of a direction set (max probe-to-nearest distance)."""
    dirs = check_directions(np.atleast_2d(dirs))
    P = probe_directions(dirs.shape[1], probes, seed)
    dist, _ = cKDTree(dirs).query(P)
    return float(dist.max())


# -- hulls -------------------------------------------------------------------

@dataclass
class HullVertices:
    """Vertex representation of a convex hull.

    ``ordered`` is true only for 2-D polygons stored counter-clockwise.
    Higher-dimensional hulls keep the raw point cloud.
    """

    points: np.ndarray
    ordered: bool = False
    _facets: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _facets_done: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] == 0:
            raise ConfigError("a hull needs at least one point")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]

    def facets(self) -> Optional[np.ndarray]:
        """Qhull facet inequalities ``a^T x + b <= 0`` (None if degenerate)."""
        if not self._facets_done:
            self._facets_done = True
            pts = self.points
            if pts.shape[0] > pts.shape[1]:
                try:
                    self._facets = ConvexHull(pts).equations
                except QhullError:
                    self._facets = None
        return self._facets


def _cross2(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> HullVertices:
    """Counter-clockwise hull vertices (Andrew's monotone chain)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise ConfigError(f"convex_hull_2d needs 2-D points, got dimension {pts.shape[1]}")
    pts = np.unique(pts, axis=0)  # sorted lexicographically
    if pts.shape[0] <= 2:
        return HullVertices(pts, ordered=True)
    rows = [tuple(p) for p in pts]
    lower, upper = [], []
    for p in rows:
        while len(lower) >= 2 and _cross2(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(rows):
        while len(upper) >= 2 and _cross2(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    verts = np.array(lower[:-1] + upper[:-1])
    return HullVertices(verts, ordered=True)


def hull_of(points) -> HullVertices:
    """Hull representation used throughout: CCW polygon in 2-D, raw cloud otherwise."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] == 2:
        return convex_hull_2d(pts)
    return HullVertices(pts, ordered=False)


def _segment_distances(x, a, b):
    """Distances from points x (P, 2) to segments a->b (E, 2); returns (P, E)."""
    ab = b - a
    denom = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    ax = x[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pek,ek->pe", ax, ab) / denom, 0.0, 1.0)
    diff = ax - t[..., None] * ab[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _polygon_distance(x, verts):
    k = verts.shape[0]
    if k == 1:
        return np.linalg.norm(x - verts[0], axis=1)
    a = verts
    b = np.roll(verts, -1, axis=0)
    if k == 2:
        return _segment_distances(x, a[:1], b[:1])[:, 0]
    e = b - a
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    offs = np.sum(normals * a, axis=1)
    s = x @ normals.T - offs
    out = np.zeros(x.shape[0])
    outside = np.max(s, axis=1) > 0
    if np.any(outside):
        out[outside] = np.min(_segment_distances(x[outside], a, b), axis=1)
    return out


def _min_norm_point(V: np.ndarray, tol: float) -> float:
    """Distance from the origin to conv(rows of V) by Wolfe's algorithm."""
    scale = max(1.0, float(np.max(np.abs(V))))
    sq = np.einsum("ij,ij->i", V, V)
    S = [int(np.argmin(sq))]
    lam = np.array([1.0])
    w = V[S[0]].copy()
    eps = 1e-13
    for _ in range(10_000):
        wn = float(np.sqrt(w @ w))
        if wn <= tol:
            return 0.0
        dots = V @ w
        j = int(np.argmin(dots))
        # lower bound on the distance from the supporting hyperplane
        if wn - max(dots[j], 0.0) / wn <= tol or j in S:
            return wn
        S.append(j)
        lam = np.append(lam, 0.0)
        while True:
            VS = V[S]
            k = len(S)
            G = VS @ VS.T
            K = np.zeros((k + 1, k + 1))
            K[:k, :k] = G
            K[:k, k] = 1.0
            K[k, :k] = 1.0
            rhs = np.zeros(k + 1)
            rhs[k] = 1.0
            sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
            alpha = sol[:k]
            if np.all(alpha > eps * scale):
                lam = alpha / alpha.sum()
                break
            mask = alpha <= eps * scale
            ratios = lam[mask] / np.maximum(lam[mask] - alpha[mask], 1e-300)
            theta = float(np.min(ratios)) if ratios.size else 1.0
            lam = theta * alpha + (1.0 - theta) * lam
            keep = lam > eps
            S = [s for s, kp in zip(S, keep) if kp]
            lam = lam[keep]
            lam = lam / lam.sum()
            if len(S) == 1:
                break
        w = lam @ V[S]
    return float(np.sqrt(w @ w))


def distance_to_hull(x, hull: HullVertices, tol: float = 1e-9):
    """Euclidean distance from ``x`` (shape ``(n,)`` or ``(P, n)``) to the hull."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    V = hull.points
    if hull.ordered:
        out = _polygon_distance(X, V)
    else:
        out = np.zeros(X.shape[0])
        todo = np.ones(X.shape[0], dtype=bool)
        eqs = hull.facets()
        if eqs is not None:
            viol = X @ eqs[:, :-1].T + eqs[:, -1]
            todo = np.max(viol, axis=1) > 1e-12 * max(1.0, float(np.max(np.abs(V))))
        for i in np.flatnonzero(todo):
            out[i] = _min_norm_point(V - X[i], tol)
    return float(out[0]) if single else out


def hausdorff(A: HullVertices, B: HullVertices, tol: float = 1e-9) -> float:
    """Hausdorff distance between the convex hulls of two vertex clouds."""
    dab = np.max(distance_to_hull(A.points, B, tol))
    dba = np.max(distance_to_hull(B.points, A, tol))
    return float(max(dab, dba))
