"""Extremal state-costate trajectories and convex-hull reachable set estimates.

For a direction ``d0`` on the unit sphere the augmented ODE

    xdot = f(t, x) + g(t, x) w,   pdot = -(df(t, x) + dg(t, x) w)^T p,
    w = support point of W in direction -g^T p,

started at ``p(0) = d0`` and ``x(0) = x0`` (or the point of X0 with outward
normal ``-d0``) yields a state ``x_{d0}(t)`` on the boundary of the convex
hull of the reachable set. Hulls of these states over a finite set of
directions under-approximate the reachable hulls at every grid time.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from chreach.errors import ConfigError, DivergenceError, SingularCostateError
from chreach.geometry import (HullVertices, SmoothConvexSet, check_directions, hull_of,
                              make_rng)
from chreach.systems import SystemDef

SINGULAR_TOL = 1e-12
COSTATE_RANGE = (1e-8, 1e8)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t0 < t0 + h < ... < tf`` with ``steps`` intervals."""

    t0: float
    tf: float
    steps: int = 200

    def __post_init__(self):
        if not self.tf > self.t0:
            raise ConfigError(f"need tf > t0, got [{self.t0}, {self.tf}]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")

    @property
    def h(self) -> float:
        return (self.tf - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + self.h * np.arange(self.steps + 1)
        t[-1] = self.tf
        return t


def rk4_integrate(rhs: Callable, grid: TimeGrid, y0, on_step: Optional[Callable] = None):
    """Classical fixed-step RK4; returns node values of shape ``(steps + 1,) + y0.shape``.

    The last stage is evaluated one ulp before the next node so that
    piecewise-constant inputs switching exactly at grid nodes are sampled on
    the interval being integrated.

    Raises:
        DivergenceError: if a non-finite value appears; ``node`` is the index
            of the first bad node.
    """
    y = np.array(y0, dtype=float)
    t = grid.times
    h = grid.h
    out = np.empty((grid.steps + 1,) + y.shape)
    out[0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        _rk4_loop(rhs, y, t, h, out, on_step)
    return out


def _rk4_loop(rhs, y, t, h, out, on_step):
    for k in range(t.shape[0] - 1):
        tk, tn = t[k], t[k + 1]
        k1 = rhs(tk, y)
        k2 = rhs(tk + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(tk + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(np.nextafter(tn, tk), y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(f"non-finite state at node {k + 1} (t={tn:.6g})", node=k + 1)
        out[k + 1] = y
        if on_step is not None:
            on_step(k + 1, y)


# -- initial sets ----------------------------------------------------------------

@dataclass(frozen=True)
class Singleton:
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    @property
    def dim(self):
        return self.x0.shape[0]

    def sample(self, rng, count):
        return np.broadcast_to(self.x0, (int(count), self.dim)).copy()


@dataclass(frozen=True)
class Ovaloid:
    set: SmoothConvexSet

    @property
    def dim(self):
        return self.set.dim

    def sample(self, rng, count):
        return self.set.sample(rng, count)


InitialSet = Union[Singleton, Ovaloid]


def as_initial_set(X0) -> InitialSet:
    """Accepts a Singleton/Ovaloid, a bare convex set, or a point."""
    if isinstance(X0, (Singleton, Ovaloid)):
        return X0
    if isinstance(X0, SmoothConvexSet):
        return Ovaloid(X0)
    return Singleton(X0)


def initial_pair(d0, X0) -> Tuple[np.ndarray, np.ndarray]:
    """Initial state and costate for direction(s) ``d0`` (shape ``(n,)`` or ``(M, n)``)."""
    d0 = check_directions(d0)
    X0 = as_initial_set(X0)
    if isinstance(X0, Singleton):
        x0 = np.broadcast_to(X0.x0, d0.shape).copy()
    else:
        x0 = X0.set.inverse_gauss_map(-d0)
    return x0, d0.copy()


# -- augmented dynamics ------------------------------------------------------------

def _check_square(sys: SystemDef, W: SmoothConvexSet):
    if W.dim != sys.m:
        raise ConfigError(f"disturbance set has dimension {W.dim}, system expects m={sys.m}")
    if sys.m != sys.n:
        raise ConfigError(
            f"the extremal characterization needs n = m (got n={sys.n}, m={sys.m}); "
            "use the epsilon extension for rank-deficient g")


def augmented_rhs(sys: SystemDef, W: SmoothConvexSet, t, x, p):
    """Right-hand side of the state-costate system; returns ``(xdot, pdot, w)``.

    Raises:
        SingularCostateError: if ``||g^T p|| < 1e-12`` for some row.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    g = sys.g(t, x)
    gtp = np.einsum("...ij,...i->...j", g, p)
    nrm = np.linalg.norm(gtp, axis=-1)
    if np.any(nrm < SINGULAR_TOL):
        raise SingularCostateError(
            f"||g(t,x)^T p|| = {np.min(nrm):.3g} < {SINGULAR_TOL:g} at t={t:.6g}")
    w = W._inverse_gauss_map(-gtp / nrm[..., None])
    xdot = sys.f(t, x) + np.einsum("...ij,...j->...i", g, w)
    A = sys.jac_f(t, x) + sys.jac_g_times(t, x, w)
    pdot = -np.einsum("...ij,...i->...j", A, p)
    return xdot, pdot, w


def _stacked_rhs(sys, W):
    n = sys.n

    def rhs(t, y):
        xdot, pdot, _ = augmented_rhs(sys, W, t, y[..., :n], y[..., n:])
        return np.concatenate([xdot, pdot], axis=-1)

    return rhs


def _integrate_batch(sys, W, X0, D, grid, p_scale=1.0):
    """Integrates the augmented system for direction rows ``D``; returns ``(x, p, w)``."""
    n = sys.n
    x0, p0 = initial_pair(D, X0)
    y0 = np.concatenate([x0, p_scale * p0], axis=-1)

    def guard(k, y):
        pn = np.linalg.norm(y[..., n:], axis=-1) / abs(p_scale)
        if np.any(pn < COSTATE_RANGE[0]) or np.any(pn > COSTATE_RANGE[1]):
            raise SingularCostateError(
                f"costate norm left [{COSTATE_RANGE[0]:g}, {COSTATE_RANGE[1]:g}] at node {k}")

    Y = rk4_integrate(_stacked_rhs(sys, W), grid, y0, on_step=guard)
    x, p = Y[..., :n], Y[..., n:]
    w = np.stack([augmented_rhs(sys, W, t, x[k], p[k])[2] for k, t in enumerate(grid.times)])
    return x, p, w


@dataclass
class ExtremalTrajectory:
    """States, costates and extremal disturbances at every grid node for one ``d0``."""

    grid: TimeGrid
    x: np.ndarray
    p: np.ndarray
    w: np.ndarray
    d0: np.ndarray

    @property
    def q(self) -> np.ndarray:
        """Normalized costates (diagnostic only)."""
        return self.p / np.linalg.norm(self.p, axis=-1, keepdims=True)


def extremal_trajectory(sys: SystemDef, W: SmoothConvexSet, X0, d0, grid: TimeGrid,
                        p_scale: float = 1.0) -> ExtremalTrajectory:
    """Solves the augmented ODE for one direction.

    Args:
        p_scale: multiplies the initial costate (the state trajectory does
            not depend on it; exposed to test that invariance).
    """
    _check_square(sys, W)
    d0 = check_directions(np.asarray(d0, dtype=float))
    if d0.ndim != 1:
        raise ConfigError("extremal_trajectory takes a single direction; use estimate_hulls")
    x, p, w = _integrate_batch(sys, W, X0, d0[None, :], grid, p_scale)
    return ExtremalTrajectory(grid, x[:, 0], p[:, 0], w[:, 0], d0)


# -- Algorithm 1 ---------------------------------------------------------------------

@dataclass
class HullEstimate:
    """Per-node extremal states, their hulls, and an outer padding ``eps``.

    ``states[k]`` holds one state per direction at node ``k``. The hull at
    a node is the under-approximation; a point belongs to the padded outer
    set when its distance to that hull is at most ``eps[k]``.
    """

    grid: TimeGrid
    states: np.ndarray
    eps: np.ndarray
    meta: Dict = field(default_factory=dict)
    costates: Optional[np.ndarray] = field(default=None, repr=False)
    disturbances: Optional[np.ndarray] = field(default=None, repr=False)
    _hulls: Dict[int, HullVertices] = field(default_factory=dict, repr=False)

    @property
    def nodes(self) -> int:
        return self.states.shape[0]

    def hull(self, k: int) -> HullVertices:
        k = range(self.nodes)[k]
        if k not in self._hulls:
            self._hulls[k] = hull_of(self.states[k])
        return self._hulls[k]

    @property
    def hulls(self) -> List[HullVertices]:
        return [self.hull(k) for k in range(self.nodes)]

    def with_padding(self, eps) -> "HullEstimate":
        eps = np.broadcast_to(np.asarray(eps, dtype=float), (self.nodes,)).copy()
        if np.any(~np.isfinite(eps)) or np.any(eps < 0):
            raise ConfigError("padding must be finite and non-negative")
        return HullEstimate(self.grid, self.states, eps, dict(self.meta),
                            self.costates, self.disturbances, self._hulls)


def _resolve_threads(threads):
    if threads is None:
        return 1
    threads = int(threads)
    if threads <= 0:
        return os.cpu_count() or 1
    return threads


def estimate_hulls(sys: SystemDef, W: SmoothConvexSet, X0, dirs, grid: TimeGrid,
                   threads: Optional[int] = None, chunk: int = 128,
                   keep_costates: bool = False, meta: Optional[Dict] = None) -> HullEstimate:
    """Algorithm 1: one extremal integration per direction, hulls at every node.

    Directions are split into chunks of ``chunk`` rows that may run on
    ``threads`` worker threads (``0`` means one per CPU). Each row's arithmetic
    does not depend on its chunk, so the result is bit-identical for any
    thread count or chunk size.

    Raises:
        DivergenceError: with ``direction`` set to the index of a failing
            direction when an integration blows up.
    """
    _check_square(sys, W)
    D = check_directions(np.atleast_2d(np.asarray(dirs, dtype=float)))
    if D.shape[1] != sys.n:
        raise ConfigError(f"directions have dimension {D.shape[1]}, system has n={sys.n}")
    bounds = list(range(0, D.shape[0], max(1, int(chunk)))) + [D.shape[0]]
    pieces = list(zip(bounds[:-1], bounds[1:]))

    def work(piece):
        lo, hi = piece
        try:
            return _integrate_batch(sys, W, X0, D[lo:hi], grid)
        except (DivergenceError, SingularCostateError) as err:
            raise _locate_failure(sys, W, X0, D, lo, hi, grid, err) from err

    nthreads = _resolve_threads(threads)
    if nthreads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            results = list(pool.map(work, pieces))
    else:
        results = [work(pc) for pc in pieces]
    x = np.concatenate([r[0] for r in results], axis=1)
    info = {"M": int(D.shape[0])}
    info.update(meta or {})
    est = HullEstimate(grid, x, np.zeros(grid.steps + 1), info)
    if keep_costates:
        est.costates = np.concatenate([r[1] for r in results], axis=1)
        est.disturbances = np.concatenate([r[2] for r in results], axis=1)
    return est


def _locate_failure(sys, W, X0, D, lo, hi, grid, err):
    for i in range(lo, hi):
        try:
            _integrate_batch(sys, W, X0, D[i:i + 1], grid)
        except (DivergenceError, SingularCostateError) as inner:
            kind = type(inner)
            out = (DivergenceError(f"direction {i} ({D[i].tolist()}): {inner}",
                                   node=getattr(inner, "node", None), direction=i)
                   if kind is DivergenceError else kind(f"direction {i} ({D[i].tolist()}): {inner}"))
            out.direction = i
            return out
    return err


# -- error bounds ------------------------------------------------------------------------

def _tangent_perturbed(D, step):
    """Directions normalize(d +- step e_i) for every ambient axis; shape (2n, M, n)."""
    n = D.shape[1]
    out = []
    for i in range(n):
        for s in (1.0, -1.0):
            e = D.copy()
            e[:, i] += s * step
            out.append(e / np.linalg.norm(e, axis=1, keepdims=True))
    return np.stack(out)


def _extremal_jacobians(sys, W, X0, D, grid, step, threads):
    """Ambient Jacobians of d -> F(d / ||d||, t) at unit rows ``D``; shape (K+1, M, n, n)."""
    n = D.shape[1]
    P = _tangent_perturbed(D, step).reshape(-1, n)
    X = estimate_hulls(sys, W, X0, P, grid, threads=threads).states
    X = X.reshape(X.shape[0], n, 2, D.shape[0], n)
    J = (X[:, :, 0] - X[:, :, 1]) / (2.0 * step)  # (K+1, i, M, n_out)
    return np.transpose(J, (0, 2, 3, 1))


def lipschitz_estimates(sys: SystemDef, W: SmoothConvexSet, X0, grid: TimeGrid,
                        probe_count: int = 1000, seed=0, step: float = 1e-5,
                        pair_radius: float = 0.05, threads: Optional[int] = None):
    """Sampled Lipschitz constants of ``d0 -> x_{d0}(t)`` and of its derivative.

    ``Lbar[k]`` is the largest spectral norm of the finite-difference
    Jacobian over the probes; ``Hbar[k]`` is the largest ratio
    ``||J(d) - J(d')|| / ||d - d'||`` over probe pairs a distance about
    ``pair_radius`` apart. Probe sets are nested in ``probe_count`` for a
    fixed seed, so both estimates are non-decreasing in it. These are
    empirical under-estimates of the true constants.
    """
    if probe_count < 2:
        raise ConfigError("probe_count must be at least 2")
    n = sys.n
    raw = make_rng(seed).standard_normal((int(probe_count), 2 * n))
    D = raw[:, :n] / np.linalg.norm(raw[:, :n], axis=1, keepdims=True)
    u = raw[:, n:] - np.einsum("ij,ij->i", raw[:, n:], D)[:, None] * D
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    D2 = D + pair_radius * u
    D2 /= np.linalg.norm(D2, axis=1, keepdims=True)
    J = _extremal_jacobians(sys, W, X0, np.vstack([D, D2]), grid, step, threads)
    J1, J2 = J[:, :probe_count], J[:, probe_count:]
    Lbar = np.max(np.linalg.norm(J, ord=2, axis=(-2, -1)), axis=1)
    gap = np.linalg.norm(D - D2, axis=1)
    Hbar = np.max(np.linalg.norm(J1 - J2, ord=2, axis=(-2, -1)) / gap, axis=1)
    return Lbar, Hbar


def error_bounds(Lbar, Hbar, delta):
    """Naive ``L delta`` and quadratic ``(L + H) delta^2 / 2`` Hausdorff bounds per node."""
    Lbar = np.asarray(Lbar, dtype=float)
    Hbar = np.asarray(Hbar, dtype=float)
    if delta < 0 or np.any(Lbar < 0) or np.any(Hbar < 0):
        raise ConfigError("delta and Lipschitz estimates must be non-negative")
    return Lbar * delta, 0.5 * (Lbar + Hbar) * delta ** 2


def padded_estimate(est: HullEstimate, Lbar, Hbar, delta) -> HullEstimate:
    """Attaches the smaller of the two error bounds as the outer padding."""
    naive, quad = error_bounds(Lbar, Hbar, delta)
    out = est.with_padding(np.minimum(naive, quad))
    out.meta.update(delta=float(delta))
    out.meta["eps_naive"] = naive
    out.meta["eps_quad"] = quad
    return out
