"""Relaxations for uncertainty sets outside the smooth, full-rank setting.

Two schemes are provided. Hyper-rectangular disturbance or initial sets
are replaced by inscribed and circumscribing lambda-balls, which sandwich
the true reachable hulls. A rank-deficient disturbance matrix ``g`` is
completed with epsilon-scaled unit columns and the disturbance set is
lifted to a smooth full-dimensional set, which over-approximates the
reachable hulls with an error that shrinks linearly in epsilon.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from chreach.errors import AssumptionViolationError, ConfigError
from chreach.geometry import LambdaBall, SmoothConvexSet, lift_set, make_rng
from chreach.reach import HullEstimate, Ovaloid, TimeGrid, estimate_hulls
from chreach.systems import SystemDef


@dataclass(frozen=True)
class RectSpec:
    """Box uncertainty ``|w_i| <= deltaW_i`` and optionally ``|x_i - x0bar_i| <= deltaX0_i``."""

    deltaW: np.ndarray
    x0bar: Optional[np.ndarray] = None
    deltaX0: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("deltaW", "x0bar", "deltaX0"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, np.atleast_1d(np.asarray(v, dtype=float)))
        if np.any(self.deltaW <= 0):
            raise ConfigError("deltaW entries must be strictly positive")
        if (self.x0bar is None) != (self.deltaX0 is None):
            raise ConfigError("x0bar and deltaX0 must be given together")
        if self.deltaX0 is not None:
            if np.any(self.deltaX0 <= 0):
                raise ConfigError("deltaX0 entries must be strictly positive")
            if self.deltaX0.shape != self.x0bar.shape:
                raise ConfigError("x0bar and deltaX0 must have equal length")


def rect_sets(spec: RectSpec, lam: float):
    """Lambda-ball surrogates ``(W_under, W_over, X0_under, X0_over)``.

    The initial-set entries are None when ``spec`` carries no box for X0.
    """
    if not lam > 1:
        raise ConfigError(f"lambda must be > 1, got {lam}")
    zero = np.zeros_like(spec.deltaW)
    W_under = LambdaBall(zero, spec.deltaW, lam, "under")
    W_over = LambdaBall(zero, spec.deltaW, lam, "over")
    if spec.deltaX0 is None:
        return W_under, W_over, None, None
    return (W_under, W_over, LambdaBall(spec.x0bar, spec.deltaX0, lam, "under"),
            LambdaBall(spec.x0bar, spec.deltaX0, lam, "over"))


def estimate_hulls_rect(sys: SystemDef, spec: RectSpec, lam: float, mode: str, dirs,
                        grid: TimeGrid, X0=None, **kwargs) -> HullEstimate:
    """Algorithm 1 on the inner (``mode="under"``) or outer (``"over"``) lambda-ball problem.

    Args:
        X0: initial set to use when ``spec`` has no box for it; ignored
            otherwise.
    """
    if mode not in ("under", "over"):
        raise ConfigError(f"mode must be 'under' or 'over', got {mode!r}")
    W_u, W_o, X_u, X_o = rect_sets(spec, lam)
    W = W_u if mode == "under" else W_o
    if X_u is not None:
        X0 = Ovaloid(X_u if mode == "under" else X_o)
    elif X0 is None:
        raise ConfigError("no initial set: give RectSpec.deltaX0 or X0")
    meta = {"lambda": float(lam), "mode": mode}
    meta.update(kwargs.pop("meta", {}) or {})
    return estimate_hulls(sys, W, X0, dirs, grid, meta=meta, **kwargs)


# -- epsilon extension -------------------------------------------------------------


@dataclass
class EpsExtensionSpec:
    """Completion of an ``n x m`` disturbance matrix (``m < n``) to a square one.

    Attributes:
        base: the original system.
        W: the original disturbance set over ``R^m`` (centered Ball or Ellipsoid).
        epsilon: scale of the added columns.
        extra: constant ``n x (n - m)`` matrix of unit columns; when None the
            orthonormal complement of ``g`` at ``probe_points[0]`` is used,
            falling back to seeded random unit vectors.
        probe_points: states where unit norm and invertibility are checked;
            default 1000 standard-normal points.
        seed: seed for probes and the random fallback.
    """

    base: SystemDef
    W: SmoothConvexSet
    epsilon: float
    extra: Optional[np.ndarray] = None
    probe_points: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        n, m = self.base.n, self.base.m
        if not m < n:
            raise ConfigError(f"epsilon extension needs m < n, got n={n}, m={m}")
        if self.W.dim != m:
            raise ConfigError(f"W has dimension {self.W.dim}, system has m={m}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        rng = make_rng(self.seed)
        if self.probe_points is None:
            self.probe_points = rng.standard_normal((1000, n))
        self.probe_points = np.atleast_2d(np.asarray(self.probe_points, dtype=float))
        if self.extra is None:
            self.extra = _complement(self.base.g(0.0, self.probe_points[0]), rng)
        self.extra = np.asarray(self.extra, dtype=float).reshape(n, n - m)
        if np.any(np.abs(np.linalg.norm(self.extra, axis=0) - 1.0) > 1e-9):
            raise AssumptionViolationError("extra columns must have unit norm (tolerance 1e-9)")

    @property
    def lifted_W(self) -> SmoothConvexSet:
        return lift_set(self.W, self.base.n)


def _complement(G, rng):
    n, m = G.shape
    U, s, _ = np.linalg.svd(G)
    rank = int(np.sum(s > 1e-12 * max(1.0, s.max(initial=0.0))))
    if rank == m:
        return U[:, m:]
    cols = rng.standard_normal((n, n - m))
    return cols / np.linalg.norm(cols, axis=0)


def make_eps_extension(spec: EpsExtensionSpec) -> SystemDef:
    """Square system with ``g_eps = [g, eps * extra]``.

    Raises:
        AssumptionViolationError: if ``g_eps`` is numerically singular
            (smallest singular value <= 1e-10) at a probe point.
    """
    base, eps = spec.base, float(spec.epsilon)
    n, m = base.n, base.m
    E = eps * spec.extra

    def g(t, x):
        gb = base.g(t, x)
        return np.concatenate([gb, np.broadcast_to(E, gb.shape[:-1] + (n - m,))], axis=-1)

    def jac_g_times(t, x, w):
        return base.jac_g_times(t, x, w[..., :m])

    smin = np.linalg.svd(g(0.0, spec.probe_points), compute_uv=False)[..., -1]
    if np.any(smin <= 1e-10):
        i = int(np.argmin(smin))
        raise AssumptionViolationError(
            f"extended g is singular (sigma_min={smin[i]:.3g}) at probe {spec.probe_points[i].tolist()}")
    label = f"{base.label}+eps{eps:g}" if base.label else f"eps{eps:g}"
    return SystemDef(n, n, base.f, g, base.jac_f, jac_g_times, label=label)


def estimate_hulls_fullrank_relax(spec: EpsExtensionSpec, X0, dirs, grid: TimeGrid,
                                  **kwargs) -> HullEstimate:
    """Algorithm 1 on the epsilon-extended system with the lifted disturbance set."""
    meta = {"epsilon": float(spec.epsilon)}
    meta.update(kwargs.pop("meta", {}) or {})
    return estimate_hulls(make_eps_extension(spec), spec.lifted_W, X0, dirs, grid,
                          meta=meta, **kwargs)
