"""Comparison methods and Monte Carlo validation.

RandUP samples disturbances at every step and takes hulls of the sampled
states. The Lipschitz tube propagates an outer ellipsoid around a nominal
trajectory of a discrete-time model, inflating it by the disturbance bound
and a linearization remainder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from chreach.errors import ConfigError
from chreach.geometry import SmoothConvexSet, make_rng
from chreach.reach import HullEstimate, TimeGrid, as_initial_set, rk4_integrate
from chreach.systems import SystemDef


class DiscreteSystem:
    """One-step map of a continuous system over ``dt`` using RK4 substeps.

    In ``"held"`` mode the disturbance enters the ODE and is held constant
    over the step (``w`` in the disturbance space of ``sys``). In
    ``"additive"`` mode the ODE is integrated without disturbance and ``w``
    (a state-space vector) is added afterwards.
    """

    def __init__(self, sys: SystemDef, dt: float, steps: int, substeps: int = 1,
                 mode: str = "held", t0: float = 0.0):
        if mode not in ("held", "additive"):
            raise ConfigError(f"mode must be 'held' or 'additive', got {mode!r}")
        if dt <= 0 or steps < 1 or substeps < 1:
            raise ConfigError("need dt > 0, steps >= 1, substeps >= 1")
        self.sys = sys
        self.dt = float(dt)
        self.steps = int(steps)
        self.substeps = int(substeps)
        self.mode = mode
        self.t0 = float(t0)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.t0, self.t0 + self.steps * self.dt, self.steps)

    @property
    def w_dim(self) -> int:
        return self.sys.m if self.mode == "held" else self.sys.n

    def step(self, k: int, x, w=None):
        """``x_{k+1}`` from ``x_k`` (batched over leading axes)."""
        x = np.asarray(x, dtype=float)
        t = self.grid.times
        sub = TimeGrid(t[k], t[k + 1], self.substeps)
        if self.mode == "held" and w is not None:
            w = np.asarray(w, dtype=float)
            rhs = lambda s, y: self.sys.rhs(s, y, w)
        else:
            rhs = self.sys.f
        y = rk4_integrate(rhs, sub, x)[-1]
        if self.mode == "additive" and w is not None:
            y = y + w
        return y

    def jacobian(self, k: int, x, h: float = 1e-6):
        """Central-difference Jacobian of the undisturbed step map."""
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        cols = []
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            cols.append((self.step(k, x + e) - self.step(k, x - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def rollout(self, x0, ws=None):
        """States ``(steps + 1,) + x0.shape``; ``ws[k]`` is the disturbance at step k."""
        x = np.asarray(x0, dtype=float)
        out = np.empty((self.steps + 1,) + x.shape)
        out[0] = x
        for k in range(self.steps):
            x = self.step(k, x, None if ws is None else ws[k])
            out[k + 1] = x
        return out


def _sample_disturbances(W, rng, steps, count):
    return np.stack([W.sample(rng, count) for _ in range(steps)])


def randup_hulls(dsys: DiscreteSystem, W: SmoothConvexSet, X0, samples: int, seed=0,
                 meta: Optional[dict] = None) -> HullEstimate:
    """Hulls of states reached with i.i.d. uniform disturbances at every step.

    Samples are drawn in a fixed order (initial states, then one batch of
    disturbances per step) from a Philox stream, so results depend only on
    the seed.
    """
    if samples < 1:
        raise ConfigError("samples must be >= 1")
    if W.dim != dsys.w_dim:
        raise ConfigError(f"W has dimension {W.dim}, step map expects {dsys.w_dim}")
    rng = make_rng(seed)
    x0 = as_initial_set(X0).sample(rng, samples)
    ws = _sample_disturbances(W, rng, dsys.steps, samples)
    X = dsys.rollout(x0, ws)
    info = {"method": "randup", "samples": int(samples)}
    info.update(meta or {})
    return HullEstimate(dsys.grid, X, np.zeros(dsys.steps + 1), info)


def monte_carlo_rollouts(sys, W: SmoothConvexSet, X0, count: int, seed=0,
                         grid: Optional[TimeGrid] = None) -> np.ndarray:
    """Node states ``(K + 1, count, n)`` of random admissible trajectories.

    ``sys`` is either a :class:`DiscreteSystem` or a continuous
    :class:`SystemDef`; in the latter case ``grid`` is required and the
    disturbance is held constant over each RK4 step.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    if isinstance(sys, DiscreteSystem):
        dsys = sys
    else:
        if grid is None:
            raise ConfigError("a time grid is required for continuous systems")
        dsys = DiscreteSystem(sys, grid.h, grid.steps, 1, "held", grid.t0)
    return randup_hulls(dsys, W, X0, count, seed).states


# -- Lipschitz ellipsoid tube ---------------------------------------------------------------


@dataclass
class EllipsoidTube:
    """Sets ``{y: (y - c_k)^T Q_k^{-1} (y - c_k) <= 1}`` along a nominal trajectory."""

    centers: np.ndarray
    shapes: np.ndarray

    def normalized_distance(self, k: int, y) -> np.ndarray:
        """``(y - c)^T Q^+ (y - c)`` (pseudo-inverse; ``inf`` off the range of Q)."""
        Q = self.shapes[k]
        r = np.asarray(y, dtype=float) - self.centers[k]
        if not np.any(Q):
            return np.where(np.linalg.norm(r, axis=-1) <= 1e-12, 0.0, np.inf)
        z = np.linalg.lstsq(Q, r.T, rcond=None)[0].T
        return np.einsum("...i,...i->...", r, z)

    def contains(self, k: int, y, tol: float = 1e-9) -> np.ndarray:
        return self.normalized_distance(k, y) <= 1.0 + tol

    def boundary_points(self, k: int, directions) -> np.ndarray:
        """Support points ``c + Q d / sqrt(d^T Q d)`` for the given unit directions."""
        Q = self.shapes[k]
        d = np.asarray(directions, dtype=float)
        Qd = d @ Q
        s = np.sqrt(np.maximum(np.einsum("ij,ij->i", d, Qd), 1e-300))
        return self.centers[k] + Qd / s[:, None]


def lipschitz_tube(dsys: DiscreteSystem, x0, wbar: float, Hbar: float) -> EllipsoidTube:
    """Outer ellipsoidal tube for ``x_{k+1} = fbar(x_k) + w_k``, ``||w_k|| <= wbar``.

    With ``A_k`` the Jacobian of ``fbar`` at the nominal state,
    ``Q_nom = A_k Q_k A_k^T`` and ``Q_lip = n (wbar + Hbar/2 lambda_max(Q_k))^2 I``,
    the update is ``Q_{k+1} = (1 + 1/c) Q_nom + (1 + c) Q_lip`` with
    ``c^2 = tr(Q_nom) / tr(Q_lip)``. When ``Q_nom`` vanishes the ``c -> 0``
    limit ``Q_{k+1} = Q_lip`` is used.
    """
    if wbar < 0 or Hbar < 0:
        raise ConfigError("wbar and Hbar must be non-negative")
    x = np.asarray(x0, dtype=float)
    n = x.shape[0]
    centers = dsys.rollout(x)
    shapes = np.zeros((dsys.steps + 1, n, n))
    for k in range(dsys.steps):
        A = dsys.jacobian(k, centers[k])
        Q = shapes[k]
        Q_nom = A @ Q @ A.T
        lam_max = float(np.max(np.linalg.eigvalsh(Q))) if np.any(Q) else 0.0
        Q_lip = n * (wbar + 0.5 * Hbar * lam_max) ** 2 * np.eye(n)
        tr_nom, tr_lip = np.trace(Q_nom), np.trace(Q_lip)
        if tr_nom <= 0.0:
            Q_next = Q_lip
        elif tr_lip <= 0.0:
            Q_next = Q_nom
        else:
            c = np.sqrt(tr_nom / tr_lip)
            Q_next = (1.0 + 1.0 / c) * Q_nom + (1.0 + c) * Q_lip
        shapes[k + 1] = 0.5 * (Q_next + Q_next.T)
    return EllipsoidTube(centers, shapes)


def estimate_step_hessian_lipschitz(dsys: DiscreteSystem, center, radius: float,
                                    probes: int = 1000, seed=0, k: int = 0,
                                    pair_radius: float = 0.1) -> float:
    """Sampled Lipschitz constant of the step Jacobian over a ball around ``center``.

    Returns ``max ||A(x) - A(y)||_2 / ||x - y||`` over ``probes`` random
    pairs in ``B(center, radius)`` at most ``pair_radius * radius`` apart.
    """
    rng = make_rng(seed)
    center = np.asarray(center, dtype=float)
    n = center.shape[0]
    u = rng.standard_normal((probes, n))
    u *= (rng.random(probes) ** (1.0 / n) / np.linalg.norm(u, axis=1))[:, None]
    x = center + radius * u
    v = rng.standard_normal((probes, n))
    v *= (pair_radius * radius * rng.random(probes) / np.linalg.norm(v, axis=1))[:, None]
    y = x + v
    Ax, Ay = dsys.jacobian(k, x), dsys.jacobian(k, y)
    ratios = np.linalg.norm(Ax - Ay, ord=2, axis=(-2, -1)) / np.linalg.norm(x - y, axis=1)
    return float(np.max(ratios))
