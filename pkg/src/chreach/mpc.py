"""Robust MPC for the spacecraft attitude problem with reachability tightening.

The plant state is ``x = (q, w)`` (scalar-first quaternion, body rates).
A plan is a zero-order-hold feedforward ``ubar`` on ``K = T / dt``
intervals; the applied control is ``u(t) = ubar(t) + K_fb w(t)``. Box
limits on ``w`` and ``u`` are enforced at the nodes on every extremal
angular-velocity trajectory, shrunk by the padding ``eps[k]``, which makes
them hold on the padded hull of reachable rates. The nonconvex problem is
solved by sequential convex programming over QPs in the plan update.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from chreach import qp
from chreach.errors import ConfigError, DivergenceError, SingularCostateError
from chreach.geometry import Ball, SmoothConvexSet, covering_radius, make_rng, sample_sphere
from chreach.reach import (Singleton, TimeGrid, _integrate_batch, error_bounds,
                           extremal_trajectory, lipschitz_estimates, rk4_integrate)
from chreach.systems import PiecewiseConstant, make_spacecraft_full, make_spacecraft_omega

log = logging.getLogger(__name__)


@dataclass
class OcpSpec:
    """Optimal control problem data.

    Attributes:
        horizon: T in seconds.
        dt: control interval; ``horizon / dt`` must be an integer.
        Q: 7x7 state weight. R: 3x3 control weight.
        x_ref: reference state.
        omega_max, u_max: box limits in the inf-norm.
        dirs: ``(M, 3)`` directions for the extremal rate trajectories. With
            ``M = 0`` the nominal (undisturbed) rates are constrained instead.
        eps: per-node padding, length ``K + 1``.
        J, K_fb: inertia and feedback gain (diagonals or 3x3).
        W: disturbance torque set.
        substeps: RK4 steps per control interval.
    """

    horizon: float = 10.0
    dt: float = 1.0
    Q: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(7))
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    x_ref: np.ndarray = field(default_factory=lambda: np.eye(7)[0])
    omega_max: float = 0.1
    u_max: float = 0.1
    dirs: np.ndarray = field(default_factory=lambda: sample_sphere(3, 50, "fibonacci"))
    eps: Optional[np.ndarray] = None
    J: np.ndarray = field(default_factory=lambda: np.array([5.0, 2.0, 1.0]))
    K_fb: np.ndarray = field(default_factory=lambda: np.array([-5.0, -2.0, -1.0]))
    W: SmoothConvexSet = field(default_factory=lambda: Ball(np.zeros(3), 1e-2))
    substeps: int = 10

    def __post_init__(self):
        ratio = self.horizon / self.dt
        if self.dt <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError(f"horizon/dt must be a positive integer, got {ratio}")
        self.Q = np.asarray(self.Q, dtype=float)
        self.R = np.asarray(self.R, dtype=float)
        self.x_ref = np.asarray(self.x_ref, dtype=float)
        self.dirs = np.asarray(self.dirs, dtype=float).reshape(-1, 3)
        self.J = np.asarray(self.J, dtype=float)
        self.K_fb = np.asarray(self.K_fb, dtype=float)
        if self.Q.shape != (7, 7) or self.R.shape != (3, 3) or self.x_ref.shape != (7,):
            raise ConfigError("Q must be 7x7, R 3x3 and x_ref of length 7")
        if self.eps is None:
            self.eps = np.zeros(self.nodes)
        self.eps = np.broadcast_to(np.asarray(self.eps, dtype=float), (self.nodes,)).copy()
        if np.any(self.eps < 0):
            raise ConfigError("tightenings must be non-negative")
        if min(self.omega_max, self.u_max) <= np.max(self.eps):
            raise ConfigError("tightened box is empty: limits must exceed max eps")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")

    @property
    def K(self) -> int:
        return int(round(self.horizon / self.dt))

    @property
    def nodes(self) -> int:
        return self.K + 1

    @property
    def K_matrix(self) -> np.ndarray:
        return np.diag(self.K_fb) if self.K_fb.ndim == 1 else self.K_fb

    @property
    def node_times(self) -> np.ndarray:
        return self.dt * np.arange(self.nodes)

    def fine_grid(self, t0: float = 0.0) -> TimeGrid:
        return TimeGrid(t0, t0 + self.horizon, self.K * self.substeps)

    def plan_signal(self, ubar) -> PiecewiseConstant:
        """ZOH signal; ``ubar`` is ``(K, 3)`` or batched ``(K, B, 3)``."""
        return PiecewiseConstant(self.node_times, ubar)


@dataclass
class ScpConfig:
    max_iter: int = 15
    trust_radius: float = 0.1
    max_trust_radius: float = 0.2
    tol: float = 1e-4
    qp_tol: float = 1e-6
    penalty: float = 1e3
    fd_step: float = 1e-6
    feas_tol: float = 1e-7


@dataclass
class ScpResult:
    """Plan and per-iteration trace.

    ``trace`` holds one dict per iteration with keys ``objective`` (cost of
    the incumbent after the iteration), ``violation`` (largest violated
    tightened margin), ``step`` (inf-norm of the proposed update),
    ``accepted`` and ``radius``. ``errors`` are the inf-norm distances of
    the iterates to the returned plan.
    """

    ubar: np.ndarray
    status: str
    trace: List[dict]
    max_violation: float
    objective: float

    @property
    def errors(self) -> np.ndarray:
        iterates = [t["ubar"] for t in self.trace]
        return np.array([np.max(np.abs(u - self.ubar)) for u in iterates])


# -- rollouts ----------------------------------------------------------------------


def _variants(ubar, step):
    """Base plan followed by one forward perturbation per entry: ``(1 + 3K, K, 3)``."""
    flat = ubar.reshape(-1)
    V = np.repeat(flat[None, :], flat.size + 1, axis=0)
    V[1:] += step * np.eye(flat.size)
    return V.reshape((-1,) + ubar.shape)


def nominal_states(spec: OcpSpec, ubar_batch, x0) -> np.ndarray:
    """Undisturbed full-state node values ``(K + 1, B, 7)`` for plans ``(B, K, 3)``."""
    U = np.asarray(ubar_batch, dtype=float)
    sys = make_spacecraft_full(spec.J, spec.K_fb, spec.plan_signal(np.swapaxes(U, 0, 1)))
    y0 = np.broadcast_to(np.asarray(x0, dtype=float), (U.shape[0], 7)).copy()
    X = rk4_integrate(sys.f, spec.fine_grid(), y0)
    return X[::spec.substeps]


def extremal_rates(spec: OcpSpec, ubar_batch, omega0) -> np.ndarray:
    """Extremal angular-velocity node values ``(K + 1, B, M, 3)`` for plans ``(B, K, 3)``.

    All ``B * M`` rows are integrated as one batch; the plan signal is
    row-wise, so each row reproduces the single-direction computation
    bit for bit.
    """
    U = np.asarray(ubar_batch, dtype=float)
    B, M = U.shape[0], spec.dirs.shape[0]
    rows = np.repeat(np.swapaxes(U, 0, 1), M, axis=1)
    sys = make_spacecraft_omega(spec.J, spec.K_fb, spec.plan_signal(rows))
    D = np.tile(spec.dirs, (B, 1))
    X0 = Singleton(omega0)
    try:
        x = _integrate_batch(sys, spec.W, X0, D, spec.fine_grid())[0]
    except (DivergenceError, SingularCostateError) as err:
        raise _locate(spec, U, X0, err) from err
    return x[::spec.substeps].reshape(spec.nodes, B, M, 3)


def _locate(spec, U, X0, err):
    """Re-runs single rows to name the first failing direction."""
    for b in range(U.shape[0]):
        sys = make_spacecraft_omega(spec.J, spec.K_fb, spec.plan_signal(U[b]))
        for i, d in enumerate(spec.dirs):
            try:
                extremal_trajectory(sys, spec.W, X0, d, spec.fine_grid())
            except (DivergenceError, SingularCostateError) as inner:
                return DivergenceError(f"extremal rate integration failed for direction {i} "
                                       f"({d.tolist()}): {inner}",
                                       node=getattr(inner, "node", None), direction=i)
    return DivergenceError(f"extremal rate integration failed: {err}")


def _margins(spec: OcpSpec, ubar_batch, omega_nodes) -> np.ndarray:
    """Margins ``(B, 2, K, 3, 2, M)``: (rate | control, node, axis, upper | lower, direction).

    Rate rows use nodes ``1..K``; control rows use nodes ``0..K-1``.
    """
    U = np.asarray(ubar_batch, dtype=float)
    om = np.moveaxis(omega_nodes, 0, 1)  # (B, K+1, M, 3)
    Km = spec.K_matrix
    w_rows = om[:, 1:]
    u_rows = U[:, :, None, :] + np.einsum("ij,bkmj->bkmi", Km, om[:, :-1])
    eps_w = spec.eps[1:][None, :, None, None]
    eps_u = spec.eps[:-1][None, :, None, None]
    out = np.empty((U.shape[0], 2, spec.K, 3, 2, om.shape[2]))
    for t, (vals, lim, eps) in enumerate(((w_rows, spec.omega_max, eps_w),
                                          (u_rows, spec.u_max, eps_u))):
        out[:, t, :, :, 0] = np.moveaxis(lim - eps - vals, 2, -1)
        out[:, t, :, :, 1] = np.moveaxis(lim - eps + vals, 2, -1)
    return out


def _rates(spec, ubar_batch, x0, X=None):
    if spec.dirs.shape[0] == 0:
        X = nominal_states(spec, ubar_batch, x0) if X is None else X
        return X[:, :, None, 4:]
    return extremal_rates(spec, ubar_batch, np.asarray(x0, dtype=float)[4:])


def tightened_constraints(spec: OcpSpec, ubar, x0, step: float = 1e-6, with_jacobian: bool = True):
    """Tightened margins (feasible iff all >= 0) and their forward-difference Jacobian.

    Returns:
        ``values`` of shape ``(2, K, 3, 2, M)`` (see :func:`_margins`; ``M``
        is 1 when no directions are configured) and ``jac`` of shape
        ``values.shape + (K, 3)``, or None when ``with_jacobian`` is false.
    """
    ubar = np.asarray(ubar, dtype=float).reshape(spec.K, 3)
    U = _variants(ubar, step) if with_jacobian else ubar[None]
    vals = _margins(spec, U, _rates(spec, U, x0))
    if not with_jacobian:
        return vals[0], None
    jac = (vals[1:] - vals[0]) / step
    jac = np.moveaxis(jac, 0, -1).reshape(vals.shape[1:] + (spec.K, 3))
    return vals[0], jac


def stage_cost(spec: OcpSpec, X, ubar) -> np.ndarray:
    """Node-sum cost: state terms at nodes ``1..K``, control terms on intervals ``0..K-1``."""
    e = X[1:] - spec.x_ref
    state = np.einsum("k...i,ij,k...j->...", e, spec.Q, e)
    U = np.asarray(ubar, dtype=float)
    ctrl = np.einsum("...ki,ij,...kj->...", U, spec.R, U)
    return spec.dt * (state + ctrl)


# -- SCP ---------------------------------------------------------------------------


def _linearize(spec: OcpSpec, ubar, x0, cfg: ScpConfig):
    U = _variants(ubar, cfg.fd_step)
    X = nominal_states(spec, U, x0)
    vals = _margins(spec, U, _rates(spec, U, x0, X))
    S = (X[:, 1:] - X[:, :1]) / cfg.fd_step  # (K+1, 3K, 7)
    c = vals[0].reshape(-1, vals.shape[-1])  # (groups, M)
    Jc = ((vals[1:] - vals[0]) / cfg.fd_step).reshape(U.shape[0] - 1, c.shape[0], c.shape[1])
    return X[:, 0], S, c, np.moveaxis(Jc, 0, -1)


def _merit(spec, cost, c, penalty):
    return cost + penalty * np.sum(np.maximum(-np.min(c, axis=1), 0.0))


def _evaluate(spec, ubar, x0):
    X = nominal_states(spec, ubar[None], x0)[:, 0]
    c = _margins(spec, ubar[None], _rates(spec, ubar[None], x0, X[:, None]))[0]
    return float(stage_cost(spec, X, ubar)), c.reshape(-1, c.shape[-1])


def _subproblem(spec, ubar, X, S, c, Jc, radius, cfg):
    """Convexified problem in the plan update; returns (delta, model merit, QP result).

    From a feasible incumbent the linearized margins are hard constraints
    (``delta = 0`` is feasible). From an infeasible one each margin group
    gets a non-negative slack charged at ``cfg.penalty`` (elastic mode).
    """
    n = ubar.size
    dt = spec.dt
    e = X[1:] - spec.x_ref  # (K, 7)
    Sk = S[1:]  # (K, n, 7)
    Rb = np.kron(np.eye(spec.K), spec.R)
    H = 2 * dt * (np.einsum("kai,ij,kbj->ab", Sk, spec.Q, Sk) + Rb)
    g = 2 * dt * (np.einsum("kai,ij,kj->a", Sk, spec.Q, e) + Rb @ ubar.reshape(-1))
    cost0 = float(stage_cost(spec, X, ubar))
    elastic = np.min(c) < -cfg.feas_tol

    # keep only rows that can become active inside the trust region
    reach = np.sum(np.abs(Jc), axis=-1) * radius
    keep = c <= reach + 1e-12
    groups = np.flatnonzero(np.any(keep, axis=1))
    G = groups.size if elastic else 0
    rows_g, rows_m = np.nonzero(keep[groups])
    A_con = np.zeros((rows_g.size, n + G))
    A_con[:, :n] = Jc[groups[rows_g], rows_m]
    if elastic:
        A_con[np.arange(rows_g.size), n + rows_g] = 1.0
    c_sel = c[groups[rows_g], rows_m]
    # aim slightly inside so curvature of active margins does not push the iterate out
    l_con = -c_sel + (cfg.feas_tol if elastic else np.clip(c_sel, 0.0, cfg.feas_tol))
    A = np.vstack([A_con, np.eye(n + G)])
    lo = np.concatenate([l_con, np.full(n, -radius), np.zeros(G)])
    hi = np.concatenate([np.full(rows_g.size, qp.INF), np.full(n, radius), np.full(G, qp.INF)])
    P = np.zeros((n + G, n + G))
    P[:n, :n] = H
    q = np.concatenate([g, np.full(G, cfg.penalty)])
    res = qp.solve_qp(P, q, A, lo, hi, qp.QpSettings(eps_abs=cfg.qp_tol, eps_rel=cfg.qp_tol))
    if res.status == "primal-infeasible":
        return None, np.inf, res
    delta = res.x[:n]
    # model merit includes the linearized violation of all groups, screened or not
    lin = c + np.einsum("gmn,n->gm", Jc, delta)
    model = cost0 + g @ delta + 0.5 * delta @ H @ delta
    model += cfg.penalty * np.sum(np.maximum(-np.min(lin, axis=1), 0.0))
    return delta.reshape(ubar.shape), model, res


def hold_plan(spec: OcpSpec, x0) -> np.ndarray:
    """Plan cancelling the feedback at the initial rates, ``ubar_k = -K_fb w0``.

    The applied control is then ``K_fb (w - w0)``, which only damps
    deviations, so rates stay near ``w0`` and controls near zero.
    """
    w0 = np.asarray(x0, dtype=float)[4:]
    return np.tile(-spec.K_matrix @ w0, (spec.K, 1))


def scp_solve(spec: OcpSpec, x0, ubar0=None, cfg: Optional[ScpConfig] = None,
              max_iter: Optional[int] = None) -> ScpResult:
    """Trust-region SCP on the tightened problem.

    Starts from ``ubar0`` (default :func:`hold_plan`). Margins down to
    ``-cfg.feas_tol`` count as satisfied; the padding at nodes past the
    first is orders of magnitude larger, and at the first node the control
    margins are affine in the plan. A step is accepted
    when the merit (cost plus ``cfg.penalty`` times the summed group
    violations) decreases by at least a tenth of the decrease predicted by
    the convex model, and a feasible incumbent is only replaced by a
    feasible candidate. The merit sequence is therefore monotone. The
    solve stops when an accepted step is below ``cfg.tol``.
    """
    cfg = cfg or ScpConfig()
    iters = cfg.max_iter if max_iter is None else int(max_iter)
    x0 = np.asarray(x0, dtype=float)
    ubar = hold_plan(spec, x0) if ubar0 is None else np.array(ubar0, dtype=float).reshape(spec.K, 3)
    radius = cfg.trust_radius
    cost, c = _evaluate(spec, ubar, x0)
    merit = _merit(spec, cost, c, cfg.penalty)
    trace, status = [], "max-iter"
    lin = None
    for _ in range(iters):
        if lin is None:
            lin = _linearize(spec, ubar, x0, cfg)
        X, S, cl, Jc = lin
        delta, model, res = _subproblem(spec, ubar, X, S, cl, Jc, radius, cfg)
        if delta is None:
            trace.append(dict(objective=cost, violation=_violation(c), step=np.nan, accepted=False,
                              radius=radius, merit=merit, ubar=ubar.copy(), qp=res.status))
            status = "infeasible-subproblem"
            break
        step = float(np.max(np.abs(delta)))
        cand = ubar + delta
        cost_c, c_c = _evaluate(spec, cand, x0)
        merit_c = _merit(spec, cost_c, c_c, cfg.penalty)
        predicted = merit - model
        actual = merit - merit_c
        keeps_feasible = np.min(c) < -cfg.feas_tol or np.min(c_c) >= -cfg.feas_tol
        accepted = predicted > 0 and actual >= 0.1 * predicted and keeps_feasible
        if accepted:
            ubar, cost, c, merit = cand, cost_c, c_c, merit_c
            lin = None
            if actual >= 0.75 * predicted and step >= 0.99 * radius:
                radius = min(2 * radius, cfg.max_trust_radius)
            elif actual < 0.25 * predicted:
                radius *= 0.5
        else:
            radius *= 0.25
        trace.append(dict(objective=cost, violation=_violation(c), step=step, accepted=bool(accepted),
                          radius=radius, merit=merit, ubar=ubar.copy(), qp=res.status))
        if (accepted and step < cfg.tol) or predicted <= 1e-12 * max(1.0, abs(merit)) \
                or radius < cfg.tol:
            status = "converged"
            break
    viol = _violation(c)
    if viol > cfg.feas_tol and status != "infeasible-subproblem":
        status = "infeasible-subproblem"
    if status == "infeasible-subproblem":
        log.warning("tightened constraints not satisfied: max violation %.3g", viol)
    if not trace:
        trace.append(dict(objective=cost, violation=viol, step=0.0, accepted=False, radius=radius,
                          merit=merit, ubar=ubar.copy(), qp="skipped"))
    return ScpResult(ubar, status, trace, viol, cost)


def _violation(c) -> float:
    return float(max(0.0, -np.min(c)))


# -- padding -----------------------------------------------------------------------


def padding_for(spec: OcpSpec, ubar=None, omega0=(0.0, 0.0, 0.0), probes: int = 200, seed=0):
    """Quadratic-bound padding per node from sampled Lipschitz constants.

    Constants are estimated on the extremal rate map of the plan ``ubar``
    (default zero) from ``omega0``; returns ``(eps, Lbar, Hbar)`` at nodes.
    """
    if spec.dirs.shape[0] == 0:
        z = np.zeros(spec.nodes)
        return z, z, z
    ubar = np.zeros((spec.K, 3)) if ubar is None else np.asarray(ubar, dtype=float)
    sys = make_spacecraft_omega(spec.J, spec.K_fb, spec.plan_signal(ubar))
    L, H = lipschitz_estimates(sys, spec.W, Singleton(omega0), spec.fine_grid(),
                               probe_count=probes, seed=seed)
    L, H = L[::spec.substeps], H[::spec.substeps]
    delta = covering_radius(spec.dirs)
    _, eps_quad = error_bounds(L, H, delta)
    return eps_quad, L, H


def with_padding(spec: OcpSpec, **kwargs) -> OcpSpec:
    eps, _, _ = padding_for(spec, **kwargs)
    return replace(spec, eps=eps)


def lipschitz_drift(spec: OcpSpec, plans, omega0=(0.0, 0.0, 0.0), probes: int = 200, seed=0) -> float:
    """Largest relative spread of the final-node ``Lbar`` across the given plans."""
    Ls = np.array([padding_for(spec, u, omega0, probes, seed)[1][-1] for u in plans])
    return float((Ls.max() - Ls.min()) / Ls.max())


# -- closed loop -------------------------------------------------------------------


def sample_initial_state(rng, max_angle_deg: float = 60.0, max_rate: float = 0.05) -> np.ndarray:
    """Attitude from a uniform axis and an angle uniform in [0, max_angle]; rates uniform in a box."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(max_angle_deg) * rng.random()
    q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
    return np.concatenate([q, rng.uniform(-max_rate, max_rate, 3)])


def simulate(spec: OcpSpec, x0, ubar, disturbances, t0: float = 0.0) -> np.ndarray:
    """Plant states at every RK4 substep under ``u = ubar + K_fb w + d``.

    Args:
        ubar: ``(intervals, 3)`` plan, possibly batched as ``(intervals, B, 3)``.
        disturbances: one torque per substep, ``(intervals * substeps, ..., 3)``.
    """
    ubar = np.asarray(ubar, dtype=float)
    steps = ubar.shape[0] * spec.substeps
    grid = TimeGrid(t0, t0 + ubar.shape[0] * spec.dt, steps)
    plant = make_spacecraft_full(spec.J, spec.K_fb,
                                 PiecewiseConstant(t0 + spec.dt * np.arange(ubar.shape[0] + 1), ubar))
    dist = PiecewiseConstant(grid.times, disturbances)
    return rk4_integrate(lambda t, y: plant.rhs(t, y, dist(t)), grid, np.asarray(x0, dtype=float))


def applied_controls(spec: OcpSpec, ubar, states) -> np.ndarray:
    """Controls at control nodes ``0..intervals-1`` from substep states."""
    w = states[:-1:spec.substeps, ..., 4:]
    return ubar + np.einsum("ij,k...j->k...i", spec.K_matrix, w)


def check_limits(spec: OcpSpec, omegas, controls, tol: float = 1e-12) -> int:
    """Number of node values exceeding the (untightened) limits.

    The default tolerance only absorbs rounding: at node 0 the padding is
    zero and a plan may sit exactly on a limit.
    """
    bad = np.sum(np.max(np.abs(omegas), axis=-1) > spec.omega_max + tol)
    bad += np.sum(np.max(np.abs(controls), axis=-1) > spec.u_max + tol)
    return int(bad)


@dataclass
class ClosedLoopTrace:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    plans: np.ndarray
    results: List[ScpResult]
    solve_times: np.ndarray
    held: np.ndarray

    @property
    def node_states(self) -> np.ndarray:
        return self.states

    def violations(self, spec: OcpSpec) -> int:
        return check_limits(spec, self.states[:, 4:], self.controls)


def mpc_closed_loop(spec: OcpSpec, x0, steps: int, seed=0, cfg: Optional[ScpConfig] = None,
                    first_iterations: Optional[int] = None,
                    iterations_per_step: int = 1) -> ClosedLoopTrace:
    """Receding-horizon loop: solve, apply the first interval with feedback, shift.

    The first plan is solved to convergence (``first_iterations`` caps it);
    later plans are warm-started from the shifted previous plan and refined
    with ``iterations_per_step`` SCP iterations. When a solve reports an
    infeasible subproblem the shifted previous plan is held and the step is
    flagged in ``held``. Disturbance torques are drawn uniformly from ``W``
    once per RK4 substep.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    cfg = cfg or ScpConfig()
    rng = make_rng(seed)
    x = np.asarray(x0, dtype=float)
    states, controls, plans, results, times, held = [x.copy()], [], [], [], [], []
    warm = None
    for k in range(steps):
        tic = time.perf_counter()
        iters = (first_iterations or cfg.max_iter) if warm is None else iterations_per_step
        res = scp_solve(spec, x, warm, cfg, max_iter=iters)
        times.append(time.perf_counter() - tic)
        hold = res.status == "infeasible-subproblem" and warm is not None
        plan = warm if hold else res.ubar
        if hold:
            log.warning("step %d: holding the previous plan", k)
        results.append(res)
        held.append(hold)
        plans.append(plan.copy())
        d = spec.W.sample(rng, spec.substeps)
        traj = simulate(spec, x, plan[:1], d, t0=k * spec.dt)
        controls.append(applied_controls(spec, plan[:1], traj)[0])
        x = traj[-1]
        states.append(x.copy())
        warm = np.concatenate([plan[1:], plan[-1:]], axis=0)
    return ClosedLoopTrace(spec.dt * np.arange(steps + 1), np.array(states), np.array(controls),
                           np.array(plans), results, np.array(times), np.array(held))


def monte_carlo_plan_check(spec: OcpSpec, x0, ubar, count: int = 1000, seed=0):
    """Open-horizon rollouts of one plan with random disturbances.

    Returns ``(violations, max_rate, max_control)`` over all nodes of all
    rollouts, where rates are checked at nodes ``1..K`` and controls at
    ``0..K-1``.
    """
    rng = make_rng(seed)
    ubar = np.asarray(ubar, dtype=float)
    steps = spec.K * spec.substeps
    d = spec.W.sample(rng, steps * count).reshape(steps, count, 3)
    U = np.repeat(ubar[:, None, :], count, axis=1)
    X = simulate(spec, np.broadcast_to(x0, (count, 7)).copy(), U, d)
    nodes = X[::spec.substeps]
    w = nodes[1:, :, 4:]
    u = applied_controls(spec, U, X)
    return check_limits(spec, w, u), float(np.max(np.abs(w))), float(np.max(np.abs(u)))
