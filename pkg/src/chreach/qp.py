"""Small dense convex QP solver (operator splitting with polishing).

Solves ``min 0.5 x^T P x + q^T x  s.t.  l <= A x <= u`` with ``P`` positive
semidefinite. The iteration is the ADMM scheme popularized by OSQP: a
linear system with the fixed matrix ``P + sigma I + rho A^T A`` per step,
projection onto the box ``[l, u]``, adaptive ``rho``, and a final
active-set polish that solves the equality-constrained KKT system of the
detected active constraints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

INF = 1e20


@dataclass
class QpSettings:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeasible: float = 1e-7
    max_iter: int = 10_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_every: int = 25
    check_every: int = 5
    polish_every: int = 50
    scaling_iter: int = 15
    polish: bool = True


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    objective: float
    primal_residual: float
    dual_residual: float
    polished: bool = False
    info: dict = field(default_factory=dict)


def kkt_residuals(P, q, A, l, u, x, y):
    """Stationarity, primal violation and complementarity (all in the inf-norm)."""
    Ax = A @ x
    stat = np.max(np.abs(P @ x + q + A.T @ y), initial=0.0)
    viol = np.max(np.maximum(np.maximum(l - Ax, Ax - u), 0.0), initial=0.0)
    lo = np.where(l > -INF, np.minimum(y, 0.0) * (Ax - l), 0.0)
    hi = np.where(u < INF, np.maximum(y, 0.0) * (u - Ax), 0.0)
    comp = np.max(np.abs(lo) + np.abs(hi), initial=0.0)
    return float(stat), float(viol), float(comp)


def solve_qp(P, q, A, l, u, settings: Optional[QpSettings] = None,
             x0=None, y0=None) -> QpResult:
    """Solves the QP; ``status`` is one of ``solved``, ``max-iter``, ``primal-infeasible``.

    Bounds beyond ``+-1e20`` are treated as infinite.
    """
    s = settings or QpSettings()
    P = np.atleast_2d(np.asarray(P, dtype=float))
    q = np.asarray(q, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    l = np.clip(np.asarray(l, dtype=float), -INF, INF)
    u = np.clip(np.asarray(u, dtype=float), -INF, INF)
    n, mrows = q.shape[0], A.shape[0]
    if P.shape != (n, n) or A.shape[1] != n or l.shape != (mrows,) or u.shape != (mrows,):
        raise ValueError("inconsistent QP dimensions")
    if np.any(l > u):
        raise ValueError("lower bounds exceed upper bounds")

    D, E, cost_scale = _ruiz(P, q, A, s.scaling_iter)
    P0, q0, A0, l0, u0 = P, q, A, l, u
    P = cost_scale * (D[:, None] * P * D[None, :])
    q = cost_scale * D * q
    A = E[:, None] * A * D[None, :]
    l = np.where(l0 > -INF, E * l0, -INF)
    u = np.where(u0 < INF, E * u0, INF)

    eq = (u - l) < 1e-10
    rho_vec = np.where(eq, 1e3 * s.rho, s.rho)
    rho_vec = np.where((l <= -INF) & (u >= INF), 1e-6, rho_vec)

    def factor(rv):
        return cho_factor(P + s.sigma * np.eye(n) + A.T @ (rv[:, None] * A))

    fac = factor(rho_vec)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / D
    z = np.clip(A @ x, l, u)
    y = np.zeros(mrows) if y0 is None else cost_scale * np.asarray(y0, dtype=float) / E
    status = "max-iter"
    r_prim = r_dual = np.inf
    it = 0
    for it in range(1, s.max_iter + 1):
        rhs = s.sigma * x - q + A.T @ (rho_vec * z - y)
        xt = cho_solve(fac, rhs)
        zt = A @ xt
        x_new = s.alpha * xt + (1 - s.alpha) * x
        z_relax = s.alpha * zt + (1 - s.alpha) * z
        z_new = np.clip(z_relax + y / rho_vec, l, u)
        y_new = y + rho_vec * (z_relax - z_new)
        dy = y_new - y
        x, z, y = x_new, z_new, y_new

        if it % s.check_every and it != s.max_iter:
            continue
        # residuals are measured on the unscaled problem
        xo, yo, zo = D * x, E * y / cost_scale, z / E
        Ax, Px, Aty = A0 @ xo, P0 @ xo, A0.T @ yo
        r_prim = np.max(np.abs(Ax - zo), initial=0.0)
        r_dual = np.max(np.abs(Px + q0 + Aty), initial=0.0)
        e_prim = s.eps_abs + s.eps_rel * max(np.max(np.abs(Ax), initial=0.0),
                                             np.max(np.abs(zo), initial=0.0))
        e_dual = s.eps_abs + s.eps_rel * max(np.max(np.abs(Px), initial=0.0),
                                             np.max(np.abs(Aty), initial=0.0),
                                             np.max(np.abs(q0), initial=0.0))
        if r_prim <= e_prim and r_dual <= e_dual:
            status = "solved"
            break
        if _primal_infeasible(A, l, u, dy, s.eps_infeasible):
            status = "primal-infeasible"
            break
        if (s.polish and s.polish_every and it % s.polish_every == 0
                and r_prim <= 1e3 * e_prim and r_dual <= 1e3 * e_dual):
            # an active-set guess from a rough iterate often verifies exactly
            trial = QpResult(xo, yo, "max-iter", it, 0.0, float(r_prim), float(r_dual))
            _polish(P0, q0, A0, l0, u0, trial, s)
            if trial.polished:
                return trial
        if s.adapt_every and it % s.adapt_every == 0:
            # the step-size balance uses the scaled problem the iteration runs on
            Ax, Px, Aty = A @ x, P @ x, A.T @ y
            num = np.max(np.abs(Ax - z), initial=0.0) / max(
                np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-30)
            den = np.max(np.abs(Px + q + Aty), initial=0.0) / max(
                np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                np.max(np.abs(q), initial=0.0), 1e-30)
            scale = np.sqrt(num / max(den, 1e-30))
            if scale > 5.0 or scale < 0.2:
                rho_vec = np.clip(rho_vec * scale, 1e-6, 1e6)
                fac = factor(rho_vec)

    x, y = D * x, E * y / cost_scale
    res = QpResult(x, y, status, it, float(0.5 * x @ P0 @ x + q0 @ x), float(r_prim), float(r_dual))
    if status == "primal-infeasible":
        res.info["certificate"] = E * dy
        return res
    if s.polish:
        _polish(P0, q0, A0, l0, u0, res, s)
    return res


def _ruiz(P, q, A, iterations):
    """Modified Ruiz equilibration of the KKT matrix, with a scalar cost scale."""
    n, mrows = P.shape[0], A.shape[0]
    D, E = np.ones(n), np.ones(mrows)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    c = 1.0
    for _ in range(iterations):
        col = np.maximum(np.max(np.abs(Ps), axis=0, initial=0.0), np.max(np.abs(As), axis=0, initial=0.0))
        row = np.max(np.abs(As), axis=1, initial=0.0)
        dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dE = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dD[:, None] * Ps * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        qs = dD * qs
        D *= dD
        E *= dE
        mean_col = np.mean(np.max(np.abs(Ps), axis=0, initial=0.0))
        gamma = 1.0 / np.clip(max(mean_col, np.max(np.abs(qs), initial=0.0)), 1e-4, 1e4)
        Ps *= gamma
        qs *= gamma
        c *= gamma
    return D, E, c


def _primal_infeasible(A, l, u, dy, eps):
    norm = np.max(np.abs(dy), initial=0.0)
    if norm < 1e-30:
        return False
    if np.max(np.abs(A.T @ dy), initial=0.0) > eps * norm:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any((pos > eps * norm) & (u >= INF)) or np.any((neg < -eps * norm) & (l <= -INF)):
        return False
    support = np.sum(np.where(u < INF, u * pos, 0.0)) + np.sum(np.where(l > -INF, l * neg, 0.0))
    return support < -eps * norm


def _polish(P, q, A, l, u, res, s):
    """Re-solves the KKT system on the guessed active set; keeps it if it verifies."""
    n = q.shape[0]
    Ax = A @ res.x
    tol = 1e-7 * max(1.0, np.max(np.abs(res.y), initial=0.0))
    lower = (res.y < -tol) | ((Ax - l) < 1e-9 * (1 + np.abs(l)))
    upper = ~lower & ((res.y > tol) | ((u - Ax) < 1e-9 * (1 + np.abs(u))))
    lower &= l > -INF
    upper &= u < INF
    act = np.flatnonzero(lower | upper)
    b = np.where(lower, l, u)[act]
    Aa = A[act]
    k = act.shape[0]
    delta = 1e-11
    K = np.zeros((n + k, n + k))
    K[:n, :n] = P
    K[:n, n:] = Aa.T
    K[n:, :n] = Aa
    Kreg = K.copy()
    Kreg[:n, :n] += delta * np.eye(n)
    Kreg[n:, n:] -= delta * np.eye(k)
    rhs = np.concatenate([-q, b])
    try:
        sol = np.linalg.solve(Kreg, rhs)
        for _ in range(5):
            sol = sol + np.linalg.solve(Kreg, rhs - K @ sol)
    except np.linalg.LinAlgError:
        return
    x = sol[:n]
    y = np.zeros_like(res.y)
    y[act] = sol[n:]
    # duals of lower-active rows must be <= 0 and of upper-active rows >= 0
    ok_sign = np.all(y[lower] <= 1e-9) and np.all(y[upper] >= -1e-9)
    stat, viol, comp = kkt_residuals(P, q, A, l, u, x, y)
    if ok_sign and viol <= s.eps_abs and stat <= s.eps_abs and comp <= s.eps_abs:
        old = kkt_residuals(P, q, A, l, u, res.x, res.y)
        if max(stat, viol) <= max(old[0], old[1]) or res.status != "solved":
            res.x, res.y = x, y
            res.objective = float(0.5 * x @ P @ x + q @ x)
            res.primal_residual, res.dual_residual = viol, stat
            res.polished = True
            res.status = "solved"
