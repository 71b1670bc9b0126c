"""End-to-end acceptance checks; each prints one PASS/FAIL line.

The lines are also collected into a summary section at the end of the
pytest run (see ``conftest.py``).
"""
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from scipy.linalg import expm

from chreach import baselines as bl
from chreach import geometry as geo
from chreach import mpc
from chreach import qp
from chreach import reach as rc
from chreach import relaxations as rx
from chreach import systems as sy
from test_qp import brute_force, random_qp

pytestmark = pytest.mark.slow


def report(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def attraction_repulsion():
    return (sy.make_attraction_repulsion(), geo.Ball(np.zeros(2), 0.1), rc.Singleton([0.0, -1.5]),
            rc.TimeGrid(0, 2, 200))


def test_gauss_map_round_trips():
    rng = np.random.default_rng(0)
    sets = {
        "ball": geo.Ball([0.3, -1.0, 2.0], 0.7),
        "ellipsoid": geo.Ellipsoid([1.0, 0.0, -1.0], np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.2],
                                                               [0.0, 0.2, 0.5]])),
        "lambda-under": geo.LambdaBall([0.0, 1.0, 0.0], [0.5, 1.0, 2.0], 8.0, "under"),
        "lambda-over": geo.LambdaBall([0.0, 1.0, 0.0], [0.5, 1.0, 2.0], 8.0, "over"),
        "lifted": geo.lift_set(geo.Ball(np.zeros(2), 0.5), 3),
    }
    errors = {}
    for name, S in sets.items():
        d = rng.standard_normal((1000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        x = geo.inverse_gauss_map(S, d)
        errors[name] = max(np.max(np.abs(geo.gauss_map(S, x) - d)), np.max(np.abs(S.level(x) - 1.0)))
    # the lifted set through its level function, independently of the ellipsoid class
    h, ginv = geo.lifted_level_maps(geo.Ball(np.zeros(2), 0.5), 3)
    d = rng.standard_normal((1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    x = geo.level_set_inverse_gauss_map(h, ginv, d)
    errors["lifted-level"] = np.max(np.abs(x - geo.inverse_gauss_map(sets["lifted"], d)))
    worst = max(errors.values())
    report(1, worst <= 1e-9, f"max Gauss-map round-trip error {worst:.2e} (<= 1e-9) over {sorted(errors)}")


def test_containment_attraction_repulsion():
    tic = time.perf_counter()
    sys_, W, X0, grid = attraction_repulsion()
    dirs = geo.sample_sphere(2, 512, "uniform-angle")
    est = rc.estimate_hulls(sys_, W, X0, dirs, grid)
    L, H = rc.lipschitz_estimates(sys_, W, X0, grid, probe_count=200)
    _, eps_quad = rc.error_bounds(L, H, 2 * np.sin(np.pi / 1024))
    X = bl.monte_carlo_rollouts(sys_, W, X0, 10_000, seed=0, grid=grid)
    bad, worst = 0, -np.inf
    for k in range(grid.steps + 1):
        excess = geo.distance_to_hull(X[k], est.hull(k)) - eps_quad[k]
        bad += int(np.any(excess > 3e-3))
        worst = max(worst, float(np.max(excess)))
    elapsed = time.perf_counter() - tic
    report(2, bad == 0 and elapsed <= 120,
           f"{bad} nodes outside eps_quad + 3e-3 (max excess {worst:.2e}), {elapsed:.0f} s (<= 120 s)")


def test_costate_scale_invariance():
    A, B, policy = sy.load_neural_loop()
    cases = {
        "attraction-repulsion": attraction_repulsion(),
        "dubins": (sy.make_dubins(), geo.Ball(np.zeros(3), 0.01), rc.Singleton(np.zeros(3)),
                   rc.TimeGrid(0, 6, 200)),
        "neural-loop": (sy.make_neural_loop(A, B, policy), geo.Ball(np.zeros(2), np.sqrt(2) / 20),
                        rc.Ovaloid(geo.Ellipsoid([2.75, 0.0], 2 * np.diag([0.25 ** 2, 0.1 ** 2]))),
                        rc.TimeGrid(0, 4, 160)),
        "spacecraft-omega": (sy.make_spacecraft_omega(), geo.Ball(np.zeros(3), 0.01),
                             rc.Singleton([0.05, -0.03, 0.02]), rc.TimeGrid(0, 10, 100)),
        "single-integrator": (sy.make_single_integrator(2), geo.Ball(np.zeros(2), 1.0),
                              rc.Singleton(np.zeros(2)), rc.TimeGrid(0, 1, 50)),
    }
    worst = 0.0
    for sys_, W, X0, grid in cases.values():
        for d in geo.sample_sphere(sys_.n, 3, "random", seed=1):
            base = rc.extremal_trajectory(sys_, W, X0, d, grid).x
            for c in (0.5, 3.0):
                x = rc.extremal_trajectory(sys_, W, X0, d, grid, p_scale=c).x
                worst = max(worst, float(np.max(np.abs(x - base))))
    report(3, worst <= 1e-9, f"max |x_d0 - x_(c d0)| = {worst:.2e} (<= 1e-9) on {len(cases)} systems")


def test_convergence_rate():
    sys_, W, X0, grid = attraction_repulsion()
    ref = rc.estimate_hulls(sys_, W, X0, geo.sample_sphere(2, 4096, "uniform-angle"), grid).hull(-1)
    Ms = [32, 64, 128, 256]
    dist = [geo.hausdorff(rc.estimate_hulls(sys_, W, X0, geo.sample_sphere(2, M, "uniform-angle"),
                                            grid).hull(-1), ref) for M in Ms]
    delta = [2 * np.sin(np.pi / (2 * M)) for M in Ms]
    slope = np.polyfit(np.log(delta), np.log(dist), 1)[0]
    report(4, slope >= 1.5, f"log-log slope {slope:.3f} (>= 1.5); dH = {np.round(dist, 6).tolist()}")


def test_rect_sandwich():
    sys_ = sy.make_dubins(0.5, 0.5)
    spec = rx.RectSpec(1e-2 * np.ones(3))
    X0 = rc.Ovaloid(geo.Ellipsoid(np.zeros(3), 1e-3 * np.diag([1, 1, 0.1])))
    dirs = geo.sample_sphere(3, 200, "fibonacci")
    grid = rc.TimeGrid(0, 6, 200)
    worst, gaps = 0.0, []
    for lam in (4.0, 8.0, 16.0):
        under = rx.estimate_hulls_rect(sys_, spec, lam, "under", dirs, grid, X0=X0)
        over = rx.estimate_hulls_rect(sys_, spec, lam, "over", dirs, grid, X0=X0)
        for k in range(grid.steps + 1):
            worst = max(worst, float(np.max(geo.distance_to_hull(under.states[k], over.hull(k)))))
        gaps.append(geo.hausdorff(under.hull(-1), over.hull(-1)))
    ok = worst <= 1e-9 and gaps[0] > gaps[1] > gaps[2]
    report(5, ok, f"max under-to-over distance {worst:.1e} (<= 1e-9); "
                  f"dH(under, over) at T = {np.round(gaps, 5).tolist()} (strictly decreasing)")


def test_eps_extension():
    G = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    base = sy.make_dubins(0.5, 0.5, G)
    W = geo.Ball(np.zeros(2), 1e-2)
    X0 = rc.Ovaloid(geo.Ellipsoid(np.zeros(3), 1e-3 * np.diag([1, 1, 0.1])))
    grid = rc.TimeGrid(0, 6, 60)
    dirs = geo.sample_sphere(3, 100, "fibonacci")
    X = bl.monte_carlo_rollouts(base, W, X0, 1000, seed=0, grid=grid)
    hulls, bad = [], 0
    for eps in (0.2, 0.1, 0.05):
        spec = rx.EpsExtensionSpec(base, W, eps, extra=np.array([[0.0], [1.0], [0.0]]))
        est = rx.estimate_hulls_fullrank_relax(spec, X0, dirs, grid)
        for k in range(grid.steps + 1):
            bad += int(np.sum(geo.distance_to_hull(X[k], est.hull(k)) > 3e-3))
        hulls.append(est.hull(-1))
    d1, d2 = geo.hausdorff(hulls[0], hulls[1]), geo.hausdorff(hulls[1], hulls[2])
    ok = bad == 0 and 0.15 <= d2 / d1 <= 0.6
    report(6, ok, f"{bad} MC states outside any eps-hull (+3e-3); shrink factor {d2 / d1:.3f} in [0.15, 0.6]")


def test_exact_disk():
    M = 64
    grid = rc.TimeGrid(0, 1, 20)
    est = rc.estimate_hulls(sy.make_single_integrator(2), geo.Ball(np.zeros(2), 1.0),
                            rc.Singleton(np.zeros(2)), geo.sample_sphere(2, M, "uniform-angle"), grid)
    worst = -np.inf
    for k in range(1, grid.steps + 1):
        t = grid.times[k]
        V = est.hull(k).points
        W = np.roll(V, -1, axis=0)
        # polygon inside the disk: dH = max(outward vertex overshoot, t - closest edge distance)
        edge = np.abs(V[:, 0] * W[:, 1] - V[:, 1] * W[:, 0]) / np.linalg.norm(W - V, axis=1)
        dH = max(np.max(np.linalg.norm(V, axis=1)) - t, t - np.min(edge))
        worst = max(worst, dH - (2 * np.sin(np.pi / (2 * M)) * t + 1e-6))
    report(7, worst <= 0, f"max Hausdorff error minus bound {worst:.2e} (<= 0), M = {M}")


def _alg1_vs_randup(sys_, W, X0, grid, dt, scheme):
    n = sys_.n
    truth = rc.estimate_hulls(sys_, W, X0, geo.sample_sphere(n, 4096, scheme), grid).hull(-1)
    alg1 = rc.estimate_hulls(sys_, W, X0, geo.sample_sphere(n, 100, scheme), grid).hull(-1)
    steps = int(round((grid.tf - grid.t0) / dt))
    ru = bl.randup_hulls(bl.DiscreteSystem(sys_, dt, steps, substeps=10), W, X0, 100, seed=0)
    return truth, geo.hausdorff(alg1, truth), geo.hausdorff(ru.hull(-1), truth)


def test_baseline_ordering():
    A, B, policy = sy.load_neural_loop()
    nn = (sy.make_neural_loop(A, B, policy), geo.Ball(np.zeros(2), np.sqrt(2) / 20),
          rc.Ovaloid(geo.Ellipsoid([2.75, 0.0], 2 * np.diag([0.25 ** 2, 0.1 ** 2]))),
          rc.TimeGrid(0, 4, 160))
    _, a_nn, r_nn = _alg1_vs_randup(*nn, 0.25, "uniform-angle")
    w0 = np.array([0.05, -0.03, 0.02])
    sc = sy.make_spacecraft_omega()
    truth, a_sc, r_sc = _alg1_vs_randup(sc, geo.Ball(np.zeros(3), 1e-2), rc.Singleton(w0),
                                        rc.TimeGrid(0, 10, 100), 1.0, "fibonacci")
    dsys = bl.DiscreteSystem(sc, 1.0, 10, 10, "additive")
    Hbar = bl.estimate_step_hessian_lipschitz(dsys, w0, 0.2, probes=1000, seed=0)
    tube = bl.lipschitz_tube(dsys, w0, 1e-2, Hbar)
    X = bl.monte_carlo_rollouts(dsys, geo.Ball(np.zeros(3), 1e-2), rc.Singleton(w0), 1000, seed=1)
    outside = sum(int(np.sum(~tube.contains(k, X[k]))) for k in range(11))
    tube_hull = geo.hull_of(tube.boundary_points(10, geo.sample_sphere(3, 2000, "random")))
    t_sc = geo.hausdorff(tube_hull, truth)
    ok = a_nn <= r_nn / 5 and a_sc <= r_sc / 5 and outside == 0 and t_sc > a_sc
    report(8, ok, f"neural loop dH alg1/randup = {a_nn:.2e}/{r_nn:.2e} ({r_nn / a_nn:.1f}x); "
                  f"spacecraft {a_sc:.2e}/{r_sc:.2e} ({r_sc / a_sc:.1f}x); "
                  f"tube: {outside} MC violations, dH {t_sc:.2e} > alg1")


def test_mpc_closed_loop():
    tic = time.perf_counter()
    spec = mpc.with_padding(mpc.OcpSpec(), probes=200)
    violations, finals, monotone, monotone_multi = 0, [], [], []
    for seed in range(20):
        x0 = mpc.sample_initial_state(geo.make_rng(1000 + seed))
        tr = mpc.mpc_closed_loop(spec, x0, 30, seed=seed)
        violations += tr.violations(spec)
        finals.append(float(np.max(np.abs(tr.states[-1, 4:]))))
        for res in tr.results:
            e = res.errors
            flag = bool(np.all(np.diff(e[1:]) <= 1e-12))
            monotone.append(flag)
            if len(e) > 2:
                monotone_multi.append(flag)
    elapsed = time.perf_counter() - tic
    frac, frac_multi = float(np.mean(monotone)), float(np.mean(monotone_multi))
    ok = violations == 0 and max(finals) < 0.02 and frac >= 0.9 and elapsed <= 600
    report(9, ok, f"{violations} violations over 20 runs; max final |w|_inf {max(finals):.4f} (< 0.02); "
                  f"non-increasing error traces {frac:.0%} of all solves, {frac_multi:.0%} of "
                  f"{len(monotone_multi)} multi-iteration solves; {elapsed:.0f} s (<= 600 s)")


def test_integrator_and_qp():
    y = rc.rk4_integrate(lambda t, y: -y, rc.TimeGrid(0, 1, 100), np.array([1.0]))
    err_exp = abs(y[-1, 0] - np.exp(-1.0))
    Arot = np.array([[0.0, -1.0], [1.0, 0.0]])
    x0 = np.array([0.3, -0.8])
    grid = rc.TimeGrid(0, np.pi, 1000)
    y = rc.rk4_integrate(lambda t, y: y @ Arot.T, grid, x0)
    err_rot = max(np.max(np.abs(y[k] - expm(t * Arot) @ x0)) for k, t in enumerate(grid.times))
    kkt, gap = 0.0, 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n, m = rng.integers(1, 5, size=2)
        P, q, A, l, u = random_qp(rng, n, m)
        res = qp.solve_qp(P, q, A, l, u)
        kkt = max(kkt, *qp.kkt_residuals(P, q, A, l, u, res.x, res.y))
        gap = max(gap, abs(res.objective - brute_force(P, q, A, l, u)))
    ok = max(err_exp, err_rot) <= 1e-7 and kkt <= 1e-6 and gap <= 1e-8
    report(10, ok, f"RK4 errors exp {err_exp:.1e}, rotation {err_rot:.1e} (<= 1e-7); "
                   f"QP max KKT residual {kkt:.1e} (<= 1e-6), brute-force gap {gap:.1e} (<= 1e-8)")
