import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp, trapezoid
from scipy.interpolate import CubicSpline
from scipy.linalg import expm

from chreach import geometry as geo
from chreach import reach as rc
from chreach import systems as sy
from chreach.errors import ConfigError, DivergenceError, SingularCostateError


def linear_system(A):
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    g, jg = sy._const_g(np.eye(n))
    return sy.SystemDef(n, n, lambda t, x: np.einsum("ij,...j->...i", A, x), g,
                        lambda t, x: np.broadcast_to(A, x.shape[:-1] + A.shape), jg, "linear")


INTEGRATOR = linear_system(np.zeros((2, 2)))


def benchmark_cases():
    A, B, pol = sy.load_neural_loop()
    return {
        "dubins": (sy.make_dubins(0.5, 0.5), geo.Ball(np.zeros(3), 1e-2),
                   rc.Ovaloid(geo.Ellipsoid(np.zeros(3), 1e-3 * np.diag([1, 1, 0.1]))),
                   rc.TimeGrid(0, 6, 120)),
        "attraction-repulsion": (sy.make_attraction_repulsion(), geo.Ball(np.zeros(2), 0.1),
                                 rc.Singleton([0.0, -1.5]), rc.TimeGrid(0, 2, 100)),
        "neural-loop": (sy.make_neural_loop(A, B, pol), geo.Ball(np.zeros(2), np.sqrt(2) / 20),
                        rc.Ovaloid(geo.Ellipsoid([2.75, 0.0], 2 * np.diag([0.25 ** 2, 0.1 ** 2]))),
                        rc.TimeGrid(0, 4, 80)),
        "spacecraft": (sy.make_spacecraft_omega(ubar=[0.01, 0.0, -0.01]), geo.Ball(np.zeros(3), 1e-2),
                       rc.Singleton([0.05, -0.02, 0.03]), rc.TimeGrid(0, 10, 100)),
    }


class TestRK4:
    def test_exponential(self):
        y = rc.rk4_integrate(lambda t, y: -y, rc.TimeGrid(0, 1, 100), np.array([1.0]))
        assert abs(y[-1, 0] - np.exp(-1)) <= 1e-9

    def test_rotation(self):
        A = np.array([[0.0, -1.0], [1.0, 0.0]])
        x0 = np.array([0.3, -0.8])
        y = rc.rk4_integrate(lambda t, y: A @ y, rc.TimeGrid(0, np.pi, 1000), x0)
        np.testing.assert_allclose(y[-1], -x0, atol=1e-7)
        np.testing.assert_allclose(y[-1], expm(np.pi * A) @ x0, atol=1e-7)

    def test_zero_rhs(self):
        y = rc.rk4_integrate(lambda t, y: 0 * y, rc.TimeGrid(0, 1, 10), np.array([1.0, 2.0]))
        assert np.all(y == [1.0, 2.0])

    def test_fourth_order(self):
        errs = [abs(rc.rk4_integrate(lambda t, y: -y, rc.TimeGrid(0, 1, k), np.array([1.0]))[-1, 0]
                    - np.exp(-1)) for k in (5, 10)]
        assert 14 < errs[0] / errs[1] < 18

    def test_divergence(self):
        with pytest.raises(DivergenceError) as info:
            rc.rk4_integrate(lambda t, y: y ** 2, rc.TimeGrid(0, 2, 200), np.array([1.0]))
        assert info.value.node is not None and 90 <= info.value.node <= 200

    def test_grid_validation(self):
        with pytest.raises(ConfigError):
            rc.TimeGrid(1.0, 1.0, 10)
        with pytest.raises(ConfigError):
            rc.TimeGrid(0.0, 1.0, 0)
        assert rc.TimeGrid(0, 3, 7).times[-1] == 3.0


class TestAugmented:
    def test_pure_disturbance(self):
        xdot, pdot, w = rc.augmented_rhs(INTEGRATOR, geo.Ball([0, 0], 1), 0.0, np.zeros(2),
                                         np.array([1.0, 0.0]))
        np.testing.assert_allclose(w, [-1, 0])
        np.testing.assert_allclose(xdot, [-1, 0])
        np.testing.assert_allclose(pdot, [0, 0])

    def test_linear_costate(self):
        A = np.array([[0.2, -1.0], [0.5, -0.3]])
        p = np.array([0.6, -0.8])
        _, pdot, _ = rc.augmented_rhs(linear_system(A), geo.Ball([0, 0], 1), 0.0, np.ones(2), p)
        np.testing.assert_allclose(pdot, -A.T @ p)

    @pytest.mark.parametrize("W", [geo.Ball([0.1, 0.0], 0.3),
                                   geo.Ellipsoid([0, 0], [[2.0, 0.4], [0.4, 0.5]]),
                                   geo.LambdaBall([0, 0], [0.2, 0.1], 8, "under")], ids=repr)
    def test_extremality(self, W):
        rng = np.random.default_rng(0)
        sysd = sy.make_attraction_repulsion()
        for _ in range(5):
            x, p = rng.uniform(-2, 2, 2), rng.standard_normal(2)
            _, _, w = rc.augmented_rhs(sysd, W, 0.0, x, p)
            g = sysd.g(0.0, x)
            v = W.sample(rng, 1000)
            assert np.all(p @ g @ w <= (v @ g.T @ p) + 1e-9)
            assert abs(W.level(w) - 1) <= 1e-8

    def test_singular(self):
        with pytest.raises(SingularCostateError):
            rc.augmented_rhs(INTEGRATOR, geo.Ball([0, 0], 1), 0.0, np.zeros(2), np.zeros(2))


class TestInitialPair:
    def test_singleton(self):
        x0, p0 = rc.initial_pair([0.6, 0.8], rc.Singleton([1.0, 2.0]))
        np.testing.assert_array_equal(x0, [1.0, 2.0])
        np.testing.assert_array_equal(p0, [0.6, 0.8])

    def test_ball(self):
        x0, _ = rc.initial_pair([0.0, 1.0], geo.Ball([0, 0], 1.0))
        np.testing.assert_allclose(x0, [0.0, -1.0])

    def test_ellipsoid(self):
        x0, _ = rc.initial_pair([1.0, 0.0], rc.Ovaloid(geo.Ellipsoid([0, 0], np.diag([4.0, 1.0]))))
        np.testing.assert_allclose(x0, [-2.0, 0.0])

    def test_outward_normal_is_minus_d0(self):
        E = geo.Ellipsoid([1, -1, 0], np.diag([3.0, 1.0, 0.2]))
        d = geo.sample_sphere(3, 40, "fibonacci")
        x0, _ = rc.initial_pair(d, E)
        np.testing.assert_allclose(E.gauss_map(x0), -d, atol=1e-12)


class TestExtremalTrajectory:
    def test_pure_drift(self):
        grid = rc.TimeGrid(0, 2, 20)
        tr = rc.extremal_trajectory(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2), [1.0, 0.0], grid)
        np.testing.assert_allclose(tr.x, np.stack([-grid.times, 0 * grid.times], 1), atol=1e-14)
        np.testing.assert_allclose(tr.w, np.tile([-1.0, 0.0], (21, 1)))

    @pytest.mark.parametrize("name", list(benchmark_cases()))
    @pytest.mark.parametrize("c", [0.5, 3.0])
    def test_costate_scale_invariance(self, name, c):
        sysd, W, X0, grid = benchmark_cases()[name]
        for d0 in geo.sample_sphere(sysd.n, 4, "random", seed=1):
            a = rc.extremal_trajectory(sysd, W, X0, d0, grid)
            b = rc.extremal_trajectory(sysd, W, X0, d0, grid, p_scale=c)
            assert np.max(np.abs(a.x - b.x)) <= 1e-9

    @pytest.mark.parametrize("name", list(benchmark_cases()))
    def test_costate_positive_and_w_on_boundary(self, name):
        sysd, W, X0, grid = benchmark_cases()[name]
        est = rc.estimate_hulls(sysd, W, X0, geo.sample_sphere(sysd.n, 16, "random", seed=2), grid,
                                keep_costates=True)
        gtp = np.einsum("...ij,...i->...j", sysd.g(0.0, est.states), est.costates)
        assert np.min(np.linalg.norm(est.costates, axis=-1)) > 0
        assert np.min(np.linalg.norm(gtp, axis=-1)) > 1e-10
        assert np.max(np.abs(W.level(est.disturbances) - 1)) <= 1e-8

    def test_single_matches_batch_bitwise(self):
        sysd, W, X0, grid = benchmark_cases()["attraction-repulsion"]
        D = geo.sample_sphere(2, 9, "uniform-angle")
        est = rc.estimate_hulls(sysd, W, X0, D, grid)
        for i, d in enumerate(D):
            assert np.array_equal(rc.extremal_trajectory(sysd, W, X0, d, grid).x, est.states[:, i])

    def test_requires_square(self):
        sysd = sy.make_dubins(G=np.array([[1.0, 0], [0, 0], [0, 1.0]]))
        with pytest.raises(ConfigError):
            rc.extremal_trajectory(sysd, geo.Ball([0, 0], 1), np.zeros(3), [1.0, 0, 0],
                                   rc.TimeGrid(0, 1, 4))


class TestReintegration:
    """Hull vertices are genuine reachable states."""

    def test_stage_exact_replay(self):
        sysd, W, X0, grid = benchmark_cases()["attraction-repulsion"]
        d0 = np.array([0.6, -0.8])
        log = []
        rhs = rc._stacked_rhs(sysd, W)

        def logging_rhs(t, y):
            log.append(rc.augmented_rhs(sysd, W, t, y[:2], y[2:])[2])
            return rhs(t, y)

        x0, p0 = rc.initial_pair(d0, X0)
        rc.rk4_integrate(logging_rhs, grid, np.r_[x0, p0])
        it = iter(log)
        replay = rc.rk4_integrate(lambda t, x: sysd.rhs(t, x, next(it)), grid, x0)
        vertex = rc.extremal_trajectory(sysd, W, X0, d0, grid).x
        assert np.max(np.abs(replay - vertex)) <= 1e-9

    def test_independent_solver(self):
        sysd, W, X0, _ = benchmark_cases()["neural-loop"]
        grid = rc.TimeGrid(0, 4, 2000)
        d0 = np.array([0.28, -0.96])
        tr = rc.extremal_trajectory(sysd, W, X0, d0, grid)
        w_of_t = CubicSpline(grid.times, tr.w)
        sol = solve_ivp(lambda t, x: sysd.rhs(t, x, w_of_t(t)), (0, 4), tr.x[0],
                        method="DOP853", rtol=1e-12, atol=1e-12)
        assert np.max(np.abs(sol.y[:, -1] - tr.x[-1])) <= 1e-6
        assert np.max(np.linalg.norm(w_of_t(np.linspace(0, 4, 5001)), axis=1)) <= W.radius * (1 + 1e-6)


class TestEstimateHulls:
    def test_single_direction(self):
        est = rc.estimate_hulls(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2), [[1.0, 0.0]],
                                rc.TimeGrid(0, 1, 5))
        assert all(len(h) == 1 for h in est.hulls)

    def test_exact_disk(self):
        M, grid = 64, rc.TimeGrid(0, 1, 10)
        est = rc.estimate_hulls(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2),
                                geo.sample_sphere(2, M, "uniform-angle"), grid)
        for k in (3, 10):
            t = grid.times[k]
            err = t - t * np.cos(np.pi / M)
            assert err <= 2 * np.sin(np.pi / (2 * M)) * t + 1e-6
            circle = t * geo.sample_sphere(2, 4096, "uniform-angle")
            assert np.max(geo.distance_to_hull(circle, est.hull(k))) == pytest.approx(err, abs=1e-6)

    def test_monotone_in_directions(self):
        sysd, W, X0, grid = benchmark_cases()["dubins"]
        D = geo.sample_sphere(3, 40, "fibonacci")
        small = rc.estimate_hulls(sysd, W, X0, D[::3], grid)
        big = rc.estimate_hulls(sysd, W, X0, D, grid)
        for k in (0, 60, 120):
            assert np.max(geo.distance_to_hull(small.states[k], big.hull(k))) <= 1e-9

    def test_thread_count_does_not_change_bits(self):
        sysd, W, X0, grid = benchmark_cases()["neural-loop"]
        D = geo.sample_sphere(2, 50, "uniform-angle")
        a = rc.estimate_hulls(sysd, W, X0, D, grid, threads=1, chunk=50)
        b = rc.estimate_hulls(sysd, W, X0, D, grid, threads=4, chunk=7)
        assert np.array_equal(a.states, b.states)

    def test_failure_reports_direction(self):
        blow = sy.SystemDef(2, 2, lambda t, x: np.stack([x[..., 0] ** 2, 0 * x[..., 1]], -1),
                            *sy._const_g(np.eye(2))[:1], lambda t, x: np.zeros(x.shape + (2,)),
                            sy._const_g(np.eye(2))[1])
        D = np.array([[0.0, 1.0], [0.0, -1.0], [-1.0, 0.0]])
        with pytest.raises(DivergenceError) as info:
            rc.estimate_hulls(blow, geo.Ball([0, 0], 1), [1.0, 0.0], D, rc.TimeGrid(0, 3, 300))
        assert info.value.direction in (0, 1)

    def test_padding(self):
        est = rc.estimate_hulls(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2),
                                geo.sample_sphere(2, 8, "uniform-angle"), rc.TimeGrid(0, 1, 4))
        assert np.all(est.eps == 0)
        np.testing.assert_allclose(est.with_padding(0.1).eps, 0.1)
        with pytest.raises(ConfigError):
            est.with_padding(-1.0)


class TestLipschitz:
    def test_single_integrator(self):
        grid = rc.TimeGrid(0, 2, 8)
        L, H = rc.lipschitz_estimates(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2), grid,
                                      probe_count=50)
        np.testing.assert_allclose(L, grid.times, rtol=1e-6, atol=1e-9)
        assert np.all(H <= 1.2 * grid.times + 1e-9)

    def test_gronwall_bound(self):
        A = np.array([[-0.5, 1.0], [-1.0, -0.2]])
        grid = rc.TimeGrid(0, 2, 40)
        L, _ = rc.lipschitz_estimates(linear_system(A), geo.Ball([0, 0], 0.3), np.zeros(2), grid,
                                      probe_count=100)
        a = np.linalg.norm(A, 2)
        s = np.linspace(0, 1, 2001)
        bound = [0.3 * trapezoid(np.exp(a * t * (1 - s)) * np.exp(2 * a * t * s), s * t)
                 for t in grid.times]
        assert np.all(L <= np.array(bound) * (1 + 1e-6) + 1e-9)
        assert L[-1] > 0

    def test_nested_probes_monotone(self):
        sysd, W, X0, grid = benchmark_cases()["attraction-repulsion"]
        small = rc.lipschitz_estimates(sysd, W, X0, grid, probe_count=20, seed=3)
        big = rc.lipschitz_estimates(sysd, W, X0, grid, probe_count=60, seed=3)
        assert np.all(big[0] >= small[0]) and np.all(big[1] >= small[1])

    def test_probe_count_validation(self):
        with pytest.raises(ConfigError):
            rc.lipschitz_estimates(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2),
                                   rc.TimeGrid(0, 1, 2), probe_count=1)


class TestErrorBounds:
    def test_plug_in(self):
        naive, quad = rc.error_bounds(1.0, 1.0, 0.1)
        assert naive == pytest.approx(0.1) and quad == pytest.approx(0.01)

    def test_zero_delta(self):
        assert rc.error_bounds(3.0, 5.0, 0.0) == (0.0, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(L=st.floats(1e-3, 1e3), H=st.floats(0, 1e3), delta=st.floats(1e-6, 2.0))
    def test_quadratic_tighter_iff_small_delta(self, L, H, delta):
        naive, quad = rc.error_bounds(L, H, delta)
        threshold = 2 * L / (L + H)
        if abs(delta - threshold) > 1e-9 * threshold:
            assert (quad < naive) == (delta < threshold)

    def test_padded_estimate_uses_min(self):
        est = rc.estimate_hulls(INTEGRATOR, geo.Ball([0, 0], 1), np.zeros(2),
                                geo.sample_sphere(2, 8, "uniform-angle"), rc.TimeGrid(0, 1, 2))
        out = rc.padded_estimate(est, np.array([0, 1.0, 2.0]), np.array([0, 1.0, 30.0]), 0.5)
        np.testing.assert_allclose(out.eps, [0, 0.25, 1.0])
