import itertools

import numpy as np
import pytest

from greenhouse_rlmpc import economics as eco
from greenhouse_rlmpc import nlp, plant

PR = eco.PriceTable(**eco.PHYSICAL_UNITS)
B = eco.BoundTable()


def make_spec(weather, n, x0=plant.X0, u_prev=plant.U0, k0=0, **kw):
    return nlp.OcpSpec(n, x0, u_prev, weather.values[k0:k0 + n + 1], prices=PR, k0=k0, **kw)


def exact_cost(spec, inputs):
    states = np.vstack([spec.x0, plant.simulate(spec.x0, inputs, spec.disturbances, spec.p)])
    econ, pen = eco.trajectory_costs(states, inputs, spec.prices, spec.bounds)
    return float(econ.sum() + pen.sum())


def fd_grad(f, a, h=1e-6):
    return np.array([(f(a + e) - f(a - e)) / (2 * h) for e in np.eye(len(a)) * h])


class TestIncrementMap:
    def test_full_increment_from_zero(self):
        u = nlp.smooth_increment_map(np.ones(3), np.zeros(3), B)
        np.testing.assert_allclose(u[0], [0.12, 0.75, 15.0], rtol=1e-15)

    def test_clamped_at_max(self):
        u = nlp.smooth_increment_map(np.ones(3), B.u_max, B)
        np.testing.assert_array_equal(u[0], B.u_max)

    def test_zero_is_hold(self):
        u = nlp.smooth_increment_map(np.zeros((5, 3)), plant.U0, B)
        np.testing.assert_array_equal(u, np.tile(plant.U0, (5, 1)))

    def test_soft_clamp_close_to_hard(self):
        # dense scan of a in [-1, 1] from previous inputs spread over the box
        a = np.linspace(-1, 1, 401)
        worst = 0.0
        for frac in np.linspace(0, 1, 41):
            prev = frac * B.u_max
            for ai in a:
                hard = nlp.smooth_increment_map(np.full(3, ai), prev, B)
                soft = nlp.smooth_increment_map(np.full(3, ai), prev, B, kappa=1000.0)
                worst = max(worst, float(np.max(np.abs(hard - soft) / B.u_max)))
        assert worst < 1e-3
        assert worst == pytest.approx(np.log(2) / 1000.0, rel=1e-6)

    def test_increments_roundtrip(self, rng):
        a = rng.uniform(-1, 1, (6, 3))
        u = nlp.smooth_increment_map(a, plant.U0, B)
        back = nlp.smooth_increment_map(nlp.inputs_to_increments(u, plant.U0, B), plant.U0, B)
        np.testing.assert_allclose(back, u, rtol=1e-12, atol=1e-12)


class TestSpec:
    def test_short_window(self, weather):
        with pytest.raises(ValueError):
            nlp.OcpSpec(3, plant.X0, plant.U0, weather.values[:3])

    def test_input_outside_box(self, weather):
        with pytest.raises(ValueError):
            nlp.OcpSpec(2, plant.X0, np.array([2.0, 0, 0]), weather.values[:3])

    def test_region_needs_nonnegative_center(self):
        with pytest.raises(ValueError):
            nlp.TerminalRegion(np.array([1.0, -1.0, 1.0, 1.0]), 0.1)

    def test_region_box(self):
        r = nlp.TerminalRegion(np.array([1.0, 2.0, 10.0, 0.0]), 0.1)
        assert (r.lower <= r.upper).all()
        assert r.violation(r.center) == 0.0
        assert r.violation(np.array([1.2, 2.0, 10.0, 0.0])) == pytest.approx(0.1)


class TestTranscription:
    def test_empty_horizon(self, weather):
        t = nlp.transcribe(make_spec(weather, 0))
        assert t.n == 0
        assert t.objective(np.zeros(0)) == 0.0
        sol = nlp.solve(t, np.zeros(0))
        assert sol.inputs.shape == (0, 3) and sol.status == nlp.CONVERGED

    def test_empty_horizon_with_terminal_cost(self, weather):
        spec = make_spec(weather, 0, terminal_cost=lambda x1, k: (-3.0 * x1, -3.0))
        assert nlp.transcribe(spec).objective(np.zeros(0)) == -3.0 * plant.X0[0]

    def test_hold_objective(self, weather):
        spec = make_spec(weather, 6)
        t = nlp.transcribe(spec)
        hold = np.tile(plant.U0, (6, 1))
        assert t.objective(np.zeros(18), hard=True) == pytest.approx(exact_cost(spec, hold), rel=1e-12)

    def test_hard_objective_matches_economics(self, weather, rng):
        spec = make_spec(weather, 8, k0=20)
        t = nlp.transcribe(spec)
        for _ in range(5):
            a = rng.uniform(-1, 1, 24)
            u = nlp.smooth_increment_map(a, spec.u_prev, B)
            assert t.objective(a, hard=True) == pytest.approx(exact_cost(spec, u), rel=1e-12)

    def test_smoothing_error_bound(self, weather, rng):
        # exact clamp, smoothed penalties only: excess is within lambda * width * ln 2 per output and step
        spec = make_spec(weather, 8, k0=30)
        smooth = nlp.transcribe(spec, kappa=None)
        bound = 8 * np.log(2) * float(PR.lambdas @ (1e-3 * (B.y_max - B.y_min))) * (1 + 1e-9)
        for _ in range(20):
            a = rng.uniform(-1, 1, 24)
            gap = smooth.objective(a) - smooth.objective(a, hard=True)
            assert -1e-15 <= gap <= bound

    @pytest.mark.parametrize("seed", range(4))
    def test_gradient_vs_fd(self, weather, seed):
        rng = np.random.default_rng(seed)
        k0 = int(rng.integers(0, 1800))
        x0 = plant.X0 * rng.uniform(0.5, 1.5, 4) + np.array([0.05 * rng.random(), 0, 0, 0])
        u_prev = rng.uniform(0, 1, 3) * B.u_max
        region = nlp.TerminalRegion(x0, 0.05)
        spec = make_spec(weather, 4, x0=x0, u_prev=u_prev, k0=k0,
                         terminal_cost=lambda x1, k: (-40.0 * x1 ** 2, -80.0 * x1))
        t = nlp.transcribe(spec)
        a = rng.uniform(-0.9, 0.9, 12)

        def extra(xn):
            c = region.constraints(xn)
            return float(np.maximum(c, 0) @ np.maximum(c, 0)), 2 * (
                np.maximum(c[:4], 0) / region.scale - np.maximum(c[4:], 0) / region.scale)

        for term in (None, extra):
            f, g = t.value_and_grad(a, term)
            fd = fd_grad(lambda v: t.value_and_grad(v, term)[0], a)
            assert np.max(np.abs(g - fd)) <= 1e-4 * np.max(np.abs(fd))


class TestBoxSolver:
    def test_projection_stub(self):
        r = nlp.minimize_box(lambda u: ((u[0] - 3) ** 2, np.array([2 * (u[0] - 3)])),
                             np.array([0.5]), 0.0, 1.2)
        assert r.status == nlp.CONVERGED
        assert r.x[0] == 1.2

    def test_unconstrained_rosenbrock(self):
        def f(x):
            return ((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2,
                    np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)]))

        r = nlp.minimize_box(f, np.array([-1.2, 1.0]), -5, 5, max_iter=500, tol=1e-10)
        assert r.status == nlp.CONVERGED
        np.testing.assert_allclose(r.x, [1, 1], atol=1e-6)

    def test_toy_linear_ocp_vs_grid(self):
        # x+ = 0.8 x + 0.5 u, increments in [-1, 1] with du = 1; three decisions
        du, u_prev, x0 = 1.0, 0.2, 1.0

        def cost(a):
            a = np.atleast_2d(a)
            u = u_prev + np.cumsum(a * du, axis=-1)
            x, total = x0, 0.0
            for k in range(a.shape[-1]):
                x = 0.8 * x + 0.5 * u[:, k]
                total = total + (x - 2.0) ** 2 + 0.3 * u[:, k] ** 2
            return total

        def fun(a):
            u = u_prev + np.cumsum(a * du)
            xs, x = [], x0
            for k in range(3):
                x = 0.8 * x + 0.5 * u[k]
                xs.append(x)
            # adjoint by hand
            lam, mu, g = 0.0, np.zeros(3), np.zeros(3)
            for k in range(2, -1, -1):
                lam = 2 * (xs[k] - 2.0) + 0.8 * lam
                mu[k] = 0.5 * lam + 0.6 * u[k]
            g = np.cumsum(mu[::-1])[::-1] * du
            return float(cost(a)[0]), g

        grid = np.linspace(-1, 1, 101)
        pts = np.array(list(itertools.product(grid, repeat=3)))
        best = cost(pts).min()
        r = nlp.minimize_box(fun, np.zeros(3), -1, 1)
        np.testing.assert_allclose(fun(r.x)[1], fd_grad(lambda v: cost(v)[0], r.x), atol=1e-7)
        assert r.status == nlp.CONVERGED
        assert abs(r.f - best) <= 1e-3
        assert r.f <= best + 1e-12

    def test_never_worse_than_start(self):
        calls = []

        def f(x):
            calls.append(1)
            return float(np.sin(5 * x[0]) + x[0] ** 2), np.array([5 * np.cos(5 * x[0]) + 2 * x[0]])

        x0 = np.array([0.3])
        r = nlp.minimize_box(f, x0, -1, 1)
        assert r.f <= f(x0)[0]


class TestGreenhouseSolve:
    def test_initial_conditions_converge(self, weather):
        spec = make_spec(weather, 2)
        sol = nlp.solve(nlp.transcribe(spec), np.zeros(6))
        assert sol.status == nlp.CONVERGED
        assert sol.stationarity < 1e-6

    def test_feasible_consistent_monotone(self, weather):
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(1, 5))
            k0 = int(rng.integers(0, 1900))
            x0 = plant.X0 * rng.uniform(0.7, 1.3, 4) + np.array([0.2 * rng.random(), 0, 0, 0])
            u_prev = rng.uniform(0, 1, 3) * B.u_max
            spec = make_spec(weather, n, x0=x0, u_prev=u_prev, k0=k0)
            t = nlp.transcribe(spec)
            guess = rng.uniform(-1, 1, 3 * n)
            f0 = t.objective(guess)
            sol = nlp.solve(t, guess, nlp.SolverOptions(max_iter=60))
            assert sol.objective <= f0 + 1e-12
            u = sol.inputs
            assert (u >= B.u_min).all() and (u <= B.u_max).all()
            steps = np.abs(np.diff(np.vstack([u_prev, u]), axis=0))
            assert (steps <= B.du_max * (1 + 1e-12)).all()
            again = plant.simulate(x0, u, spec.disturbances, spec.p)
            assert again.tobytes() == sol.states.tobytes()

    def test_terminal_region_reached(self, weather):
        held = plant.simulate(plant.X0, np.tile([0.3, 1.0, 60.0], (4, 1)), weather.values[:4])
        region = nlp.TerminalRegion(held[-1], 0.01)
        spec = make_spec(weather, 4, terminal_region=region)
        sol = nlp.solve(nlp.transcribe(spec), np.zeros(12))
        assert sol.status == nlp.CONVERGED
        assert sol.terminal_violation <= 1e-4
        assert region.violation(sol.states[-1]) == sol.terminal_violation

    def test_unreachable_region(self, weather):
        far = plant.X0 * np.array([5.0, 1.0, 3.0, 1.0])
        spec = make_spec(weather, 2, terminal_region=nlp.TerminalRegion(far, 0.001))
        sol = nlp.solve(nlp.transcribe(spec), np.zeros(6), nlp.SolverOptions(max_outer=4))
        assert sol.status == nlp.TERMINAL_INFEASIBLE
        assert sol.terminal_violation > 1e-4
        assert sol.inputs.shape == (2, 3)
