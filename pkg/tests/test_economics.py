import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from greenhouse_rlmpc import economics as eco
from greenhouse_rlmpc import plant

P = eco.PriceTable()
B = eco.BoundTable()
# an in-bounds state: 537 ppm, 15 C, 63 % RH
X_OK = np.array([0.01, 0.001, 15.0, 0.008])


def test_table_defaults():
    assert (P.c1, P.c3, P.r) == (1.906e-1, 1.281e-1, 20.93)
    assert (P.lam2, P.lam3, P.lam4) == (5e-5, 5e-3, 7e-4)
    np.testing.assert_array_equal(B.du_max, B.u_max / 10)
    np.testing.assert_array_equal(B.du_max, [0.12, 0.75, 15.0])


def test_price_must_be_positive():
    with pytest.raises(ValueError):
        eco.PriceTable(r=0.0)


class TestPenalty:
    def test_inside(self):
        assert eco.penalty(15.0, 3, B, P) == 0.0

    def test_temperature_above(self):
        assert eco.penalty(22.0, 3, B, P) == pytest.approx(1.0e-2, rel=1e-12)

    def test_co2_below(self):
        assert eco.penalty(400.0, 2, B, P) == pytest.approx(5e-3, rel=1e-12)

    def test_bad_index(self):
        with pytest.raises(ValueError):
            eco.penalty(1.0, 1, B, P)

    @given(st.sampled_from([2, 3, 4]), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
    def test_nonnegative_and_lipschitz(self, i, a, b):
        ga, gb = eco.penalty(a, i, B, P), eco.penalty(b, i, B, P)
        lam = P.lambdas[i - 2]
        assert ga >= 0 and gb >= 0
        assert abs(ga - gb) <= lam * abs(a - b) * (1 + 1e-12) + 1e-15

    @given(st.sampled_from([2, 3, 4]), st.floats(0, 1))
    def test_zero_on_band(self, i, frac):
        lo, hi = B.y_min[i - 2], B.y_max[i - 2]
        assert eco.penalty(lo + frac * (hi - lo), i, B, P) == 0.0

    def test_vectorized_matches_scalar(self, rng):
        ys = np.column_stack([np.zeros(50), rng.uniform(0, 2500, 50), rng.uniform(0, 35, 50), rng.uniform(0, 100, 50)])
        vec = eco.penalties(ys, B, P)
        for y, row in zip(ys, vec):
            assert row == pytest.approx([eco.penalty(y[i - 1], i, B, P) for i in (2, 3, 4)], rel=1e-15)


class TestStageCost:
    def test_idle(self):
        assert eco.stage_cost_economic(X_OK, X_OK, np.zeros(3), P) == 0.0

    def test_growth_revenue(self):
        x = X_OK.copy()
        x[0] += 1e-4
        assert eco.stage_cost_economic(X_OK, x, np.zeros(3), P) == pytest.approx(-2.093e-3, rel=1e-9)

    def test_input_cost(self):
        u = np.array([1.2, 0.0, 150.0])
        expected = (0.1906 * 1.2 + 0.1281 * 150) * 1800
        assert eco.stage_cost_economic(X_OK, X_OK, u, P) == pytest.approx(expected, rel=1e-14)

    def test_unit_scaling(self):
        prices = eco.PriceTable(**eco.PHYSICAL_UNITS)
        u = np.array([1.2, 0.0, 150.0])
        expected = (0.1906e-6 * 1.2 + 0.1281 / 3.6e6 * 150) * 1800
        assert eco.stage_cost_economic(X_OK, X_OK, u, prices) == pytest.approx(expected, rel=1e-14)

    def test_total_in_bounds(self):
        c = eco.stage_cost_total(X_OK, X_OK, np.zeros(3), P, B)
        assert c == (0.0, 0.0, 0.0)

    def test_total_penalty_only(self):
        hot = X_OK.copy()
        hot[2] = 22.0
        # keep CO2 and humidity inside their bands at 22 C
        hot[1] = plant.ppm_to_co2_density(800, 22.0)
        hot[3] = plant.rh_to_vapour_density(60, 22.0)
        prev = hot.copy()
        c = eco.stage_cost_total(prev, hot, np.zeros(3), P, B)
        assert c.total == pytest.approx(1.0e-2, rel=1e-12)
        assert c.total == c.economic + c.penalty
        assert eco.reward(c) == -c.total


class TestEpi:
    def test_no_inputs(self):
        states = np.tile(X_OK, (11, 1))
        states[-1, 0] = 0.2
        assert eco.epi(states, np.zeros((10, 3)), P) == pytest.approx(20.93 * 0.2)

    def test_constant_heating_closed_form(self):
        n = 1920
        states = np.tile(X_OK, (n + 1, 1))
        states[:, 0] = 0.0
        inputs = np.tile([0.0, 0.0, 150.0], (n, 1))
        assert eco.epi(states, inputs, P) == pytest.approx(-0.1281 * 150 * 1800 * 1920, rel=1e-12)

    def test_telescoping_identity_on_simulation(self, rng, weather):
        n = 1920
        x = plant.X0.copy()
        states, inputs, econ = [x], [], []
        u = plant.U0.copy()
        for k in range(n):
            u = np.clip(u + rng.uniform(-1, 1, 3) * B.du_max, B.u_min, B.u_max)
            xn = plant.rk4_step(x, u, weather[k])
            econ.append(eco.stage_cost_economic(x, xn, u, P))
            states.append(xn)
            inputs.append(u)
            x = xn
        e = eco.epi(states, inputs, P)
        assert abs(sum(econ) + e - P.r * plant.X0[0]) <= 1e-9 * max(1.0, abs(e))

    def test_fencepost(self):
        with pytest.raises(ValueError):
            eco.epi(np.zeros((3, 4)), np.zeros((3, 3)), P)


def test_trajectory_costs_match_scalar(rng, weather):
    x = plant.X0.copy()
    states, inputs = [x], []
    for k in range(50):
        u = rng.uniform(0, 1, 3) * B.u_max
        x = plant.rk4_step(x, u, weather[k])
        states.append(x)
        inputs.append(u)
    econ, pen = eco.trajectory_costs(states, inputs, P, B)
    for k in range(50):
        c = eco.stage_cost_total(states[k], states[k + 1], inputs[k], P, B)
        assert econ[k] == pytest.approx(c.economic, rel=1e-12)
        assert pen[k] == pytest.approx(c.penalty, rel=1e-12, abs=1e-18)


def test_humidity_tightening():
    tight = B.with_humidity_max(78.0)
    assert tight.y_max[2] == 78.0 and B.y_max[2] == 80.0
