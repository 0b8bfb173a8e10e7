import numpy as np
import pytest

from greenhouse_rlmpc import economics as eco
from greenhouse_rlmpc import nlp, plant, sac, terminal
from greenhouse_rlmpc.env import GreenhouseEnv

PR = eco.PriceTable(**eco.PHYSICAL_UNITS)
B = eco.BoundTable()
TF = 96


@pytest.fixture(scope="module")
def env(weather):
    return GreenhouseEnv(weather, PR, t_f=TF)


@pytest.fixture(scope="module")
def agent():
    scaler = sac.ObservationScaler.for_bounds(B, TF)
    return sac.SacAgent(sac.SacConfig(hidden=(32, 32)), scaler, seed=3)


@pytest.fixture(scope="module")
def band(agent, env):
    return terminal.nominal_trajectory(agent, env)


def env_return(agent, env, k, x, u_prev):
    """Cost-to-go replayed through the scalar environment path."""
    env.reset()
    env.x, env.u_prev, env.k = x.copy(), u_prev.copy(), int(k)
    total = 0.0
    while not env.done:
        u = agent.policy_input(env.x, env.u_prev, env.disturbance(), env.k, env.bounds)
        total -= env.step(u).reward
    return total


class TestNominal:
    def test_repeatable_and_length(self, agent, env, band):
        again = terminal.nominal_trajectory(agent, env)
        assert again.states.tobytes() == band.states.tobytes()
        assert band.states.shape == (TF + 1, 4) and band.inputs.shape == (TF, 3)

    def test_zero_sigma(self, band):
        flat = terminal.NominalBand(band.states, band.inputs, 0.0)
        np.testing.assert_array_equal(flat.lower(7), band.states[7])
        np.testing.assert_array_equal(flat.upper(7), band.states[7])

    def test_input_before(self, band):
        np.testing.assert_array_equal(band.input_before(0), plant.U0)
        np.testing.assert_array_equal(band.input_before(5), band.inputs[4])
        np.testing.assert_array_equal(band.input_before(np.array([0, 3]))[1], band.inputs[2])


@pytest.fixture(scope="module")
def data(agent, band, env):
    return terminal.sample_rollouts(agent, band, env, n=200, seed=5)


class TestRollouts:
    def test_terminal_time_is_zero(self, agent, env):
        j = terminal.policy_returns(agent, [TF], plant.X0[None], plant.U0[None], env.weather, env.nominal_p,
                                    PR, B, TF)
        assert j[0] == 0.0

    def test_states_in_band(self, data, band):
        lo, hi = band.lower(data.k), band.upper(data.k)
        assert ((data.states >= lo) & (data.states <= hi)).all()
        assert ((data.k >= 0) & (data.k <= TF)).all()

    def test_returns_match_resimulation(self, data, agent, band, env):
        for i in range(0, 200, 20):
            single = terminal.policy_returns(agent, data.k[i:i + 1], data.states[i:i + 1],
                                             band.input_before(data.k[i:i + 1]), env.weather, env.nominal_p,
                                             PR, B, TF)
            assert single[0] == data.returns[i]
            oracle = env_return(agent, GreenhouseEnv(env.weather, PR, t_f=TF), data.k[i], data.states[i],
                                band.input_before(data.k[i]))
            assert data.returns[i] == pytest.approx(oracle, rel=1e-12, abs=1e-15)

    def test_deterministic(self, data, agent, band, env):
        again = terminal.sample_rollouts(agent, band, env, n=200, seed=5)
        assert again.returns.tobytes() == data.returns.tobytes()
        assert again.k.tobytes() == data.k.tobytes()

    def test_split(self, data):
        assert len(data.train_idx) == 160 and len(data.val_idx) == 40
        assert set(data.train_idx).isdisjoint(data.val_idx)
        assert sorted([*data.train_idx, *data.val_idx]) == list(range(200))

    def test_csv_roundtrip(self, data, tmp_path):
        path = tmp_path / "dataset.csv"
        data.write_csv(path)
        assert path.read_text().splitlines()[0] == "i,k,x1,x2,x3,x4,J"
        back = terminal.ApproximatorDataset.read_csv(path)
        assert back.returns.tobytes() == data.returns.tobytes()
        assert back.states.tobytes() == data.states.tobytes()
        np.testing.assert_array_equal(back.val_idx, data.val_idx)


def synthetic_dataset(target, n=1000, seed=0):
    rng = np.random.default_rng(seed)
    k = rng.integers(0, plant.T_F + 1, n)
    states = np.column_stack([rng.uniform(0.0, 0.3, n), np.zeros((n, 3))])
    tr, va = terminal.split_indices(n, rng)
    return terminal.ApproximatorDataset(k, states, target(states[:, 0], k), tr, va)


class TestFit:
    def test_constant_target(self):
        ds = synthetic_dataset(lambda x1, k: np.full_like(x1, -3.7))
        fn = terminal.fit_terminal_cost(ds, terminal.FitConfig(max_epochs=300))
        pred = fn(ds.states[:, 0], ds.k)
        assert np.max(np.abs(pred + 3.7)) <= 0.01 * 3.7

    def test_linear_target(self):
        ds = synthetic_dataset(lambda x1, k: 2.0 * x1 - 0.001 * k)
        fn = terminal.fit_terminal_cost(ds)
        va = ds.val_idx
        rmse = np.sqrt(np.mean((fn(ds.states[va, 0], ds.k[va]) - ds.returns[va]) ** 2))
        assert rmse <= 0.02 * np.ptp(ds.returns)

    def test_gradient_and_persistence(self, tmp_path):
        ds = synthetic_dataset(lambda x1, k: np.sin(10 * x1) - 0.001 * k)
        fn = terminal.fit_terminal_cost(ds, terminal.FitConfig(max_epochs=50))
        for x1, k in [(0.05, 10), (0.2, 1500), (0.31, 1920)]:
            v, g = fn.value_and_grad(x1, k)
            assert v == pytest.approx(fn(x1, k), rel=1e-13)
            fd = (fn(x1 + 1e-6, k) - fn(x1 - 1e-6, k)) / 2e-6
            assert g == pytest.approx(fd, rel=1e-6, abs=1e-9)
        assert fn(0.1, 5000) == fn(0.1, plant.T_F)
        fn.save(tmp_path / "tc")
        back = terminal.TerminalCostFn.load(tmp_path / "tc")
        assert back(0.17, 400) == fn(0.17, 400)
        assert back.meta == fn.meta

    def test_real_dataset_no_gross_overfit(self, agent, band, env):
        data = terminal.sample_rollouts(agent, band, env, n=1000, seed=1)
        fn = terminal.fit_terminal_cost(data, terminal.FitConfig(max_epochs=1000), t_f=TF)
        assert fn.meta["val_loss"] <= 1.5 * fn.meta["train_loss"]


class TestIngredients:
    def test_initial(self, agent, env):
        ing = terminal.initial_ingredients(agent, plant.X0, plant.U0, env.weather, 4, eps=0.1)
        r = ing.region
        np.testing.assert_allclose((r.lower + r.upper) / 2, r.center, rtol=1e-15)
        # re-simulate the full N_p + 1 policy inputs through the plant
        x, u, inputs = plant.X0, plant.U0, []
        for k in range(5):
            u = agent.policy_input(x, u, env.weather[k], k, B)
            inputs.append(u)
            x = plant.rk4_step(x, u, env.weather[k])
        assert plant.simulate(plant.X0, inputs, env.weather.values[:5])[-1].tobytes() == r.center.tobytes()
        np.testing.assert_array_equal(ing.warm_inputs, np.array(inputs[1:]))
        assert (np.abs(ing.warm_increments) <= 1).all() and ing.warm_increments.shape == (4, 3)

    def test_zero_eps(self, agent, env):
        r = terminal.initial_ingredients(agent, plant.X0, plant.U0, env.weather, 2, eps=0.0).region
        np.testing.assert_array_equal(r.lower, r.upper)

    def test_next(self, agent, env):
        spec = nlp.OcpSpec(4, plant.X0, plant.U0, env.weather.values[:5], prices=PR)
        sol = nlp.solve(nlp.transcribe(spec), np.zeros(12), nlp.SolverOptions(max_iter=20))
        ing = terminal.next_ingredients(sol, agent, 0, env.weather, eps=0.1)
        assert ing.warm_inputs[:3].tobytes() == sol.inputs[1:].tobytes()
        u_new = ing.warm_inputs[-1]
        expected = plant.rk4_step(sol.states[-1], u_new, env.weather[4])
        assert ing.region.center.tobytes() == expected.tobytes()
        assert (np.abs(u_new - sol.inputs[-1]) <= B.du_max * (1 + 1e-12)).all()
        assert (np.abs(ing.warm_increments) <= 1).all()

    def test_negative_center_is_a_sanity_error(self):
        with pytest.raises(terminal.ModelSanityError):
            terminal._region(np.array([0.1, -1e-3, 10.0, 0.01]), 0.1)
