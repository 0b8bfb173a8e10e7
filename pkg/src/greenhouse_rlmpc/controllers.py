"""Closed-loop controllers and episode execution.

``rl`` applies the deterministic policy; ``mpc`` solves the economic OCP
warm-started from its shifted previous plan; ``rlmpc`` adds the learned
terminal cost, the policy-centred terminal region and the policy warm start;
``rlmpc-vfo`` is ``rlmpc`` without the terminal region.
"""

from __future__ import annotations

import csv
import json
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nlp, plant
from .economics import BoundTable, PriceTable, epi
from .env import GreenhouseEnv, NonFiniteStateError
from .nlp import NlpSolution, OcpSpec, SolverOptions
from .plant import DT, DisturbanceSeries
from .sac import SacAgent, action_to_input, make_observation
from .terminal import ModelSanityError, TerminalCostFn, initial_ingredients, next_ingredients

KINDS = ("rl", "mpc", "rlmpc", "rlmpc-vfo")


@dataclass
class ControllerConfig:
    kind: str
    horizon: int = 0
    eps: float = 0.1
    humidity_max: float = 80.0  # used inside the controller only
    solver: SolverOptions = field(default_factory=SolverOptions)
    agent_path: str | None = None
    terminal_path: str | None = None
    stochastic_policy: bool = False  # rl kind: sample actions instead of the mean

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "rl" and self.horizon < 1:
            raise ValueError(f"{self.kind} needs a horizon of at least one step")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")

    @property
    def uses_policy(self) -> bool:
        return self.kind != "mpc"


@dataclass
class StepInfo:
    status: str = ""
    iterations: int = 0
    objective: float = float("nan")
    stationarity: float = float("nan")
    terminal_violation: float = 0.0
    warm_inputs: np.ndarray | None = None
    solution: NlpSolution | None = None
    region: object = None


class RlController:
    kind = "rl"

    def __init__(self, agent: SacAgent, bounds: BoundTable, stochastic: bool = False, seed: int = 0):
        self.agent = agent
        self.bounds = bounds
        self.stochastic = stochastic
        self.seed = seed
        self.reset()

    def reset(self):
        self._rng = np.random.default_rng(self.seed)

    def step(self, x, k: int, u_prev, weather: DisturbanceSeries):
        if not self.stochastic:
            return self.agent.policy_input(x, u_prev, weather[k], k, self.bounds), StepInfo(status="policy")
        obs = make_observation(x, u_prev, weather[k], k, self.agent.scaler)
        a = self.agent.act(obs, deterministic=False, rng=self._rng)
        return action_to_input(a, u_prev, self.bounds), StepInfo(status="policy")


class MpcController:
    """Receding-horizon controller for the ``mpc``, ``rlmpc`` and ``rlmpc-vfo`` kinds.

    Prediction always uses the nominal parameters and the controller-side
    bounds (humidity possibly tightened).
    """

    def __init__(self, cfg: ControllerConfig, prices: PriceTable, bounds: BoundTable,
                 agent: SacAgent | None = None, terminal_cost: TerminalCostFn | None = None,
                 p=plant.NOMINAL_PARAMS, dt: float = DT):
        if cfg.kind == "rl":
            raise ValueError("use RlController for the rl kind")
        if cfg.uses_policy and (agent is None or terminal_cost is None):
            raise ValueError(f"{cfg.kind} needs a policy and a terminal cost")
        self.cfg = cfg
        self.prices = prices
        self.bounds = bounds.with_humidity_max(cfg.humidity_max)
        self.agent = agent
        self.terminal_cost = terminal_cost
        self.p = np.asarray(p, dtype=float)
        self.dt = dt
        self.reset()

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def reset(self):
        self._prev: NlpSolution | None = None
        self._prev_k = -1

    def _shifted(self, u_prev):
        n = self.cfg.horizon
        if self._prev is None:
            warm = np.tile(np.asarray(u_prev, dtype=float), (n, 1))
        else:
            warm = np.vstack([self._prev.inputs[1:], self._prev.inputs[-1:]])
        return None, warm, nlp.inputs_to_increments(warm, u_prev, self.bounds)

    def _warm_start(self, x, k: int, u_prev, weather):
        n = self.cfg.horizon
        if self.cfg.kind == "mpc":
            return self._shifted(u_prev)
        if self._prev is None:
            ing = initial_ingredients(self.agent, x, u_prev, weather.values[k:], n, self.cfg.eps, self.p,
                                      self.bounds, self.dt)
        else:
            ing = next_ingredients(self._prev, self.agent, self._prev_k, weather, self.cfg.eps, self.p,
                                   self.bounds, self.dt)
        return ing.region, ing.warm_inputs, ing.warm_increments

    def step(self, x, k: int, u_prev, weather: DisturbanceSeries):
        n = self.cfg.horizon
        prefix = ""
        try:
            region, warm_inputs, guess = self._warm_start(x, k, u_prev, weather)
        except ModelSanityError:
            # policy prediction left the physical domain: drop the region this step
            region, warm_inputs, guess = self._shifted(u_prev)
            prefix = "no-region:"
        tc = self.terminal_cost.value_and_grad if self.cfg.uses_policy else None
        spec = OcpSpec(n, x, u_prev, weather.window(k, n + 1), self.p, self.bounds, self.prices, k0=k,
                       terminal_cost=tc, terminal_region=region if self.cfg.kind == "rlmpc" else None, dt=self.dt)
        problem = nlp.transcribe(spec, self.cfg.solver.kappa, self.cfg.solver.penalty_smoothing)
        try:
            sol = nlp.solve(problem, guess.reshape(-1), self.cfg.solver)
        except (FloatingPointError, ValueError) as exc:
            # hold the previous input, which is always feasible
            self._prev = None
            return np.asarray(u_prev, dtype=float).copy(), StepInfo(status=f"fallback:{type(exc).__name__}",
                                                                    warm_inputs=warm_inputs)
        self._prev, self._prev_k = sol, k
        info = StepInfo(prefix + sol.status, sol.iterations, sol.objective, sol.stationarity,
                        sol.terminal_violation, warm_inputs, sol, region)
        return sol.inputs[0].copy(), info


def build_controller(cfg: ControllerConfig, prices: PriceTable, bounds: BoundTable, agent: SacAgent | None = None,
                     terminal_cost: TerminalCostFn | None = None, seed: int = 0):
    if cfg.kind == "rl":
        if agent is None:
            raise ValueError("rl controller needs a policy")
        return RlController(agent, bounds, cfg.stochastic_policy, seed)
    return MpcController(cfg, prices, bounds, agent, terminal_cost)


# ---------------------------------------------------------------------------
# episodes

CSV_COLUMNS = ["k", "x1", "x2", "x3", "x4", "y2", "y3", "y4", "u1", "u2", "u3",
               "cost_econ", "cost_pen", "reward", "status", "iters"]


@dataclass
class EpisodeResult:
    """One closed-loop season.

    Row ``k`` of the step log holds the input ``u(k)`` applied at step ``k``,
    the successor state ``x(k+1)`` with its outputs, and the transition costs.
    """

    kind: str
    horizon: int
    seed: int
    x0: np.ndarray
    states: np.ndarray  # (t_f, 4): x(1..t_f)
    outputs: np.ndarray  # (t_f, 3): y2..y4 of x(1..t_f)
    inputs: np.ndarray  # (t_f, 3)
    cost_econ: np.ndarray
    cost_pen: np.ndarray
    rewards: np.ndarray
    status: list
    iterations: np.ndarray
    epi: float
    cum_reward: float
    wall_clock: float
    params: np.ndarray
    infos: list = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "horizon": self.horizon,
            "seed": self.seed,
            "steps": len(self.inputs),
            "epi": self.epi,
            "cum_reward": self.cum_reward,
            "econ_cost": float(np.sum(self.cost_econ)),
            "penalty_cost": float(np.sum(self.cost_pen)),
            "wall_clock_s": self.wall_clock,
            "status_counts": dict(Counter(self.status)),
            "mean_iterations": float(np.mean(self.iterations)) if len(self.iterations) else 0.0,
            "x0": self.x0.tolist(),
            "x_final": (self.states[-1] if len(self.states) else self.x0).tolist(),
            "params": self.params.tolist(),
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for k in range(len(self.inputs)):
                w.writerow([k, *map(repr, map(float, self.states[k])), *map(repr, map(float, self.outputs[k])),
                            *map(repr, map(float, self.inputs[k])), repr(float(self.cost_econ[k])),
                            repr(float(self.cost_pen[k])), repr(float(self.rewards[k])), self.status[k],
                            int(self.iterations[k])])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2))


class EpisodeAbortedError(RuntimeError):
    """A non-finite state ended the season early; ``partial`` holds the log so far."""

    def __init__(self, message: str, partial: EpisodeResult):
        super().__init__(message)
        self.partial = partial


def read_episode_csv(path: str | Path) -> dict:
    """Columns of a per-step log as arrays (``status`` stays a list of strings)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS if c != "status"}
    out["status"] = [r["status"] for r in rows]
    return out


def run_episode(controller, env: GreenhouseEnv, seed: int = 0, keep_infos: bool = False) -> EpisodeResult:
    """Run one season; ``seed`` drives the parameter draw of a stochastic environment."""
    rng = np.random.default_rng(seed)
    env.reset(rng)
    controller.reset()
    x0 = env.x.copy()
    t0 = time.perf_counter()
    states, inputs, econ, pen, rewards, status, iters, infos = [], [], [], [], [], [], [], []
    aborted = None
    while not env.done:
        u, info = controller.step(env.x, env.k, env.u_prev, env.weather)
        try:
            res = env.step(u)
        except NonFiniteStateError as exc:
            aborted = exc
            break
        states.append(res.x)
        inputs.append(res.u)
        econ.append(res.cost.economic)
        pen.append(res.cost.penalty)
        rewards.append(res.reward)
        status.append(info.status)
        iters.append(info.iterations)
        if keep_infos:
            infos.append(info)
    wall = time.perf_counter() - t0
    states = np.array(states).reshape(-1, 4)
    inputs = np.array(inputs).reshape(-1, 3)
    rewards = np.array(rewards)
    horizon = getattr(getattr(controller, "cfg", None), "horizon", 0)
    result = EpisodeResult(
        kind=controller.kind, horizon=horizon, seed=seed, x0=x0, states=states,
        outputs=np.asarray(plant.outputs(states))[:, 1:4] if len(states) else np.zeros((0, 3)),
        inputs=inputs, cost_econ=np.array(econ), cost_pen=np.array(pen), rewards=rewards,
        status=status, iterations=np.array(iters), epi=epi(np.vstack([x0, states]), inputs, env.prices, env.dt),
        cum_reward=float(np.sum(rewards)), wall_clock=wall, params=np.asarray(env.p).copy(), infos=infos,
    )
    if aborted is not None:
        raise EpisodeAbortedError(str(aborted), result) from aborted
    return result
