"""Policy-derived MPC ingredients: a learned terminal cost and terminal regions.

The terminal cost ``J~(x1, k)`` regresses the cost-to-go of the deterministic
policy, estimated from closed-loop rollouts that start from states drawn
around a nominal trajectory. The terminal region and warm start are built by
rolling the policy past the end of the horizon.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plant
from .autodiff_nn import Adam, Mlp, mse_loss
from .economics import BoundTable, PriceTable, transition_costs
from .env import GreenhouseEnv
from .nlp import NlpSolution, TerminalRegion, inputs_to_increments
from .plant import DT, T_F
from .sac import SacAgent, action_to_input, make_observation

log = logging.getLogger(__name__)


class ModelSanityError(ValueError):
    """A simulated state that should be nonnegative is not."""


@dataclass
class NominalBand:
    """Nominal trajectory ``x^n(0..t_f)`` with a relative spread ``sigma``."""

    states: np.ndarray  # (t_f + 1, 4)
    inputs: np.ndarray  # (t_f, 3)
    sigma: float = 0.5
    u0: np.ndarray = field(default_factory=lambda: plant.U0.copy())

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError("sigma must lie in [0, 1)")
        if len(self.states) != len(self.inputs) + 1:
            raise ValueError("need one more state than inputs")

    @property
    def t_f(self) -> int:
        return len(self.inputs)

    def lower(self, k):
        return self.states[k] * (1.0 - self.sigma)

    def upper(self, k):
        return self.states[k] * (1.0 + self.sigma)

    def input_before(self, k):
        """``u(k-1)`` on the nominal trajectory (the initial input at ``k = 0``)."""
        k = np.asarray(k)
        prev = self.inputs[np.maximum(k - 1, 0)]
        return np.where((k == 0)[..., None], self.u0, prev)


def nominal_trajectory(agent: SacAgent, env: GreenhouseEnv, sigma: float = 0.5) -> NominalBand:
    """Deterministic policy rollout from the initial conditions under nominal parameters."""
    x = np.asarray(env.x0, dtype=float).copy()
    u = np.asarray(env.u0, dtype=float).copy()
    states, inputs = [x], []
    for k in range(env.t_f):
        u = agent.policy_input(x, u, env.weather[k], k, env.bounds)
        x = plant.rk4_step(x, u, env.weather[k], env.nominal_p, env.dt)
        states.append(x)
        inputs.append(u)
    return NominalBand(np.array(states), np.array(inputs), sigma, np.asarray(env.u0, dtype=float).copy())


def policy_returns(agent: SacAgent, k_start, x_start, u_prev, weather, p, prices: PriceTable,
                   bounds: BoundTable, t_f: int = T_F, dt: float = DT) -> np.ndarray:
    """Cost-to-go of the deterministic policy from each ``(k, x, u_prev)`` row.

    Rollouts advance in lockstep; a row joins once the clock reaches its
    start time. Per-row arithmetic does not depend on the batch, so a single
    row gives exactly the value it has inside any batch.
    """
    k_start = np.asarray(k_start, dtype=int)
    x = np.array(x_start, dtype=float, ndmin=2)
    u = np.array(u_prev, dtype=float, ndmin=2)
    total = np.zeros(len(k_start))
    if len(k_start) == 0:
        return total
    scaler = agent.scaler
    for t in range(int(k_start.min()), t_f):
        rows = np.flatnonzero(k_start <= t)
        xs, us = x[rows], u[rows]
        d = np.broadcast_to(weather[t], (len(rows), 4))
        raw = np.hstack([xs, us, d, np.full((len(rows), 1), float(t))])
        a = agent.act(scaler.normalize(raw))
        un = action_to_input(a, us, bounds)
        xn = plant.rk4_step_batch(xs, un, weather[t], p, dt)
        econ, pen = transition_costs(xs, xn, un, prices, bounds, dt)
        total[rows] += econ + pen
        x[rows], u[rows] = xn, un
    return total


@dataclass
class ApproximatorDataset:
    k: np.ndarray  # (n,)
    states: np.ndarray  # (n, 4)
    returns: np.ndarray  # (n,)
    train_idx: np.ndarray
    val_idx: np.ndarray
    redraws: int = 0

    def __len__(self) -> int:
        return len(self.k)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "k", "x1", "x2", "x3", "x4", "J"])
            for i in range(len(self)):
                w.writerow([i, int(self.k[i]), *(repr(float(v)) for v in self.states[i]), repr(float(self.returns[i]))])
        split = {"train": self.train_idx.tolist(), "val": self.val_idx.tolist(), "redraws": self.redraws}
        Path(path).with_suffix(".split.json").write_text(json.dumps(split))

    @classmethod
    def read_csv(cls, path: str | Path) -> "ApproximatorDataset":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        k = np.array([int(r["k"]) for r in rows])
        states = np.array([[float(r[f"x{j}"]) for j in range(1, 5)] for r in rows])
        returns = np.array([float(r["J"]) for r in rows])
        split = json.loads(Path(path).with_suffix(".split.json").read_text())
        return cls(k, states, returns, np.array(split["train"], dtype=int), np.array(split["val"], dtype=int),
                   int(split.get("redraws", 0)))


def split_indices(n: int, rng: np.random.Generator, train_fraction: float = 0.8):
    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def sample_rollouts(agent: SacAgent, band: NominalBand, env: GreenhouseEnv, n: int = 1000, seed: int = 0,
                    max_rounds: int = 20) -> ApproximatorDataset:
    """Draw ``n`` start points around the band and record the policy's cost-to-go.

    Samples whose rollout produces a non-finite return are redrawn.
    """
    rng = np.random.default_rng(seed)
    t_f = band.t_f
    k = rng.integers(0, t_f + 1, n)
    states = rng.uniform(band.lower(k), band.upper(k))
    returns = np.full(n, np.nan)
    todo = np.arange(n)
    redraws = 0
    for _ in range(max_rounds):
        with np.errstate(all="ignore"):
            returns[todo] = policy_returns(agent, k[todo], states[todo], band.input_before(k[todo]), env.weather,
                                           env.nominal_p, env.prices, env.bounds, t_f, env.dt)
        todo = np.flatnonzero(~np.isfinite(returns))
        if len(todo) == 0:
            break
        redraws += len(todo)
        k[todo] = rng.integers(0, t_f + 1, len(todo))
        states[todo] = rng.uniform(band.lower(k[todo]), band.upper(k[todo]))
    else:
        raise FloatingPointError(f"{len(todo)} rollouts still non-finite after {max_rounds} rounds")
    if redraws:
        log.warning("redrew %d samples with non-finite returns", redraws)
    train_idx, val_idx = split_indices(n, rng)
    return ApproximatorDataset(k, states, returns, train_idx, val_idx, redraws)


# ---------------------------------------------------------------------------
# cost approximator


@dataclass
class FitConfig:
    hidden: tuple = (128, 128)
    lr: float = 1e-3
    batch_size: int = 1024
    max_epochs: int = 5000
    patience: int = 50
    seed: int = 0


class TerminalCostFn:
    """``J~(x1, k)`` on standardized inputs ``((x1 - m) / s, k / t_f)`` with a standardized target."""

    def __init__(self, net: Mlp, x1_mean: float, x1_std: float, t_f: int, j_mean: float, j_std: float,
                 meta: dict | None = None):
        self.net = net
        self.x1_mean, self.x1_std = float(x1_mean), float(x1_std)
        self.t_f = int(t_f)
        self.j_mean, self.j_std = float(j_mean), float(j_std)
        self.meta = dict(meta or {})

    def _inputs(self, x1, k):
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        k = np.minimum(np.atleast_1d(np.asarray(k, dtype=float)), self.t_f)
        k = np.broadcast_to(k, x1.shape)
        return np.column_stack([(x1 - self.x1_mean) / self.x1_std, k / self.t_f])

    def __call__(self, x1, k):
        out = self.net.predict(self._inputs(x1, k))[:, 0] * self.j_std + self.j_mean
        return out if np.ndim(x1) else float(out[0])

    def value_and_grad(self, x1: float, k: int):
        """Value and derivative with respect to ``x1`` (hand-written backward pass)."""
        h = self._inputs(x1, k)
        derivs = []
        for i, act in enumerate(self.net.activations):
            w, b = self.net.params[2 * i].data, self.net.params[2 * i + 1].data
            z = h @ w + b
            if act == "tanh":
                h = np.tanh(z)
                derivs.append((w, 1.0 - h * h))
            elif act == "relu":
                h = np.maximum(z, 0.0)
                derivs.append((w, (z > 0).astype(float)))
            else:
                h = z
                derivs.append((w, np.ones_like(z)))
        g = np.ones((1, 1))
        for w, dact in reversed(derivs):
            g = (g * dact) @ w.T
        value = float(h[0, 0] * self.j_std + self.j_mean)
        return value, float(g[0, 0] * self.j_std / self.x1_std)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.net.save(d / "terminal_cost.bin")
        meta = {"x1_mean": self.x1_mean, "x1_std": self.x1_std, "t_f": self.t_f,
                "j_mean": self.j_mean, "j_std": self.j_std, "meta": self.meta}
        (d / "terminal_cost.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "TerminalCostFn":
        d = Path(directory)
        m = json.loads((d / "terminal_cost.json").read_text())
        return cls(Mlp.load(d / "terminal_cost.bin"), m["x1_mean"], m["x1_std"], m["t_f"], m["j_mean"], m["j_std"],
                   m["meta"])


def _std(v) -> float:
    s = float(np.std(v))
    return s if s > 0 else 1.0


def fit_terminal_cost(dataset: ApproximatorDataset, config: FitConfig | None = None, t_f: int = T_F) -> TerminalCostFn:
    """Adam on the training split with early stopping on the validation loss."""
    cfg = config or FitConfig()
    tr, va = dataset.train_idx, dataset.val_idx
    x1 = dataset.states[:, 0]
    fn = TerminalCostFn(
        Mlp([2, *cfg.hidden, 1], ["tanh"] * len(cfg.hidden) + ["linear"], seed=cfg.seed),
        x1[tr].mean(), _std(x1[tr]), t_f, dataset.returns[tr].mean(), _std(dataset.returns[tr]),
    )
    inputs = fn._inputs(x1, dataset.k)
    targets = ((dataset.returns - fn.j_mean) / fn.j_std)[:, None]
    net = fn.net
    opt = Adam(net.params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best_val, best_w, best_epoch, wait = np.inf, net.get_weights(), 0, 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(tr)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            try:
                mse_loss(net.forward(inputs[idx]), targets[idx]).backward()
            except FloatingPointError as exc:
                raise FloatingPointError(f"terminal-cost fit diverged at epoch {epoch}") from exc
            opt.step()
        train_loss = float(np.mean((net.predict(inputs[tr]) - targets[tr]) ** 2))
        val_loss = float(np.mean((net.predict(inputs[va]) - targets[va]) ** 2)) if len(va) else train_loss
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise FloatingPointError(f"terminal-cost fit diverged at epoch {epoch}")
        history.append((train_loss, val_loss))
        if val_loss < best_val:
            best_val, best_w, best_epoch, wait = val_loss, net.get_weights(), epoch, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    net.set_weights(best_w)
    train_loss, val_loss = history[best_epoch]
    fn.meta = {"train_loss": train_loss, "val_loss": val_loss, "epochs": len(history), "best_epoch": best_epoch,
               "seed": cfg.seed, "loss_units": "standardized target"}
    return fn


# ---------------------------------------------------------------------------
# terminal region and warm start


@dataclass
class Ingredients:
    region: TerminalRegion
    warm_inputs: np.ndarray  # (N_p, 3) input guess
    warm_increments: np.ndarray  # (N_p, 3) the same guess as increments in [-1, 1]


def _region(x_f, eps) -> TerminalRegion:
    if (x_f < 0).any() or not np.isfinite(x_f).all():
        raise ModelSanityError(f"terminal center must be finite and nonnegative, got {x_f}")
    return TerminalRegion(x_f, eps)


def initial_ingredients(agent: SacAgent, x0, u0, weather, horizon: int, eps: float = 0.1,
                        p=plant.NOMINAL_PARAMS, bounds: BoundTable | None = None, dt: float = DT) -> Ingredients:
    """First-step region and warm start from an ``N_p + 1`` step policy rollout.

    The rollout yields ``u(0..N_p)`` and ``x(0..N_p+1)``; the center is
    ``x(N_p+1)`` and the guess is ``u(1..N_p)``.
    """
    bounds = bounds or BoundTable()
    t_f = int(agent.scaler.high[11])
    x, u = np.asarray(x0, dtype=float), np.asarray(u0, dtype=float)
    inputs = []
    for k in range(horizon + 1):
        u = agent.policy_input(x, u, weather[k], min(k, t_f), bounds)
        x = plant.rk4_step(x, u, weather[k], p, dt)
        inputs.append(u)
    warm = np.array(inputs[1:]).reshape(-1, 3)
    return Ingredients(_region(x, eps), warm, inputs_to_increments(warm, u0, bounds))


def next_ingredients(prev: NlpSolution, agent: SacAgent, k0: int, weather, eps: float = 0.1,
                     p=plant.NOMINAL_PARAMS, bounds: BoundTable | None = None, dt: float = DT) -> Ingredients:
    """Region and warm start for the problem at ``k0 + 1`` from the solution at ``k0``."""
    bounds = bounds or BoundTable()
    t_f = int(agent.scaler.high[11])
    n = len(prev.inputs)
    x_end, u_end = prev.states[-1], prev.inputs[-1]
    k_end = k0 + n
    u_new = agent.policy_input(x_end, u_end, weather[k_end], min(k_end, t_f), bounds)
    x_f = plant.rk4_step(x_end, u_new, weather[k_end], p, dt)
    warm = np.vstack([prev.inputs[1:], u_new[None, :]])
    return Ingredients(_region(x_f, eps), warm, inputs_to_increments(warm, prev.inputs[0], bounds))
