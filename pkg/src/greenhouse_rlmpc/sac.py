"""Soft actor-critic for the greenhouse season.

The actor maps the 12-feature observation to the mean and log standard
deviation of a Gaussian that is squashed by ``tanh`` into ``[-1, 1]^3``. Two
critics and their Polyak-averaged targets give the clipped double-Q target,
and the entropy temperature is tuned in log space toward a target entropy.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff_nn as ad
from .autodiff_nn import AdamState, Mlp, Tensor, adam_step
from .economics import BoundTable, epi
from .env import GreenhouseEnv
from .plant import T_F

log = logging.getLogger(__name__)

OBS_DIM = 12
ACT_DIM = 3
# feature order: x1..x4, u1..u3 (previous input), d1..d4, k
OBS_NAMES = ("x1", "x2", "x3", "x4", "u1", "u2", "u3", "d1", "d2", "d3", "d4", "k")
_LOG_2PI = math.log(2.0 * math.pi)
_OPEN_ONE = np.nextafter(1.0, 0.0)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ObservationScaler:
    """Fixed affine map of each feature onto roughly ``[0, 1]``."""

    low: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -10.0, 0.0, 0.0)
    high: tuple = (0.4, 0.004, 35.0, 0.025, 1.2, 7.5, 150.0, 1000.0, 0.0015, 30.0, 0.02, float(T_F))

    def __post_init__(self):
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        if lo.shape != (OBS_DIM,) or hi.shape != (OBS_DIM,) or not (hi > lo).all():
            raise ValueError("scaler needs 12 ordered (low, high) pairs")

    def normalize(self, raw) -> np.ndarray:
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return (np.asarray(raw, dtype=float) - lo) / (hi - lo)

    def denormalize(self, obs) -> np.ndarray:
        lo, hi = np.asarray(self.low), np.asarray(self.high)
        return np.asarray(obs, dtype=float) * (hi - lo) + lo

    @classmethod
    def for_bounds(cls, bounds: BoundTable, t_f: int = T_F) -> "ObservationScaler":
        base = cls()
        high = list(base.high)
        high[4:7] = [float(v) for v in bounds.u_max]
        high[11] = float(t_f)
        low = list(base.low)
        low[4:7] = [float(v) for v in bounds.u_min]
        return cls(tuple(low), tuple(high))


DEFAULT_SCALER = ObservationScaler()


def make_observation(x, u_prev, d, k, scaler: ObservationScaler = DEFAULT_SCALER) -> np.ndarray:
    """Normalized ``(x(k), u(k-1), d(k), k)``."""
    t_f = scaler.high[11]
    if not 0 <= k <= t_f:
        raise ValueError(f"time index {k} outside [0, {t_f}]")
    raw = np.concatenate([np.asarray(x, float), np.asarray(u_prev, float), np.asarray(d, float), [float(k)]])
    return scaler.normalize(raw)


def action_to_input(a, u_prev, bounds: BoundTable) -> np.ndarray:
    """``clamp(u_prev + a * du_max, u_min, u_max)``."""
    z = np.asarray(u_prev, dtype=float) + np.asarray(a, dtype=float) * bounds.du_max
    return np.minimum(np.maximum(z, bounds.u_min), bounds.u_max)


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Ring buffer of ``(s, a, r, s', done)`` transitions."""

    def __init__(self, capacity: int = 100_000, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.act = np.zeros((capacity, act_dim))
        self.rew = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self._pos = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a, r, s2, done) -> None:
        i = self._pos
        self.obs[i], self.act[i], self.rew[i], self.next_obs[i], self.done[i] = s, a, r, s2, float(done)
        self._pos = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        """Uniform batch without replacement."""
        if batch > self._size:
            raise ValueError(f"buffer holds {self._size} transitions, batch of {batch} requested")
        idx = rng.choice(self._size, size=batch, replace=False)
        return self.obs[idx], self.act[idx], self.rew[idx], self.next_obs[idx], self.done[idx]


# ---------------------------------------------------------------------------
# agent


@dataclass
class SacConfig:
    hidden: tuple = (128, 128)
    lr: float = 5e-3
    gamma: float = 0.95
    tau: float = 0.005
    batch_size: int = 1024
    buffer_size: int = 100_000
    target_entropy: float = -3.0
    init_log_alpha: float = 0.0
    log_std_min: float = -20.0
    log_std_max: float = 2.0
    reward_scale: float = 1.0
    obs_dim: int = OBS_DIM
    act_dim: int = ACT_DIM

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


def _squash_logp(eps, log_std, pre):
    """Log-density of ``tanh(pre)`` per row, numpy version."""
    gauss = -0.5 * eps * eps - log_std - 0.5 * _LOG_2PI
    jac = 2.0 * (math.log(2.0) - pre - np.logaddexp(0.0, -2.0 * pre))
    return (gauss - jac).sum(axis=1)


class SacAgent:
    def __init__(self, config: SacConfig | None = None, scaler: ObservationScaler = DEFAULT_SCALER,
                 seed: int | None = None, rng: np.random.Generator | None = None):
        self.config = cfg = config or SacConfig()
        self.scaler = scaler
        rng = rng if rng is not None else np.random.default_rng(seed)
        hid = list(cfg.hidden)
        acts = ["relu"] * len(hid) + ["linear"]
        self.actor = Mlp([cfg.obs_dim, *hid, 2 * cfg.act_dim], acts, rng=rng)
        self.q1 = Mlp([cfg.obs_dim + cfg.act_dim, *hid, 1], acts, rng=rng)
        self.q2 = Mlp([cfg.obs_dim + cfg.act_dim, *hid, 1], acts, rng=rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_alpha = float(cfg.init_log_alpha)
        self._actor_opt = AdamState(lr=cfg.lr)
        self._critic_opt = AdamState(lr=cfg.lr)
        self._alpha_opt = AdamState(lr=cfg.lr)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return math.exp(self.log_alpha)

    # -- policy ---------------------------------------------------------------

    def _split(self, out):
        a = self.config.act_dim
        return out[:, :a], np.clip(out[:, a:], self.config.log_std_min, self.config.log_std_max)

    def act(self, obs, deterministic: bool = True, rng: np.random.Generator | None = None) -> np.ndarray:
        """Action in the open cube for one observation or a batch.

        Deterministic actions are evaluated row by row in a fixed order, so a
        state gets the same action alone or inside any batch.
        """
        obs = np.asarray(obs, dtype=float)
        single = obs.ndim == 1
        batch = obs[None, :] if single else obs
        out = self.actor.predict_rowwise(batch) if deterministic else self.actor.predict(batch)
        mean, log_std = self._split(out)
        if deterministic:
            a = np.tanh(mean)
        else:
            if rng is None:
                raise ValueError("stochastic actions need a generator")
            a = np.tanh(mean + np.exp(log_std) * rng.standard_normal(mean.shape))
        a = np.clip(a, -_OPEN_ONE, _OPEN_ONE)
        return a[0] if single else a

    def policy_input(self, x, u_prev, d, k, bounds: BoundTable) -> np.ndarray:
        """Deterministic policy mapped through the increment rule."""
        a = self.act(make_observation(x, u_prev, d, k, self.scaler))
        return action_to_input(a, u_prev, bounds)

    def _sample_np(self, obs, rng):
        mean, log_std = self._split(self.actor.predict(obs))
        eps = rng.standard_normal(mean.shape)
        pre = mean + np.exp(log_std) * eps
        return np.tanh(pre), _squash_logp(eps, log_std, pre)

    # -- learning ---------------------------------------------------------------

    def critic_targets(self, rew, next_obs, done, rng) -> np.ndarray:
        cfg = self.config
        a2, logp2 = self._sample_np(next_obs, rng)
        sa2 = np.hstack([next_obs, a2])
        q_next = np.minimum(self.q1_target.predict(sa2), self.q2_target.predict(sa2))[:, 0]
        soft = q_next - self.alpha * logp2
        return cfg.reward_scale * rew + cfg.gamma * (1.0 - done) * soft

    def critic_loss(self, obs, act, y) -> Tensor:
        sa = np.hstack([obs, act])
        return ad.mse_loss(self.q1.forward(sa), y) + ad.mse_loss(self.q2.forward(sa), y)

    def actor_loss(self, obs, eps):
        cfg = self.config
        out = self.actor.forward(obs)
        mean = out[:, : cfg.act_dim]
        log_std = out[:, cfg.act_dim :].clip(cfg.log_std_min, cfg.log_std_max)
        pre = mean + log_std.exp() * eps
        a = pre.tanh()
        jac = (math.log(2.0) - pre - (pre * -2.0).softplus()) * 2.0
        logp = ((-0.5 * eps * eps - 0.5 * _LOG_2PI) - log_std - jac).sum(axis=1, keepdims=True)
        sa = ad.concat([Tensor(obs), a], axis=1)
        q = ad.minimum(self.q1.forward(sa), self.q2.forward(sa))
        loss = (logp * self.alpha - q).mean()
        return loss, logp.data[:, 0]

    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator, batch_size: int | None = None) -> dict:
        """One critic, actor and temperature update plus the target blend."""
        cfg = self.config
        n = batch_size or cfg.batch_size
        obs, act, rew, next_obs, done = buffer.sample(n, rng)
        try:
            y = self.critic_targets(rew, next_obs, done, rng)
            critic_params = self.q1.params + self.q2.params
            for t in critic_params:
                t.grad = None
            closs = self.critic_loss(obs, act, y)
            closs.backward()
            self._apply(critic_params, self._critic_opt)

            for t in self.actor.params:
                t.grad = None
            eps = rng.standard_normal((n, cfg.act_dim))
            aloss, logp = self.actor_loss(obs, eps)
            aloss.backward()
            self._apply(self.actor.params, self._actor_opt)
            for t in critic_params:
                t.grad = None

            # temperature: d/dlog_alpha of -log_alpha * mean(logp + target)
            gap = float(np.mean(logp + cfg.target_entropy))
            self.log_alpha = float(adam_step([np.array([self.log_alpha])], [np.array([-gap])], self._alpha_opt)[0][0])
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"non-finite value in update {self.updates}: {exc}") from exc
        losses = {"critic": closs.item(), "actor": aloss.item(), "alpha_loss": -self.log_alpha * gap, "alpha": self.alpha}
        if not all(math.isfinite(v) for v in losses.values()):
            raise TrainingDivergedError(f"non-finite loss in update {self.updates}: {losses}")
        self.soft_update()
        self.updates += 1
        return losses

    @staticmethod
    def _apply(params, state):
        new = adam_step([t.data for t in params], [t.grad for t in params], state)
        for t, w in zip(params, new):
            t.data = w

    def soft_update(self, tau: float | None = None) -> None:
        tau = self.config.tau if tau is None else tau
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for po, pt in zip(online.params, target.params):
                pt.data = tau * po.data + (1.0 - tau) * pt.data

    # -- persistence ------------------------------------------------------------

    NETS = ("actor", "q1", "q2", "q1_target", "q2_target")

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in self.NETS:
            getattr(self, name).save(d / f"{name}.bin")
        meta = {
            "config": asdict(self.config),
            "scaler": {"low": list(self.scaler.low), "high": list(self.scaler.high), "features": list(OBS_NAMES)},
            "log_alpha": self.log_alpha,
            "updates": self.updates,
        }
        (d / "agent.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "SacAgent":
        d = Path(directory)
        meta = json.loads((d / "agent.json").read_text())
        agent = cls(SacConfig(**meta["config"]),
                    ObservationScaler(tuple(meta["scaler"]["low"]), tuple(meta["scaler"]["high"])), seed=0)
        for name in cls.NETS:
            setattr(agent, name, Mlp.load(d / f"{name}.bin"))
        agent.log_alpha = float(meta["log_alpha"])
        agent.updates = int(meta["updates"])
        return agent


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    agent: SacAgent
    curve: list = field(default_factory=list)  # (episode, cum_reward, epi)
    losses: list = field(default_factory=list)


def _streams(seed):
    init, act, env = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(act), np.random.default_rng(env)


def run_policy_episode(env: GreenhouseEnv, choose, env_rng=None):
    """Roll ``choose(obs, x, u_prev, d, k) -> a`` through one season; returns (cum_reward, epi, states, inputs)."""
    x = env.reset(env_rng)
    states, inputs, total = [x], [], 0.0
    scaler = ObservationScaler.for_bounds(env.bounds, env.t_f)
    while not env.done:
        obs = make_observation(x, env.u_prev, env.disturbance(), env.k, scaler)
        a = choose(obs)
        res = env.step(action_to_input(a, env.u_prev, env.bounds))
        total += res.reward
        x = res.x
        states.append(x)
        inputs.append(res.u)
    return total, epi(np.array(states), np.array(inputs), env.prices, env.dt), states, inputs


def train(env: GreenhouseEnv, episodes: int = 100, warmup: int = 9, seed: int = 0,
          config: SacConfig | None = None, update_every: int = 1, curve_path: str | Path | None = None,
          agent: SacAgent | None = None) -> TrainResult:
    """Train an agent; deterministic for a fixed seed.

    Warm-up episodes act uniformly at random. Afterwards the agent samples
    from its policy and performs one gradient step every ``update_every``
    environment steps once the buffer holds a full batch.
    """
    if warmup > episodes:
        raise ValueError("warm-up longer than training")
    init_rng, rng, env_rng = _streams(seed)
    config = config or SacConfig()
    scaler = ObservationScaler.for_bounds(env.bounds, env.t_f)
    agent = agent or SacAgent(config, scaler, rng=init_rng)
    buffer = ReplayBuffer(config.buffer_size)
    result = TrainResult(agent)
    for ep in range(episodes):
        x = env.reset(env_rng)
        obs = make_observation(x, env.u_prev, env.disturbance(), env.k, scaler)
        states, inputs, total = [x], [], 0.0
        while not env.done:
            if ep < warmup:
                a = rng.uniform(-1.0, 1.0, ACT_DIM)
            else:
                a = agent.act(obs, deterministic=False, rng=rng)
            res = env.step(action_to_input(a, env.u_prev, env.bounds))
            obs2 = make_observation(res.x, env.u_prev, env.disturbance(), env.k, scaler)
            buffer.add(obs, a, res.reward, obs2, res.done)
            total += res.reward
            states.append(res.x)
            inputs.append(res.u)
            obs = obs2
            if ep >= warmup and env.k % update_every == 0 and len(buffer) >= config.batch_size:
                result.losses.append(agent.train_step(buffer, rng))
        e = epi(np.array(states), np.array(inputs), env.prices, env.dt)
        result.curve.append((ep, total, e))
        log.info("episode %d reward %.6f epi %.6f alpha %.3g", ep, total, e, agent.alpha)
    if curve_path is not None:
        write_curve(result.curve, curve_path)
    result.buffer_size = len(buffer)
    return result


def write_curve(curve, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "cum_reward", "epi"])
        for ep, r, e in curve:
            w.writerow([ep, repr(float(r)), repr(float(e))])
