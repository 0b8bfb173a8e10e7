"""Closed-loop greenhouse environment with optional parametric uncertainty."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import plant
from .economics import BoundTable, PriceTable, TransitionCost, stage_cost_total
from .plant import DT, T_F, DisturbanceSeries


class NonFiniteStateError(FloatingPointError):
    """Raised when the simulated state leaves the finite reals."""


@dataclass
class StepResult:
    x: np.ndarray
    u: np.ndarray
    cost: TransitionCost
    reward: float
    done: bool


@dataclass
class GreenhouseEnv:
    """Plant plus economic scoring over a fixed season of ``t_f`` steps.

    Scoring always uses the nominal ``bounds`` given here; controllers that
    tighten constraints do so on their own copy. In stochastic mode each
    :meth:`reset` draws a parameter vector within ``+-delta`` of nominal.
    """

    weather: DisturbanceSeries
    prices: PriceTable = field(default_factory=PriceTable)
    bounds: BoundTable = field(default_factory=BoundTable)
    stochastic: bool = False
    delta: float = 0.05
    t_f: int = T_F
    x0: np.ndarray = field(default_factory=lambda: plant.X0.copy())
    u0: np.ndarray = field(default_factory=lambda: plant.U0.copy())
    dt: float = DT

    def __post_init__(self):
        self.weather.require(self.t_f + 1)
        self.nominal_p = plant.NOMINAL_PARAMS
        self.p = self.nominal_p
        self._restart()

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Start a season from the initial conditions; returns ``x(0)``."""
        if self.stochastic:
            if rng is None:
                raise ValueError("a stochastic environment needs a generator to draw parameters")
            self.p = plant.sample_parameters(self.nominal_p, self.delta, rng)
        else:
            self.p = self.nominal_p
        self._restart()
        return self.x.copy()

    def _restart(self):
        self.x = np.asarray(self.x0, dtype=float).copy()
        self.u_prev = np.asarray(self.u0, dtype=float).copy()
        self.k = 0

    @property
    def done(self) -> bool:
        return self.k >= self.t_f

    def disturbance(self, k: int | None = None) -> np.ndarray:
        return self.weather[self.k if k is None else k]

    def step(self, u) -> StepResult:
        """Apply ``u`` for one sample period and score the transition."""
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        u = np.asarray(u, dtype=float)
        try:
            x_next = plant.rk4_step(self.x, u, self.weather[self.k], self.p, self.dt)
        except plant.ModelEvaluationError as exc:
            raise NonFiniteStateError(f"model evaluation failed at step {self.k}: {exc}") from exc
        if not np.isfinite(x_next).all():
            raise NonFiniteStateError(f"non-finite state at step {self.k}: {x_next}")
        cost = stage_cost_total(self.x, x_next, u, self.prices, self.bounds, self.dt)
        self.x = x_next
        self.u_prev = u.copy()
        self.k += 1
        return StepResult(x_next.copy(), u.copy(), cost, -cost.total, self.done)
