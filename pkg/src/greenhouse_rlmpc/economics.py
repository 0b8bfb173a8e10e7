"""Economic stage costs, soft-constraint penalties and the profit indicator.

Costs are defined on transitions ``(x_prev, u) -> x``: the growth revenue is
``r * (x1 - x1_prev)``, input costs are charged for the applied ``u`` and the
penalties judge the successor state ``x`` in output units (ppm, C, %).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .plant import DT, outputs, output_map

# output index -> position in the penalty arrays
PENALIZED = (2, 3, 4)


@dataclass(frozen=True)
class PriceTable:
    """Price and penalty coefficients.

    ``co2_unit`` and ``heat_unit`` multiply ``c1`` and ``c3``. They default to 1
    (coefficients applied to mg and J as tabulated); set ``co2_unit=1e-6`` and
    ``heat_unit=1/3.6e6`` to read the coefficients as EUR/kg and EUR/kWh.
    """

    c1: float = 1.906e-1
    c3: float = 1.281e-1
    r: float = 20.93
    lam2: float = 5e-5
    lam3: float = 5e-3
    lam4: float = 7e-4
    co2_unit: float = 1.0
    heat_unit: float = 1.0

    def __post_init__(self):
        for name in ("c1", "c3", "r", "lam2", "lam3", "lam4", "co2_unit", "heat_unit"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def co2_price(self) -> float:
        return self.c1 * self.co2_unit

    @property
    def heat_price(self) -> float:
        return self.c3 * self.heat_unit

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([self.lam2, self.lam3, self.lam4])


PHYSICAL_UNITS = {"co2_unit": 1e-6, "heat_unit": 1.0 / 3.6e6}


@dataclass(frozen=True)
class BoundTable:
    u_min: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0]))
    u_max: np.ndarray = field(default_factory=lambda: np.array([1.2, 7.5, 150.0]))
    # CO2 [ppm], temperature [C], relative humidity [%]
    y_min: np.ndarray = field(default_factory=lambda: np.array([500.0, 10.0, 0.0]))
    y_max: np.ndarray = field(default_factory=lambda: np.array([1600.0, 20.0, 80.0]))

    def __post_init__(self):
        for name in ("u_min", "u_max", "y_min", "y_max"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if not (self.u_min < self.u_max).all() or not (self.y_min < self.y_max).all():
            raise ValueError("bounds require min < max componentwise")

    @property
    def du_max(self) -> np.ndarray:
        return self.u_max / 10.0

    def with_humidity_max(self, rh_max: float) -> "BoundTable":
        y_max = self.y_max.copy()
        y_max[2] = rh_max
        return replace(self, y_max=y_max)


class TransitionCost(NamedTuple):
    economic: float
    penalty: float
    total: float


def penalty(y_i: float, i: int, bounds: BoundTable, prices: PriceTable) -> float:
    """Piecewise-linear soft-constraint penalty for output ``i`` in {2, 3, 4}."""
    if i not in PENALIZED:
        raise ValueError(f"penalty index must be one of {PENALIZED}, got {i}")
    j = i - 2
    lam = prices.lambdas[j]
    if y_i > bounds.y_max[j]:
        return float(lam * (y_i - bounds.y_max[j]))
    if y_i < bounds.y_min[j]:
        return float(lam * (bounds.y_min[j] - y_i))
    return 0.0


def penalties(y, bounds: BoundTable, prices: PriceTable) -> np.ndarray:
    """Vectorized penalties ``(g2, g3, g4)`` for outputs ``y[..., 1:4]``."""
    y = np.asarray(y, dtype=float)[..., 1:4]
    over = np.maximum(y - bounds.y_max, 0.0)
    under = np.maximum(bounds.y_min - y, 0.0)
    return prices.lambdas * (over + under)


def stage_cost_economic(x_prev, x, u, prices: PriceTable, dt: float = DT) -> float:
    return float(
        -prices.r * (x[0] - x_prev[0]) + (prices.co2_price * u[0] + prices.heat_price * u[2]) * dt
    )


def stage_cost_total(
    x_prev, x, u, prices: PriceTable, bounds: BoundTable, dt: float = DT
) -> TransitionCost:
    econ = stage_cost_economic(x_prev, x, u, prices, dt)
    y = output_map(x)
    pen = sum(penalty(y[i - 1], i, bounds, prices) for i in PENALIZED)
    return TransitionCost(econ, pen, econ + pen)


def reward(cost: TransitionCost) -> float:
    return -cost.total


def epi(states, inputs, prices: PriceTable, dt: float = DT) -> float:
    """Economic profit indicator of a season.

    ``states`` holds ``x(0..t_f)`` and ``inputs`` the ``t_f`` applied inputs.
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if len(states) != len(inputs) + 1:
        raise ValueError("need one more state than inputs")
    spend = np.sum((prices.co2_price * inputs[:, 0] + prices.heat_price * inputs[:, 2]) * dt)
    return float(prices.r * states[-1, 0] - spend)


def transition_costs(x_prev, x, u, prices: PriceTable, bounds: BoundTable, dt: float = DT):
    """Row-wise ``(economic, penalty)`` for batches of transitions; no range checks."""
    x_prev, x, u = (np.asarray(v, dtype=float) for v in (x_prev, x, u))
    econ = -prices.r * (x[..., 0] - x_prev[..., 0]) + (
        prices.co2_price * u[..., 0] + prices.heat_price * u[..., 2]
    ) * dt
    pen = penalties(outputs(x), bounds, prices).sum(axis=-1)
    return econ, pen


def trajectory_costs(states, inputs, prices: PriceTable, bounds: BoundTable, dt: float = DT):
    """Per-transition ``(economic, penalty)`` arrays for a state/input trajectory."""
    states = np.asarray(states, dtype=float)
    return transition_costs(states[:-1], states[1:], inputs, prices, bounds, dt)
