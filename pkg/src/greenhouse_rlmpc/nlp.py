"""Finite-horizon economic OCP over input increments, and its solver.

Decision variables are normalized increments ``a in [-1, 1]^(3 N)``; inputs
follow ``u_k = clamp(u_{k-1} + a_k * du_max, u_min, u_max)`` so box and rate
constraints hold by construction. Inside the solver the clamp is replaced by
a softplus surrogate so the single-shooting objective is differentiable;
returned solutions always use the hard clamp.

The objective gradient is computed by a reverse (adjoint) sweep over the
RK4 sensitivities of each sample step. A terminal region is handled with an
augmented Lagrangian around a projected limited-memory BFGS inner solver.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from . import plant
from .economics import BoundTable, PriceTable
from .plant import DT, SUBSTEPS

CONVERGED = "converged"
ITERATION_LIMIT = "iteration-limit"
TERMINAL_INFEASIBLE = "terminal-infeasible"
STATUSES = (CONVERGED, ITERATION_LIMIT, TERMINAL_INFEASIBLE)


@dataclass
class SolverOptions:
    max_iter: int = 200
    max_outer: int = 10
    stationarity_tol: float = 1e-6
    terminal_tol: float = 1e-4
    kappa: float = 1000.0  # soft-clamp sharpness relative to each input range
    penalty_smoothing: float = 1e-3  # softplus width of the penalty kinks, fraction of each band
    memory: int = 10
    max_failures: int = 5
    rho0: float = 1.0
    rho_max: float = 1e8


@dataclass
class TerminalRegion:
    """Box ``[(1 - eps) x_f, (1 + eps) x_f]`` around a nonnegative center."""

    center: np.ndarray
    eps: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).copy()
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if (self.center < 0).any() or not np.isfinite(self.center).all():
            raise ValueError(f"terminal region center must be finite and nonnegative, got {self.center}")

    @property
    def lower(self) -> np.ndarray:
        return (1.0 - self.eps) * self.center

    @property
    def upper(self) -> np.ndarray:
        return (1.0 + self.eps) * self.center

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.abs(self.center), 1e-12)

    def constraints(self, x) -> np.ndarray:
        """Scaled inequalities ``c <= 0``: upper bounds first, then lower bounds."""
        s = self.scale
        return np.concatenate([(x - self.upper) / s, (self.lower - x) / s])

    def violation(self, x) -> float:
        return float(max(0.0, self.constraints(x).max()))


TerminalCost = Callable[[float, int], "tuple[float, float]"]


@dataclass
class OcpSpec:
    horizon: int
    x0: np.ndarray
    u_prev: np.ndarray
    disturbances: np.ndarray  # at least ``horizon + 1`` rows, row i is d(k0 + i)
    p: np.ndarray = field(default_factory=lambda: plant.NOMINAL_PARAMS)
    bounds: BoundTable = field(default_factory=BoundTable)
    prices: PriceTable = field(default_factory=PriceTable)
    k0: int = 0
    terminal_cost: TerminalCost | None = None
    terminal_region: TerminalRegion | None = None
    dt: float = DT

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.u_prev = np.asarray(self.u_prev, dtype=float)
        self.disturbances = np.ascontiguousarray(self.disturbances, dtype=float)
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if len(self.disturbances) < self.horizon + 1:
            raise ValueError("disturbance window must hold at least horizon + 1 rows")
        tol = 1e-9 * np.maximum(self.bounds.u_max, 1.0)
        if (self.u_prev < self.bounds.u_min - tol).any() or (self.u_prev > self.bounds.u_max + tol).any():
            raise ValueError(f"previous input {self.u_prev} outside the input box")


@dataclass
class NlpSolution:
    increments: np.ndarray  # (N, 3)
    inputs: np.ndarray  # (N, 3), hard-clamped
    states: np.ndarray  # (N, 4), x(k0+1 .. k0+N)
    objective: float  # surrogate objective at the returned increments
    status: str
    iterations: int
    stationarity: float
    terminal_violation: float = 0.0
    evaluations: int = 0
    outer_iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


# ---------------------------------------------------------------------------
# increment map


def _softplus(t):
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def smooth_increment_map(a, u_prev, bounds: BoundTable, kappa: float | None = None) -> np.ndarray:
    """Inputs from normalized increments.

    ``kappa=None`` applies the exact clamp. A finite ``kappa`` replaces
    ``clamp(z, lo, hi)`` by ``lo + sp(z - lo) - sp(z - hi)`` with
    ``sp(t) = softplus(k t) / k`` and ``k = kappa / (hi - lo)``; the largest
    deviation from the exact clamp is ``ln(2) (hi - lo) / kappa`` at the bounds.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    u = np.asarray(u_prev, dtype=float).copy()
    lo, hi, du = bounds.u_min, bounds.u_max, bounds.du_max
    out = np.empty_like(a)
    for k in range(len(a)):
        z = u + a[k] * du
        if kappa is None:
            u = np.minimum(np.maximum(z, lo), hi)
        else:
            sharp = kappa / (hi - lo)
            u = lo + (_softplus(sharp * (z - lo)) - _softplus(sharp * (z - hi))) / sharp
        out[k] = u
    return out


def inputs_to_increments(inputs, u_prev, bounds: BoundTable) -> np.ndarray:
    """Increments reproducing ``inputs`` from ``u_prev``, clipped to [-1, 1]."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, 3)
    prev = np.vstack([np.asarray(u_prev, dtype=float)[None, :], inputs[:-1]])
    return np.clip((inputs - prev) / bounds.du_max, -1.0, 1.0)


# ---------------------------------------------------------------------------
# compiled rollout and adjoint


@numba.njit(cache=True)
def _sp(t):
    return max(t, 0.0) + math.log1p(math.exp(-abs(t)))


@numba.njit(cache=True)
def _sig(t):
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _out_terms(x):
    """Outputs y2..y4 and their partial derivatives."""
    t = x[2]
    kelv = t + 273.15
    fac = 8.31 / (101325.0 * 0.044) * 1e6
    y2 = fac * kelv * x[1]
    sat = 11.0 * math.exp(17.269 * t / (t + 238.3)) / (8.31 * kelv)
    y4 = 100.0 * x[3] / sat
    dlogsat = 17.269 * 238.3 / ((t + 238.3) * (t + 238.3)) - 1.0 / kelv
    # y2/x2, y2/T, y4/x4, y4/T
    return y2, t, y4, fac * kelv, fac * x[1], 100.0 / sat, -y4 * dlogsat


@numba.njit(cache=True)
def _pen(y, lo, hi, lam, h):
    if h > 0.0:
        return (lam * h * (_sp((y - hi) / h) + _sp((lo - y) / h)),
                lam * (_sig((y - hi) / h) - _sig((lo - y) / h)))
    if y > hi:
        return lam * (y - hi), lam
    if y < lo:
        return lam * (lo - y), -lam
    return 0.0, 0.0


@numba.njit(cache=True)
def _penalty_and_grad(x, ymin, ymax, lam, hs, g):
    y2, y3, y4, d22, d2t, d44, d4t = _out_terms(x)
    p2, s2 = _pen(y2, ymin[0], ymax[0], lam[0], hs[0])
    p3, s3 = _pen(y3, ymin[1], ymax[1], lam[1], hs[1])
    p4, s4 = _pen(y4, ymin[2], ymax[2], lam[2], hs[2])
    g[0] = 0.0
    g[1] = s2 * d22
    g[2] = s2 * d2t + s3 + s4 * d4t
    g[3] = s4 * d44
    return p2 + p3 + p4


@numba.njit(cache=True)
def _forward(a, u_prev, x0, dist, p, dt, nsub, price, ymin, ymax, hs, umin, umax, du, kappa,
             xs, us, dudz, phi, gam, stage):
    """Roll out the increments; fills trajectories/sensitivities, returns the stage-cost sum."""
    n = us.shape[0]
    xs[0, :] = x0
    uk = u_prev.copy()
    gpen = np.empty(4)
    total = 0.0
    for k in range(n):
        for i in range(3):
            z = uk[i] + a[3 * k + i] * du[i]
            if kappa > 0.0:
                sharp = kappa / (umax[i] - umin[i])
                uk[i] = umin[i] + (_sp(sharp * (z - umin[i])) - _sp(sharp * (z - umax[i]))) / sharp
                dudz[k, i] = _sig(sharp * (z - umin[i])) - _sig(sharp * (z - umax[i]))
            else:
                uk[i] = min(max(z, umin[i]), umax[i])
                dudz[k, i] = 1.0 if umin[i] < z < umax[i] else 0.0
            us[k, i] = uk[i]
        plant._step_jac(xs[k], uk, dist[k], p, dt, nsub, xs[k + 1], phi[k], gam[k])
        econ = -price[2] * (xs[k + 1, 0] - xs[k, 0]) + (price[0] * uk[0] + price[1] * uk[2]) * dt
        pen = _penalty_and_grad(xs[k + 1], ymin, ymax, price[3:6], hs, gpen)
        stage[k] = econ + pen
        total += stage[k]
    return total


@numba.njit(cache=True)
def _adjoint(xs, dudz, phi, gam, price, ymin, ymax, hs, du, dt, lam_terminal, grad):
    n = dudz.shape[0]
    lam = lam_terminal.copy()
    gpen = np.empty(4)
    _penalty_and_grad(xs[n], ymin, ymax, price[3:6], hs, gpen)
    for i in range(4):
        lam[i] += gpen[i]
    lam[0] -= price[2]  # growth revenue telescopes to -r (x1_N - x1_0)
    mu_next = np.zeros(3)
    newlam = np.empty(4)
    for k in range(n - 1, -1, -1):
        mu = np.empty(3)
        for j in range(3):
            acc = 0.0
            for i in range(4):
                acc += gam[k, i, j] * lam[i]
            mu[j] = acc
        mu[0] += price[0] * dt
        mu[2] += price[1] * dt
        if k + 1 < n:
            for j in range(3):
                mu[j] += mu_next[j] * dudz[k + 1, j]
        for j in range(3):
            grad[3 * k + j] = mu[j] * dudz[k, j] * du[j]
        mu_next[:] = mu
        if k > 0:
            _penalty_and_grad(xs[k], ymin, ymax, price[3:6], hs, gpen)
            for j in range(4):
                acc = gpen[j]
                for i in range(4):
                    acc += phi[k, i, j] * lam[i]
                newlam[j] = acc
            lam[:] = newlam


# ---------------------------------------------------------------------------
# transcription


class Transcription:
    """Smooth single-shooting objective of an :class:`OcpSpec` over increments.

    ``kappa`` is the soft-clamp sharpness (``None`` for the exact clamp) and
    ``penalty_smoothing`` the width of the softplus that rounds each penalty
    kink, as a fraction of the output band (0 keeps the exact kinks). The
    smoothed penalty overestimates the exact one by at most
    ``lambda * width * ln 2``. ``hard=True`` evaluations use neither surrogate.
    """

    def __init__(self, spec: OcpSpec, kappa: float | None = 1000.0, penalty_smoothing: float = 1e-3):
        self.spec = spec
        self.kappa = kappa
        self.penalty_smoothing = penalty_smoothing
        n = spec.horizon
        self.n = 3 * n
        b, pr = spec.bounds, spec.prices
        self._price = np.array([pr.co2_price, pr.heat_price, pr.r, pr.lam2, pr.lam3, pr.lam4])
        self._ymin, self._ymax = b.y_min.copy(), b.y_max.copy()
        self._hs = penalty_smoothing * (b.y_max - b.y_min)
        self._hs0 = np.zeros(3)
        self._umin, self._umax, self._du = b.u_min.copy(), b.u_max.copy(), b.du_max.copy()
        self._dist = np.ascontiguousarray(spec.disturbances[:n])
        self._p = np.ascontiguousarray(spec.p, dtype=float)
        self.xs = np.empty((n + 1, 4))
        self.us = np.empty((n, 3))
        self.dudz = np.empty((n, 3))
        self.phi = np.empty((n, 4, 4))
        self.gam = np.empty((n, 4, 3))
        self.stage = np.empty(n)
        self.evaluations = 0

    def _roll(self, a, kappa, smooth=True):
        a = np.ascontiguousarray(a, dtype=float).reshape(-1)
        if a.shape != (self.n,):
            raise ValueError(f"expected {self.n} increments, got {a.shape}")
        s = self.spec
        self.evaluations += 1
        return _forward(a, s.u_prev, s.x0, self._dist, self._p, s.dt, SUBSTEPS, self._price,
                        self._ymin, self._ymax, self._hs if smooth else self._hs0,
                        self._umin, self._umax, self._du,
                        -1.0 if kappa is None else float(kappa),
                        self.xs, self.us, self.dudz, self.phi, self.gam, self.stage)

    def _terminal(self, want_grad: bool):
        tc = self.spec.terminal_cost
        if tc is None:
            return 0.0, np.zeros(4)
        xn = self.xs[-1]
        value, dx1 = tc(float(xn[0]), self.spec.k0 + self.spec.horizon)
        g = np.zeros(4)
        g[0] = dx1
        return value, g

    def objective(self, a, hard: bool = False) -> float:
        if self.n == 0:
            return self._terminal_at_x0()
        total = self._roll(a, None if hard else self.kappa, not hard)
        return total + self._terminal(False)[0]

    def _terminal_at_x0(self) -> float:
        tc = self.spec.terminal_cost
        return 0.0 if tc is None else tc(float(self.spec.x0[0]), self.spec.k0)[0]

    def value_and_grad(self, a, extra_terminal: Callable | None = None):
        """Objective and gradient; ``extra_terminal(x_N) -> (value, grad_x)`` adds a terminal term."""
        if self.n == 0:
            return self._terminal_at_x0(), np.zeros(0)
        total = self._roll(a, self.kappa)
        tval, tgrad = self._terminal(True)
        total += tval
        if extra_terminal is not None:
            ev, eg = extra_terminal(self.xs[-1])
            total += ev
            tgrad = tgrad + eg
        grad = np.empty(self.n)
        _adjoint(self.xs, self.dudz, self.phi, self.gam, self._price, self._ymin, self._ymax,
                 self._hs, self._du, self.spec.dt, tgrad, grad)
        return total, grad

    def terminal_state(self) -> np.ndarray:
        """Terminal state of the most recent rollout."""
        return self.xs[-1].copy()

    def rollout(self, a, hard: bool = True):
        """Inputs and predicted states ``x(k0+1..k0+N)`` for increments ``a``."""
        if self.n == 0:
            return np.zeros((0, 3)), np.zeros((0, 4))
        self._roll(a, None if hard else self.kappa, not hard)
        return self.us.copy(), self.xs[1:].copy()


def transcribe(spec: OcpSpec, kappa: float | None = 1000.0, penalty_smoothing: float = 1e-3) -> Transcription:
    return Transcription(spec, kappa, penalty_smoothing)


# ---------------------------------------------------------------------------
# projected limited-memory quasi-Newton


@dataclass
class BoxResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    status: str
    iterations: int
    stationarity: float
    evaluations: int


def projected_residual(x, g, lower, upper) -> float:
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(np.clip(x - g, lower, upper) - x)))


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        al = rho * (s @ q)
        alphas.append(al)
        q -= al * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), al in zip(pairs, reversed(alphas)):
        be = rho * (y @ q)
        q += (al - be) * s
    return q


def minimize_box(fun, x0, lower, upper, max_iter=200, tol=1e-6, memory=10, max_failures=5,
                 callback=None) -> BoxResult:
    """Minimize ``fun(x) -> (f, g)`` over a box with projected L-BFGS.

    Steps follow the projection arc with Armijo backtracking. When the line
    search fails a projected-gradient trial step with a shrinking radius is
    tried; ``max_failures`` consecutive failures end the run with
    ``iteration-limit``. Only decreasing steps are accepted, so the returned
    point is never worse than ``x0``.
    """
    lower = np.broadcast_to(np.asarray(lower, dtype=float), np.shape(x0))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), np.shape(x0))
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    f, g = fun(x)
    nfev = 1
    if callback is not None:
        callback(x, f)
    pairs: deque = deque(maxlen=memory)
    failures = 0
    radius = 1.0
    status = ITERATION_LIMIT
    it = 0
    res = projected_residual(x, g, lower, upper)
    while it < max_iter:
        res = projected_residual(x, g, lower, upper)
        if res < tol:
            status = CONVERGED
            break
        it += 1
        active = ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
        gf = np.where(active, 0.0, g)
        d = -_two_loop(gf, list(pairs))
        d[active] = 0.0
        if not gf @ d < 0:
            pairs.clear()
            d = -gf
        step = 1.0 if pairs else min(1.0, 1.0 / max(np.max(np.abs(d)), 1e-300))
        accepted = False
        for _ in range(40):
            xn = np.clip(x + step * d, lower, upper)
            s = xn - x
            if not np.any(s):
                break
            fn, gn = fun(xn)
            nfev += 1
            if callback is not None:
                callback(xn, fn)
            if fn <= f + 1e-4 * (g @ s):
                accepted = fn < f or (fn == f and g @ s < 0)
                if accepted:
                    break
            step *= 0.5
        if not accepted:
            failures += 1
            pairs.clear()
            gnorm = max(np.max(np.abs(g)), 1e-300)
            radius *= 0.5
            xn = np.clip(x - radius * g / gnorm, lower, upper)
            s = xn - x
            if np.any(s):
                fn, gn = fun(xn)
                nfev += 1
                if callback is not None:
                    callback(xn, fn)
                accepted = fn < f
            if not accepted:
                if failures >= max_failures:
                    break
                continue
        failures = 0
        y = gn - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = xn, fn, gn
    else:
        res = projected_residual(x, g, lower, upper)
        if res < tol:
            status = CONVERGED
    return BoxResult(x, float(f), g, status, it, res, nfev)


# ---------------------------------------------------------------------------
# OCP solve


def solve(nlp: Transcription, initial_guess, options: SolverOptions | None = None) -> NlpSolution:
    """Solve the transcribed OCP from a warm start in ``[-1, 1]``."""
    opts = options or SolverOptions()
    spec = nlp.spec
    n = nlp.n
    guess = np.clip(np.asarray(initial_guess, dtype=float).reshape(-1), -1.0, 1.0)
    if guess.shape != (n,):
        raise ValueError(f"initial guess must hold {n} increments")
    if n == 0:
        return NlpSolution(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                           nlp.objective(guess), CONVERGED, 0, 0.0)
    lower, upper = -np.ones(n), np.ones(n)
    region = spec.terminal_region

    if region is None:
        r = minimize_box(nlp.value_and_grad, guess, lower, upper, opts.max_iter,
                         opts.stationarity_tol, opts.memory, opts.max_failures)
        return _finish(nlp, r.x, r.f, r.status, r.iterations, r.stationarity, 0.0, 0)

    # augmented Lagrangian on the scaled terminal box
    mu = np.zeros(8)
    rho = opts.rho0
    scale = region.scale
    best = {"a": None, "f": math.inf, "v": math.inf}

    def record(a, f_obj, viol):
        # prefer feasible points, then lower objective; otherwise least violation
        feas = viol <= opts.terminal_tol
        if best["a"] is None:
            better = True
        elif feas and best["v"] <= opts.terminal_tol:
            better = f_obj < best["f"]
        elif feas:
            better = True
        elif best["v"] > opts.terminal_tol:
            better = viol < best["v"]
        else:
            better = False
        if better:
            best.update(a=a.copy(), f=f_obj, v=viol)

    total_iter = 0
    inner = None
    outer = 0
    prev_v = math.inf
    for outer in range(1, opts.max_outer + 1):
        state = {}

        def al_term(xn, mu=mu, rho=rho):
            c = region.constraints(xn)
            t = np.maximum(0.0, mu + rho * c)
            val = float((t @ t - mu @ mu) / (2.0 * rho))
            dc = np.concatenate([1.0 / scale, -1.0 / scale])
            gc = t * dc
            grad = gc[:4] + gc[4:]
            state["c"] = c
            return val, grad

        def fun(a):
            return nlp.value_and_grad(a, al_term)

        def cb(a, merit):
            c = state["c"]
            viol = float(max(0.0, c.max()))
            al_val = float((np.maximum(0.0, mu + rho * c) ** 2).sum() - mu @ mu) / (2.0 * rho)
            record(a, merit - al_val, viol)

        start = guess if inner is None else inner.x
        inner = minimize_box(fun, start, lower, upper, opts.max_iter, opts.stationarity_tol,
                             opts.memory, opts.max_failures, callback=cb)
        total_iter += inner.iterations
        nlp.value_and_grad(inner.x, al_term)
        c = state["c"]
        v = float(max(0.0, c.max()))
        if v <= opts.terminal_tol and inner.status == CONVERGED:
            break
        mu = np.maximum(0.0, mu + rho * c)
        if v > 0.25 * prev_v:
            rho = min(rho * 10.0, opts.rho_max)
        prev_v = v

    # best feasible iterate seen anywhere, which may precede the final AL point
    a_best, viol = best["a"], best["v"]
    if viol > opts.terminal_tol:
        status = TERMINAL_INFEASIBLE
    else:
        status = inner.status
    return _finish(nlp, a_best, nlp.objective(a_best), status, total_iter, inner.stationarity, viol, outer,
                   opts.terminal_tol)


def _finish(nlp, a, f, status, iters, stat, viol, outer, terminal_tol=math.inf) -> NlpSolution:
    spec = nlp.spec
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    inputs = smooth_increment_map(a, spec.u_prev, spec.bounds, None)
    states = plant.simulate(spec.x0, inputs, spec.disturbances[: len(inputs)], spec.p, spec.dt)
    if spec.terminal_region is not None:
        # the exact clamp can move the terminal state slightly off the surrogate's
        viol = spec.terminal_region.violation(states[-1])
        if viol > terminal_tol:
            status = TERMINAL_INFEASIBLE
    return NlpSolution(a, inputs, states, float(f), status, iters, float(stat), float(viol),
                       nlp.evaluations, outer)
