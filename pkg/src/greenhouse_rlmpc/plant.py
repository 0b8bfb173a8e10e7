"""Lettuce greenhouse climate/crop model (van Henten, 1994).

State ``x`` (model units):
    x1 dry weight [kg m^-2], x2 indoor CO2 density [kg m^-3],
    x3 indoor air temperature [C], x4 indoor vapour density [kg m^-3].
Input ``u``:
    u1 CO2 injection [mg m^-2 s^-1], u2 ventilation [mm s^-1], u3 heating [W m^-2].
Disturbance ``d``:
    d1 solar radiation [W m^-2], d2 outdoor CO2 [kg m^-3],
    d3 outdoor temperature [C], d4 outdoor vapour density [kg m^-3].

Each 30-minute sample is integrated with ``SUBSTEPS`` classical RK4 steps,
holding ``u`` and ``d`` constant over the sample. A single 1800 s RK4 step
is unstable for the humidity balance once the canopy closes and the vents
open (step-size times decay rate exceeds the RK4 stability bound). With the
vents wide open the CO2 and vapour balances relax on a ~10 minute time
constant, so 300 s substeps still leave up to ~4e-4 relative error per
sample; thirty 60 s substeps keep it below 1e-6 across the input box.

The hot loops (RHS, its Jacobians and the RK4 step with sensitivities) are
compiled with numba; the public functions wrap them with validation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, NamedTuple

import numba
import numpy as np

DT = 1800.0
T_F = 1920
STEPS_PER_DAY = 48
SUBSTEPS = 30

NX, NU, ND, NP = 4, 3, 4, 22

X0 = np.array([0.0035, 0.001, 15.0, 0.008])
U0 = np.array([0.0, 0.0, 50.0])

# constants of the output conversion (ideal gas, Magnus-type saturation curve)
GAS_CONSTANT = 8.31  # J mol^-1 K^-1
KELVIN = 273.15
PRESSURE = 101325.0  # Pa
CO2_MOLAR_MASS = 0.044  # kg mol^-1
SAT_SCALE = 11.0  # saturation vapour pressure [Pa] times water molar mass
SAT_A = 17.269
SAT_B = 238.3

TEMP_RANGE = (-20.0, 60.0)


class ModelEvaluationError(FloatingPointError):
    """The model produced a non-finite value."""

    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"non-finite derivative in state component x{index + 1}")


class UnitConversionError(ValueError):
    pass


class WeatherError(ValueError):
    pass


class Output(NamedTuple):
    dry_weight: float  # kg m^-2
    co2_ppm: float
    temperature: float  # C
    rh_percent: float


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParameterInfo:
    name: str
    value: float
    unit: str
    description: str


def load_parameter_table(path: str | Path | None = None) -> list[ParameterInfo]:
    """Read a ``name,value,unit[,description]`` parameter file."""
    if path is None:
        text = resources.files("greenhouse_rlmpc").joinpath("data/parameters.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.DictReader(text.splitlines()))
    table = [
        ParameterInfo(r["name"], float(r["value"]), r["unit"], r.get("description", "") or "")
        for r in rows
    ]
    if len(table) != NP:
        raise ValueError(f"parameter file must hold {NP} entries, found {len(table)}")
    for info in table:
        if not (info.value > 0 and math.isfinite(info.value)):
            raise ValueError(f"parameter {info.name} must be strictly positive, got {info.value}")
    return table


def load_parameters(path: str | Path | None = None) -> np.ndarray:
    return np.array([info.value for info in load_parameter_table(path)])


PARAM_NAMES = tuple(info.name for info in load_parameter_table())
NOMINAL_PARAMS = load_parameters()
NOMINAL_PARAMS.flags.writeable = False


def sample_parameters(p: np.ndarray, delta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``p_hat ~ U(p(1 - delta), p(1 + delta))`` independently per component."""
    if not 0.0 <= delta < 1.0:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    p = np.asarray(p, dtype=float)
    if delta == 0.0:
        return p.copy()
    return rng.uniform(p * (1.0 - delta), p * (1.0 + delta))


# ---------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _rhs(x, u, d, p, out):
    w, c, t, h = x[0], x[1], x[2], x[3]
    cover = 1.0 - math.exp(-p[2] * w)
    light = p[3] * d[0]
    q = -p[4] * t * t + p[5] * t - p[6]
    # the conductance polynomial turns negative outside ~2.9..42 C; a negative
    # CO2-limited rate puts a pole in the hyperbola, so it is cut at zero
    co2 = max(q * (c - p[7]), 0.0)
    denom = light + co2
    phot = cover * light * co2 / denom if denom != 0.0 else 0.0
    resp = 2.0 ** (t / 10.0 - 2.5)
    vent = u[1] * 1e-3 + p[10]
    sat = p[17] / (p[18] * (t + p[19])) * math.exp(p[20] * t / (t + p[21]))
    transp = p[16] * cover * (sat - h)
    out[0] = p[0] * phot - p[1] * w * resp
    out[1] = (-phot + p[9] * w * resp + u[0] * 1e-6 - vent * (c - d[1])) / p[8]
    out[2] = (u[2] - (p[12] * u[1] * 1e-3 + p[13]) * (t - d[2]) + p[14] * d[0]) / p[11]
    out[3] = (transp - vent * (h - d[3])) / p[15]


@numba.njit(cache=True)
def _rhs_jac(x, u, d, p, f, jx, ju):
    """RHS value plus Jacobians with respect to state and input."""
    w, c, t, h = x[0], x[1], x[2], x[3]
    e = math.exp(-p[2] * w)
    cover = 1.0 - e
    light = p[3] * d[0]
    q = -p[4] * t * t + p[5] * t - p[6]
    dq = -2.0 * p[4] * t + p[5]
    co2 = q * (c - p[7])
    if co2 < 0.0:
        co2 = 0.0
        q = 0.0
        dq = 0.0
    denom = light + co2
    if denom != 0.0:
        hyp = light * co2 / denom
        dhyp = light * light / (denom * denom)
    else:
        hyp = 0.0
        dhyp = 0.0
    phot = cover * hyp
    phot_w = p[2] * e * hyp
    phot_c = cover * dhyp * q
    phot_t = cover * dhyp * dq * (c - p[7])
    resp = 2.0 ** (t / 10.0 - 2.5)
    dresp = resp * math.log(2.0) / 10.0
    vent = u[1] * 1e-3 + p[10]
    sat = p[17] / (p[18] * (t + p[19])) * math.exp(p[20] * t / (t + p[21]))
    dsat = sat * (-1.0 / (t + p[19]) + p[20] * p[21] / ((t + p[21]) * (t + p[21])))

    _rhs(x, u, d, p, f)  # identical arithmetic to the plain step

    jx[:, :] = 0.0
    ju[:, :] = 0.0
    jx[0, 0] = p[0] * phot_w - p[1] * resp
    jx[0, 1] = p[0] * phot_c
    jx[0, 2] = p[0] * phot_t - p[1] * w * dresp
    jx[1, 0] = (-phot_w + p[9] * resp) / p[8]
    jx[1, 1] = (-phot_c - vent) / p[8]
    jx[1, 2] = (-phot_t + p[9] * w * dresp) / p[8]
    jx[2, 2] = -(p[12] * u[1] * 1e-3 + p[13]) / p[11]
    jx[3, 0] = p[16] * p[2] * e * (sat - h) / p[15]
    jx[3, 2] = p[16] * cover * dsat / p[15]
    jx[3, 3] = (-p[16] * cover - vent) / p[15]

    ju[1, 0] = 1e-6 / p[8]
    ju[1, 1] = -1e-3 * (c - d[1]) / p[8]
    ju[2, 1] = -p[12] * 1e-3 * (t - d[2]) / p[11]
    ju[2, 2] = 1.0 / p[11]
    ju[3, 1] = -1e-3 * (h - d[3]) / p[15]


@numba.njit(cache=True)
def _rk4(x, u, d, p, dt, out):
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    xs = np.empty(4)
    _rhs(x, u, d, p, k1)
    for i in range(4):
        xs[i] = x[i] + 0.5 * dt * k1[i]
    _rhs(xs, u, d, p, k2)
    for i in range(4):
        xs[i] = x[i] + 0.5 * dt * k2[i]
    _rhs(xs, u, d, p, k3)
    for i in range(4):
        xs[i] = x[i] + dt * k3[i]
    _rhs(xs, u, d, p, k4)
    for i in range(4):
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@numba.njit(cache=True)
def _step(x, u, d, p, dt, nsub, out):
    h = dt / nsub
    cur = x.copy()
    for _ in range(nsub):
        _rk4(cur, u, d, p, h, out)
        cur[:] = out


@numba.njit(cache=True)
def _step_batch(x, u, d, p, dt, nsub, out):
    # x, u, d, p, out are 2-D with one row per trajectory
    for n in range(x.shape[0]):
        _step(x[n], u[n], d[n], p[n], dt, nsub, out[n])


@numba.njit(cache=True)
def _step_jac(x, u, d, p, dt, nsub, out, phi, gam):
    """Substepped RK4 with chained sensitivities."""
    h = dt / nsub
    cur = x.copy()
    phi_s = np.empty((4, 4))
    gam_s = np.empty((4, 3))
    tmp_phi = np.empty((4, 4))
    tmp_gam = np.empty((4, 3))
    for s in range(nsub):
        _rk4_jac(cur, u, d, p, h, out, phi_s, gam_s)
        cur[:] = out
        if s == 0:
            phi[:, :] = phi_s
            gam[:, :] = gam_s
        else:
            for i in range(4):
                for j in range(4):
                    acc = 0.0
                    for m in range(4):
                        acc += phi_s[i, m] * phi[m, j]
                    tmp_phi[i, j] = acc
                for j in range(3):
                    acc = gam_s[i, j]
                    for m in range(4):
                        acc += phi_s[i, m] * gam[m, j]
                    tmp_gam[i, j] = acc
            phi[:, :] = tmp_phi
            gam[:, :] = tmp_gam


@numba.njit(cache=True)
def _rk4_jac(x, u, d, p, dt, out, phi, gam):
    """RK4 step plus its sensitivities d(out)/dx (phi) and d(out)/du (gam)."""
    ks = np.empty((4, 4))
    kx = np.empty((4, 4, 4))
    ku = np.empty((4, 4, 3))
    jx = np.empty((4, 4))
    ju = np.empty((4, 3))
    xs = np.empty(4)
    sx = np.eye(4)  # d(stage point)/dx
    su = np.zeros((4, 3))  # d(stage point)/du
    coef = (0.0, 0.5, 0.5, 1.0)
    for s in range(4):
        if s == 0:
            for i in range(4):
                xs[i] = x[i]
        else:
            a = coef[s] * dt
            for i in range(4):
                xs[i] = x[i] + a * ks[s - 1, i]
                for j in range(4):
                    sx[i, j] = (1.0 if i == j else 0.0) + a * kx[s - 1, i, j]
                for j in range(3):
                    su[i, j] = a * ku[s - 1, i, j]
        _rhs_jac(xs, u, d, p, ks[s], jx, ju)
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for m in range(4):
                    acc += jx[i, m] * sx[m, j]
                kx[s, i, j] = acc
            for j in range(3):
                acc = ju[i, j]
                for m in range(4):
                    acc += jx[i, m] * su[m, j]
                ku[s, i, j] = acc
    w = (1.0, 2.0, 2.0, 1.0)
    for i in range(4):
        acc = 0.0
        for s in range(4):
            acc += w[s] * ks[s, i]
        out[i] = x[i] + dt / 6.0 * acc
        for j in range(4):
            acc = 0.0
            for s in range(4):
                acc += w[s] * kx[s, i, j]
            phi[i, j] = (1.0 if i == j else 0.0) + dt / 6.0 * acc
        for j in range(3):
            acc = 0.0
            for s in range(4):
                acc += w[s] * ku[s, i, j]
            gam[i, j] = dt / 6.0 * acc


# ---------------------------------------------------------------------------
# public model functions


def _vec(v, n: int) -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"expected shape ({n},), got {arr.shape}")
    return arr


def _check_finite(v: np.ndarray) -> np.ndarray:
    bad = ~np.isfinite(v)
    if bad.any():
        raise ModelEvaluationError(int(np.flatnonzero(bad)[0]))
    return v


def ode_rhs(x, u, d, p=NOMINAL_PARAMS) -> np.ndarray:
    """Continuous-time derivative dx/dt of the four-state model."""
    out = np.empty(NX)
    _rhs(_vec(x, NX), _vec(u, NU), _vec(d, ND), _vec(p, NP), out)
    return _check_finite(out)


def rhs_jacobians(x, u, d, p=NOMINAL_PARAMS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(f, df/dx, df/du)``."""
    f, jx, ju = np.empty(NX), np.empty((NX, NX)), np.empty((NX, NU))
    _rhs_jac(_vec(x, NX), _vec(u, NU), _vec(d, ND), _vec(p, NP), f, jx, ju)
    return _check_finite(f), jx, ju


def rk4(rhs: Callable, x, u, d, p, dt: float) -> np.ndarray:
    """Generic classical RK4 step for an arbitrary ``rhs(x, u, d, p)``."""
    x = np.asarray(x, dtype=float)
    k1 = rhs(x, u, d, p)
    k2 = rhs(x + 0.5 * dt * k1, u, d, p)
    k3 = rhs(x + 0.5 * dt * k2, u, d, p)
    k4 = rhs(x + dt * k3, u, d, p)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_step(
    x, u, d, p=NOMINAL_PARAMS, dt: float = DT, substeps: int = SUBSTEPS, rhs: Callable | None = None
) -> np.ndarray:
    """Advance the state over one zero-order-hold sample of length ``dt``.

    The sample is covered by ``substeps`` equal RK4 steps. ``rhs`` replaces the
    greenhouse model (used for test systems); by default the compiled model
    kernel is used.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if rhs is not None:
        h = dt / substeps
        for _ in range(substeps):
            x = rk4(rhs, x, u, d, p, h)
        return x
    out = np.empty(NX)
    _step(_vec(x, NX), _vec(u, NU), _vec(d, ND), _vec(p, NP), float(dt), int(substeps), out)
    return _check_finite(out)


def rk4_step_batch(x, u, d, p, dt: float = DT) -> np.ndarray:
    """Row-wise RK4 step for ``(n, 4)`` states; ``p`` may be ``(22,)`` or ``(n, 22)``."""
    x = np.ascontiguousarray(x, dtype=float)
    n = x.shape[0]
    u = np.ascontiguousarray(np.broadcast_to(u, (n, NU)), dtype=float)
    d = np.ascontiguousarray(np.broadcast_to(d, (n, ND)), dtype=float)
    p = np.ascontiguousarray(np.broadcast_to(p, (n, NP)), dtype=float)
    out = np.empty_like(x)
    _step_batch(x, u, d, p, float(dt), SUBSTEPS, out)
    return out


def rk4_step_jac(x, u, d, p=NOMINAL_PARAMS, dt: float = DT):
    """Sample step with its sensitivities ``(x_next, dx_next/dx, dx_next/du)``."""
    out, phi, gam = np.empty(NX), np.empty((NX, NX)), np.empty((NX, NU))
    _step_jac(_vec(x, NX), _vec(u, NU), _vec(d, ND), _vec(p, NP), float(dt), SUBSTEPS, out, phi, gam)
    return _check_finite(out), phi, gam


def simulate(x0, inputs, disturbances, p=NOMINAL_PARAMS, dt: float = DT) -> np.ndarray:
    """Open-loop simulation; returns states ``x(1..n)`` for ``n`` inputs."""
    x = _vec(x0, NX).copy()
    states = np.empty((len(inputs), NX))
    for i, (u, d) in enumerate(zip(inputs, disturbances)):
        x = rk4_step(x, u, d, p, dt)
        states[i] = x
    return states


# ---------------------------------------------------------------------------
# output conversion


def co2_ppm_factor(temp):
    """ppm per (kg m^-3) of CO2 at air temperature ``temp`` [C]."""
    return GAS_CONSTANT * (temp + KELVIN) / (PRESSURE * CO2_MOLAR_MASS) * 1e6


def saturation_vapour_density(temp):
    """Saturation water vapour density [kg m^-3] at ``temp`` [C]."""
    return SAT_SCALE * np.exp(SAT_A * temp / (temp + SAT_B)) / (GAS_CONSTANT * (temp + KELVIN))


def co2_density_to_ppm(dens, temp):
    return co2_ppm_factor(temp) * dens


def ppm_to_co2_density(ppm, temp):
    return ppm / co2_ppm_factor(temp)


def vapour_density_to_rh(dens, temp):
    return 100.0 * dens / saturation_vapour_density(temp)


def rh_to_vapour_density(rh, temp):
    return rh / 100.0 * saturation_vapour_density(temp)


def outputs(x) -> np.ndarray:
    """Unchecked vectorized output map over the last axis, ``y`` in (kg m^-2, ppm, C, %)."""
    x = np.asarray(x, dtype=float)
    y = np.empty_like(x)
    y[..., 0] = x[..., 0]
    y[..., 1] = co2_density_to_ppm(x[..., 1], x[..., 2])
    y[..., 2] = x[..., 2]
    y[..., 3] = vapour_density_to_rh(x[..., 3], x[..., 2])
    return y


def output_map(x) -> Output:
    x = _vec(x, NX)
    lo, hi = TEMP_RANGE
    if not lo <= x[2] <= hi:
        raise UnitConversionError(f"temperature {x[2]} C outside the convertible range {TEMP_RANGE}")
    return Output(*(float(v) for v in outputs(x)))


# ---------------------------------------------------------------------------
# weather


@dataclass
class DisturbanceSeries:
    """Weather records on a uniform 30-minute grid, row ``i`` is step ``start + i``."""

    values: np.ndarray
    start: int = 0
    dt: float = DT

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != ND:
            raise WeatherError(f"weather must be an (n, {ND}) array, got {self.values.shape}")
        for col in (0, 1, 3):
            if (self.values[:, col] < 0).any():
                row = int(np.flatnonzero(self.values[:, col] < 0)[0])
                raise WeatherError(f"negative value in column d{col + 1} at row {row}")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, k):
        return self.values[k]

    def window(self, k: int, n: int) -> np.ndarray:
        if k < 0 or k + n > len(self.values):
            raise WeatherError(f"window [{k}, {k + n}) outside series of length {len(self.values)}")
        return self.values[k : k + n]

    def require(self, length: int) -> None:
        if len(self) < length:
            raise WeatherError(f"weather series holds {len(self)} records, {length} required")


def load_weather(path: str | Path, start_index: int = 0, length: int | None = None) -> DisturbanceSeries:
    """Read a ``k,d1,d2,d3,d4`` CSV on a contiguous 30-minute grid."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["k", "d1", "d2", "d3", "d4"]:
            raise WeatherError(f"expected header k,d1,d2,d3,d4, got {','.join(header)}")
        prev_k = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise WeatherError(f"row {lineno}: expected 5 fields, got {len(row)}")
            try:
                k = int(row[0])
                vals = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise WeatherError(f"row {lineno}: {exc}") from None
            if prev_k is not None and k != prev_k + 1:
                raise WeatherError(f"row {lineno}: gap in time index, k jumps from {prev_k} to {k}")
            if not all(math.isfinite(v) for v in vals):
                raise WeatherError(f"row {lineno}: non-finite value")
            for col in (0, 1, 3):
                if vals[col] < 0:
                    raise WeatherError(f"row {lineno}: negative value in column d{col + 1}")
            prev_k = k
            rows.append(vals)
    if not rows:
        raise WeatherError("weather file holds no records")
    values = np.array(rows)[start_index:]
    if length is not None:
        if len(values) < length:
            raise WeatherError(f"weather file holds {len(values)} records after offset, {length} required")
    return DisturbanceSeries(values, start=start_index)


def write_weather(series: DisturbanceSeries, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "d1", "d2", "d3", "d4"])
        for i, row in enumerate(series.values):
            w.writerow([series.start + i, *(repr(float(v)) for v in row)])


def synth_weather(seed: int, length: int) -> DisturbanceSeries:
    """Deterministic synthetic winter weather.

    With ``h`` the hour of day (step ``k`` is ``k/2`` hours after midnight) and
    day index ``n``:

    * ``d1 = A_n * max(0, sin(pi * (h - 8) / 9))`` W m^-2: daylight 08:00-17:00,
      peak ``A_n = 250 * (1 + 0.4 * U(-1, 1))``;
    * ``d3 = 4 + 4 * sin(2 pi (h - 9) / 24) + m_n + 0.3 * N(0, 1)`` C, where
      ``m_n`` is a day-level random walk (step sd 0.7 C, clipped to +-5);
    * ``d2 = ppm_to_co2_density(410 + 5 * N(0, 1), d3)`` kg m^-3;
    * ``d4 = rh_to_vapour_density(85 + 5 * N(0, 1) clipped to [60, 98], d3)``.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = np.random.default_rng(seed)
    n_days = -(-length // STEPS_PER_DAY)
    amp = 250.0 * (1.0 + 0.4 * rng.uniform(-1.0, 1.0, n_days))
    mean_shift = np.clip(np.cumsum(0.7 * rng.standard_normal(n_days)), -5.0, 5.0)
    k = np.arange(length)
    day = k // STEPS_PER_DAY
    hour = (k % STEPS_PER_DAY) / 2.0
    d1 = amp[day] * np.maximum(0.0, np.sin(np.pi * (hour - 8.0) / 9.0))
    d1[(hour <= 8.0) | (hour >= 17.0)] = 0.0
    d3 = 4.0 + 4.0 * np.sin(2.0 * np.pi * (hour - 9.0) / 24.0) + mean_shift[day]
    d3 = d3 + 0.3 * rng.standard_normal(length)
    d2 = ppm_to_co2_density(410.0 + 5.0 * rng.standard_normal(length), d3)
    rh = np.clip(85.0 + 5.0 * rng.standard_normal(length), 60.0, 98.0)
    d4 = rh_to_vapour_density(rh, d3)
    return DisturbanceSeries(np.column_stack([d1, d2, d3, d4]))
