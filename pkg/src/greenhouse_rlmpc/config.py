"""Experiment configuration: a YAML document mapped onto nested dataclasses.

Schema (every key optional; defaults shown in ``data/default.yaml``)::

    output_dir: runs/default        # relative paths resolve against the config file
    seed: 0                         # root of every seed in the pipeline
    workers: 1                      # sweep worker processes
    environment:
      kind: deterministic           # or stochastic
      delta: 0.05                   # parameter spread of the stochastic draws
      draws: 30                     # parameter draws per sweep cell (stochastic only)
      t_f: 1920
    weather:
      file: bundled                 # CSV path, or "bundled"; mutually exclusive with synthetic_seed
      synthetic_seed: null
      start_index: 0
    prices:
      units: physical               # or table (coefficients applied to mg and J)
    controllers: [mpc, rlmpc, rlmpc-vfo, rl]
    horizons: [2, 4, 6, 8, 12, 16]  # steps of 30 minutes
    controller:
      eps: 0.1
      humidity_max: null            # null: 80 deterministic, 78 stochastic
      stochastic_policy: false
    solver: {...}                   # fields of nlp.SolverOptions
    training:
      episodes: 100
      warmup: 9
      update_every: 1
      sac: {...}                    # fields of sac.SacConfig
    terminal:
      samples: 1000
      sigma: 0.5
      fit: {...}                    # fields of terminal.FitConfig
    artifacts:
      agent: null                   # checkpoint directory; null: <output_dir>/agent-<kind>
      terminal: null                # terminal cost directory; null: <output_dir>/terminal-<kind>
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from . import plant
from .controllers import KINDS
from .economics import PHYSICAL_UNITS, PriceTable
from .nlp import SolverOptions
from .plant import T_F, DisturbanceSeries, WeatherError
from .sac import SacConfig
from .terminal import FitConfig

BUNDLED = "bundled"
DEFAULT_HORIZONS = (2, 4, 6, 8, 12, 16)


class ConfigError(ValueError):
    """Invalid or unresolvable experiment configuration."""


def data_path(name: str) -> Path:
    return Path(str(resources.files("greenhouse_rlmpc") / "data" / name))


@dataclass
class EnvironmentConfig:
    kind: str = "deterministic"
    delta: float = 0.05
    draws: int = 30
    t_f: int = T_F

    @property
    def stochastic(self) -> bool:
        return self.kind == "stochastic"


@dataclass
class WeatherConfig:
    file: str | None = BUNDLED
    synthetic_seed: int | None = None
    start_index: int = 0


@dataclass
class ControllerDefaults:
    eps: float = 0.1
    humidity_max: float | None = None
    stochastic_policy: bool = False


@dataclass
class TrainingConfig:
    episodes: int = 100
    warmup: int = 9
    update_every: int = 1
    sac: SacConfig = field(default_factory=SacConfig)


@dataclass
class TerminalConfig:
    samples: int = 1000
    sigma: float = 0.5
    fit: FitConfig = field(default_factory=FitConfig)


@dataclass
class ArtifactPaths:
    agent: str | None = None
    terminal: str | None = None


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1
    environment: EnvironmentConfig = field(default_factory=EnvironmentConfig)
    weather: WeatherConfig = field(default_factory=WeatherConfig)
    units: str = "physical"
    controllers: tuple = ("mpc", "rlmpc", "rlmpc-vfo", "rl")
    horizons: tuple = DEFAULT_HORIZONS
    controller: ControllerDefaults = field(default_factory=ControllerDefaults)
    solver: SolverOptions = field(default_factory=SolverOptions)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    terminal: TerminalConfig = field(default_factory=TerminalConfig)
    artifacts: ArtifactPaths = field(default_factory=ArtifactPaths)

    def validate(self) -> "ExperimentConfig":
        env = self.environment
        if env.kind not in ("deterministic", "stochastic"):
            raise ConfigError(f"environment.kind must be deterministic or stochastic, got {env.kind!r}")
        if env.draws < 1:
            raise ConfigError("environment.draws must be at least 1")
        if not 0 <= env.delta < 1:
            raise ConfigError("environment.delta must lie in [0, 1)")
        if env.t_f < 1:
            raise ConfigError("environment.t_f must be positive")
        if not self.horizons or any(int(h) < 1 for h in self.horizons):
            raise ConfigError("horizons must be a nonempty list of positive step counts")
        self.horizons = tuple(int(h) for h in self.horizons)
        unknown = [c for c in self.controllers if c not in KINDS]
        if unknown or not self.controllers:
            raise ConfigError(f"controllers must be drawn from {KINDS}, got {list(self.controllers)}")
        self.controllers = tuple(self.controllers)
        if self.units not in ("physical", "table"):
            raise ConfigError("prices.units must be physical or table")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        w = self.weather
        if (w.file is None) == (w.synthetic_seed is None):
            raise ConfigError("weather needs exactly one of file and synthetic_seed")
        if w.file is not None and w.file != BUNDLED and not Path(w.file).is_file():
            raise ConfigError(f"weather file not found: {w.file}")
        if self.training.warmup > self.training.episodes:
            raise ConfigError("training.warmup exceeds training.episodes")
        return self

    @property
    def humidity_max(self) -> float:
        if self.controller.humidity_max is not None:
            return float(self.controller.humidity_max)
        return 78.0 if self.environment.stochastic else 80.0

    @property
    def prices(self) -> PriceTable:
        return PriceTable(**PHYSICAL_UNITS) if self.units == "physical" else PriceTable()

    @property
    def weather_length(self) -> int:
        # the policy-appended warm start looks one step past the horizon window
        return self.environment.t_f + max(self.horizons) + 2

    def out(self, *parts) -> Path:
        return Path(self.output_dir, *parts)

    def agent_dir(self) -> Path:
        return Path(self.artifacts.agent) if self.artifacts.agent else self.out(f"agent-{self.environment.kind}")

    def terminal_dir(self) -> Path:
        if self.artifacts.terminal:
            return Path(self.artifacts.terminal)
        return self.out(f"terminal-{self.environment.kind}")

    def load_weather(self) -> DisturbanceSeries:
        w = self.weather
        n = self.weather_length
        if w.synthetic_seed is not None:
            full = plant.synth_weather(int(w.synthetic_seed), w.start_index + n)
            return DisturbanceSeries(full.values[w.start_index:], start=w.start_index)
        path = data_path("weather_synthetic.csv") if w.file == BUNDLED else Path(w.file)
        try:
            return plant.load_weather(path, w.start_index, n)
        except (OSError, WeatherError) as exc:
            raise ConfigError(f"weather: {exc}") from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["controllers"] = list(self.controllers)
        d["horizons"] = list(self.horizons)
        d["training"]["sac"]["hidden"] = list(self.training.sac.hidden)
        d["terminal"]["fit"]["hidden"] = list(self.terminal.fit.hidden)
        d["prices"] = {"units": d.pop("units")}
        return d


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key {where}.{key}")
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (ExperimentConfig, "environment"): EnvironmentConfig,
    (ExperimentConfig, "weather"): WeatherConfig,
    (ExperimentConfig, "controller"): ControllerDefaults,
    (ExperimentConfig, "solver"): SolverOptions,
    (ExperimentConfig, "training"): TrainingConfig,
    (ExperimentConfig, "terminal"): TerminalConfig,
    (ExperimentConfig, "artifacts"): ArtifactPaths,
    (TrainingConfig, "sac"): SacConfig,
    (TerminalConfig, "fit"): FitConfig,
}


def from_dict(data: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    """Build and validate a config; relative paths resolve against ``base_dir``."""
    data = dict(data or {})
    prices = data.pop("prices", None) or {}
    if set(prices) - {"units"}:
        raise ConfigError(f"unknown key prices.{sorted(set(prices) - {'units'})[0]}")
    if "units" in prices:
        data["units"] = prices["units"]
    cfg = _build(ExperimentConfig, data, "config")
    base = Path(base_dir)

    def resolve(p):
        return p if p is None or p == BUNDLED or Path(p).is_absolute() else str(base / p)

    cfg.output_dir = resolve(cfg.output_dir)
    cfg.weather.file = resolve(cfg.weather.file)
    cfg.artifacts.agent = resolve(cfg.artifacts.agent)
    cfg.artifacts.terminal = resolve(cfg.artifacts.terminal)
    return cfg.validate()


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Read a YAML config; ``None`` gives the bundled default."""
    if path is None:
        path = data_path("default.yaml")
        base = Path.cwd()
    else:
        base = Path(path).resolve().parent
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    return from_dict(data or {}, base)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
