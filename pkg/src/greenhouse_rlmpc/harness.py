"""Experiment pipelines: RL training, terminal-cost construction and controller sweeps.

Every random stream descends from ``config.seed`` through ``SeedSequence``:
child 0 trains the agent, child 1 builds the terminal cost, child 2 yields
the parameter-draw seeds shared by all controllers of a sweep.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import controllers as ctl
from . import sac, terminal
from .config import ConfigError, ExperimentConfig, dump_config, from_dict
from .economics import BoundTable, epi
from .env import GreenhouseEnv

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["controller", "horizon", "n", "failed", "epi_mean", "epi_min", "epi_max",
                   "reward_mean", "reward_min", "reward_max"]


def pipeline_seeds(seed: int) -> dict:
    train, term, draws = np.random.SeedSequence(seed).spawn(3)
    return {"train": int(train.generate_state(1)[0]), "terminal": int(term.generate_state(1)[0]),
            "draws": draws}


def draw_seeds(cfg: ExperimentConfig) -> list[int]:
    """Parameter-draw seeds; one per draw, identical for every controller."""
    if not cfg.environment.stochastic:
        return [0]
    ss = pipeline_seeds(cfg.seed)["draws"]
    return [int(c.generate_state(1)[0]) for c in ss.spawn(cfg.environment.draws)]


def make_env(cfg: ExperimentConfig, weather=None) -> GreenhouseEnv:
    weather = weather if weather is not None else cfg.load_weather()
    e = cfg.environment
    return GreenhouseEnv(weather, cfg.prices, BoundTable(), stochastic=e.stochastic, delta=e.delta, t_f=e.t_f)


# ---------------------------------------------------------------------------
# training pipelines


def train_rl(cfg: ExperimentConfig) -> dict:
    env = make_env(cfg)
    seed = pipeline_seeds(cfg.seed)["train"]
    out = cfg.agent_dir()
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.training
    log.info("training %s agent for %d episodes (seed %d)", cfg.environment.kind, t.episodes, seed)
    res = sac.train(env, t.episodes, t.warmup, seed, t.sac, t.update_every, out / "learning_curve.csv")
    res.agent.save(out)
    info = {"agent_dir": str(out), "seed": seed, "episodes": t.episodes,
            "final_reward": res.curve[-1][1] if res.curve else None,
            "checkpoint_sha256": checkpoint_hash(out, exclude=("train.json", "learning_curve.csv"))}
    (out / "train.json").write_text(json.dumps(info, indent=2))
    return info


def checkpoint_hash(path: str | Path, exclude=()) -> str:
    """SHA-256 over the names and bytes of the files in a directory."""
    h = hashlib.sha256()
    for f in sorted(p for p in Path(path).iterdir() if p.is_file() and p.name not in exclude):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def load_agent(cfg: ExperimentConfig) -> sac.SacAgent:
    path = cfg.agent_dir()
    if not (path / "agent.json").is_file():
        raise ConfigError(f"no agent checkpoint at {path}; run train-rl first")
    return sac.SacAgent.load(path)


def load_terminal(cfg: ExperimentConfig) -> terminal.TerminalCostFn:
    path = cfg.terminal_dir()
    if not (path / "terminal_cost.json").is_file():
        raise ConfigError(f"no terminal cost at {path}; run build-terminal first")
    return terminal.TerminalCostFn.load(path)


def build_terminal(cfg: ExperimentConfig) -> dict:
    agent = load_agent(cfg)
    # the approximator is trained on the nominal model in either environment kind
    env = make_env(cfg)
    env.stochastic = False
    env.reset()
    seed = pipeline_seeds(cfg.seed)["terminal"]
    band = terminal.nominal_trajectory(agent, env, cfg.terminal.sigma)
    data = terminal.sample_rollouts(agent, band, env, cfg.terminal.samples, seed)
    out = cfg.terminal_dir()
    out.mkdir(parents=True, exist_ok=True)
    data.write_csv(out / "dataset.csv")
    fit_cfg = cfg.terminal.fit
    fn = terminal.fit_terminal_cost(data, fit_cfg, cfg.environment.t_f)
    fn.save(out)
    info = {"terminal_dir": str(out), "seed": seed, "rows": len(data), "train_rows": len(data.train_idx),
            "val_rows": len(data.val_idx), "redraws": int(data.redraws), **fn.meta,
            "dataset_sha256": hashlib.sha256((out / "dataset.csv").read_bytes()).hexdigest()}
    (out / "build.json").write_text(json.dumps(info, indent=2))
    return info


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class Cell:
    kind: str
    horizon: int
    draw: int
    seed: int

    @property
    def name(self) -> str:
        return f"{self.kind}_N{self.horizon}_d{self.draw:02d}"


def sweep_cells(cfg: ExperimentConfig) -> list[Cell]:
    seeds = draw_seeds(cfg)
    cells = []
    for kind in cfg.controllers:
        # the policy ignores the horizon: one run per draw, reported in every column
        horizons = [0] if kind == "rl" else cfg.horizons
        for h in horizons:
            cells += [Cell(kind, h, i, s) for i, s in enumerate(seeds)]
    return cells


_WORKER_CACHE: dict = {}


def _artifacts(cfg: ExperimentConfig, kind: str):
    """Weather, policy and terminal cost for ``kind``, loaded once per process."""
    need_policy, need_tc = kind != "mpc", kind in ("rlmpc", "rlmpc-vfo")
    key = (str(cfg.agent_dir()), str(cfg.terminal_dir()), need_policy, need_tc)
    if key not in _WORKER_CACHE:
        weather = cfg.load_weather()
        agent = load_agent(cfg) if need_policy else None
        tc = load_terminal(cfg) if need_tc else None
        _WORKER_CACHE[key] = (weather, agent, tc)
    return _WORKER_CACHE[key]


def run_cell(cfg: ExperimentConfig, cell: Cell):
    """Run one (controller, horizon, draw) episode; returns (cell, result or None, error text)."""
    try:
        weather, agent, tc = _artifacts(cfg, cell.kind)
        ccfg = ctl.ControllerConfig(cell.kind, cell.horizon, cfg.controller.eps, cfg.humidity_max, cfg.solver,
                                    stochastic_policy=cfg.controller.stochastic_policy)
        controller = ctl.build_controller(ccfg, cfg.prices, BoundTable(), agent, tc, seed=cell.seed)
        result = ctl.run_episode(controller, make_env(cfg, weather), cell.seed)
        result.infos = []
        return cell, result, None
    except Exception:  # recorded per cell; the sweep carries on
        return cell, None, traceback.format_exc()


def _run_cell_star(args):
    return run_cell(*args)


def _stats(v):
    v = np.asarray(v, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan, math.nan
    return float(np.mean(v)), float(np.min(v)), float(np.max(v))


def aggregate(cfg: ExperimentConfig, draws: list[dict]) -> list[dict]:
    rows = []
    for kind in cfg.controllers:
        for h in cfg.horizons:
            src_h = 0 if kind == "rl" else h
            mine = [d for d in draws if d["controller"] == kind and d["horizon"] == src_h]
            ok = [d for d in mine if d["error"] is None]
            e = _stats([d["epi"] for d in ok])
            r = _stats([d["cum_reward"] for d in ok])
            rows.append({"controller": kind, "horizon": h, "n": len(ok), "failed": len(mine) - len(ok),
                         "epi_mean": e[0], "epi_min": e[1], "epi_max": e[2],
                         "reward_mean": r[0], "reward_min": r[1], "reward_max": r[2]})
    return rows


@dataclass
class SweepOutcome:
    summary: list
    draws: list
    failures: int
    out_dir: Path


def sweep(cfg: ExperimentConfig, workers: int | None = None) -> SweepOutcome:
    """Run every cell, write per-episode logs, ``summary.csv``, ``summary.json`` and ``manifest.json``."""
    workers = workers or cfg.workers
    cells = sweep_cells(cfg)
    if any(c.kind != "mpc" for c in cells):
        load_agent(cfg)
        if any(c.kind in ("rlmpc", "rlmpc-vfo") for c in cells):
            load_terminal(cfg)
    out = Path(cfg.output_dir)
    ep_dir = out / "episodes"
    ep_dir.mkdir(parents=True, exist_ok=True)
    log.info("sweep: %d cells on %d worker(s)", len(cells), workers)
    if workers == 1:
        results = [run_cell(cfg, c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_star, [(cfg, c) for c in cells]))
    # single collector; cell order is fixed so the output does not depend on scheduling
    draws, timings = [], []
    for cell, res, err in results:
        row = {"controller": cell.kind, "horizon": cell.horizon, "draw": cell.draw, "seed": cell.seed,
               "episode": cell.name, "epi": None, "cum_reward": None, "error": err}
        if res is not None:
            res.write_csv(ep_dir / f"{cell.name}.csv")
            summary = res.summary()
            timings.append({"episode": cell.name, "wall_clock_s": summary.pop("wall_clock_s")})
            (ep_dir / f"{cell.name}.json").write_text(json.dumps(summary, indent=2))
            row.update(epi=res.epi, cum_reward=res.cum_reward)
        else:
            log.error("cell %s failed:\n%s", cell.name, err)
        draws.append(row)
    rows = aggregate(cfg, draws)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    (out / "summary.json").write_text(json.dumps({"environment": cfg.environment.kind, "summary": rows,
                                                   "draws": draws}, indent=2))
    (out / "timings.json").write_text(json.dumps(timings, indent=2))
    write_manifest(cfg, out)
    failures = sum(d["error"] is not None for d in draws)
    return SweepOutcome(rows, draws, failures, out)


def write_manifest(cfg: ExperimentConfig, out: Path) -> dict:
    seeds = pipeline_seeds(cfg.seed)
    dump_config(cfg, out / "config.yaml")
    hashed = ["summary.csv", "summary.json", "config.yaml"]
    hashed += sorted(str(p.relative_to(out)) for p in (out / "episodes").glob("*"))
    manifest = {
        "root_seed": cfg.seed,
        "train_seed": seeds["train"],
        "terminal_seed": seeds["terminal"],
        "draw_seeds": draw_seeds(cfg),
        "artifacts": {name: hashlib.sha256((out / name).read_bytes()).hexdigest() for name in hashed},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


class SummaryMismatch(AssertionError):
    pass


def validate_summary(out_dir: str | Path, tol: float = 1e-9) -> None:
    """Recompute per-draw and aggregate figures from the episode logs and compare."""
    out = Path(out_dir)
    data = json.loads((out / "summary.json").read_text())
    cfg = from_dict(yaml.safe_load((out / "config.yaml").read_text()), out)

    def close(a, b, what):
        if not abs(a - b) <= tol * max(1.0, abs(b)):
            raise SummaryMismatch(f"{what}: logged {b!r}, recomputed {a!r}")

    for d in data["draws"]:
        if d["error"] is not None:
            continue
        logged = ctl.read_episode_csv(out / "episodes" / f"{d['episode']}.csv")
        meta = json.loads((out / "episodes" / f"{d['episode']}.json").read_text())
        states = np.vstack([meta["x0"], np.column_stack([logged[f"x{i}"] for i in range(1, 5)])])
        inputs = np.column_stack([logged[f"u{i}"] for i in range(1, 4)])
        close(epi(states, inputs, cfg.prices), d["epi"], f"{d['episode']} EPI")
        close(float(np.sum(logged["reward"])), d["cum_reward"], f"{d['episode']} reward")
        close(float(-np.sum(logged["cost_econ"] + logged["cost_pen"])), d["cum_reward"], f"{d['episode']} costs")
    for a, b in zip(aggregate(cfg, data["draws"]), data["summary"]):
        for key in SUMMARY_COLUMNS[4:]:
            if not (math.isnan(a[key]) and math.isnan(b[key])):
                close(a[key], b[key], f"{b['controller']} N={b['horizon']} {key}")
        for m in ("epi", "reward"):
            lo, mean, hi = b[f"{m}_min"], b[f"{m}_mean"], b[f"{m}_max"]
            slack = tol * max(1.0, abs(mean))
            if b["n"] and not (lo - slack <= mean <= hi + slack):
                raise SummaryMismatch(f"{b['controller']} N={b['horizon']}: {m} min/mean/max out of order")
    rl = [b for b in data["summary"] if b["controller"] == "rl"]
    if any((r["reward_mean"], r["epi_mean"]) != (rl[0]["reward_mean"], rl[0]["epi_mean"]) for r in rl):
        raise SummaryMismatch("rl rows differ across horizons")
