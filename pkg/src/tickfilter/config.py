"""Run configuration: one YAML file drives every pipeline stage.

Schema (all sections except ``model`` optional)::

    seed: 12345                   # top-level seed; all randomness derives from it
    model:
      states: [0.1, 0.4]          # numeric labels a_i
      generator: [[-0.5, 0.5], [0.5, -0.5]]
      initial_dist: [0.5, 0.5]
      drift: [0.05, 0.05]         # m(a_i)
      vol: [0.1, 0.4]             # v(a_i) > 0
      intensity: [5.0, 20.0]      # n(a_i), used by cox arrivals
    arrivals: {kind: cox}         # or {kind: poisson_const, rate: 10} / {kind: fixed_grid, step: 0.1}
    simulation: {horizon: 20.0, replicates: 1, x0: 0.0}
    table: {n_samples: 100000, n_t: 96, n_z: 257, t_min: null, t_max: null}
    filter: {output_grid_dt: 0.1, dt_max: 0.001, form: feedback}
    validate: {oracle_dt: 0.001, poisson_models: 20, calibration_paths: 200,
               calibration_horizon: 10.0, time_change_arrivals: 10000}
    paths: {out: run, ticks: null, table: null}   # relative to the config file
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .arrivals import ArrivalModel
from .model import ChainSpec, InvalidSpecError, MarketMap, check_compatible


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    chain: ChainSpec
    market: MarketMap
    arrivals: ArrivalModel
    seed: int = 0
    horizon: float = 20.0
    replicates: int = 1
    x0: float = 0.0
    n_samples: int = 100_000
    n_t: int = 96
    n_z: int = 257
    t_min: float | None = None
    t_max: float | None = None
    output_grid_dt: float | None = 0.1
    dt_max: float = 1e-3
    form: str = "feedback"
    validate: dict[str, Any] = field(default_factory=dict)
    out: Path = Path("run")
    ticks: Path | None = None
    table: Path | None = None

    def replicate_seed(self, r: int) -> int:
        return int(np.random.SeedSequence([self.seed, 1, r]).generate_state(1)[0])

    def table_seed(self) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, 2])

    def validate_seed(self) -> int:
        return int(np.random.SeedSequence([self.seed, 3]).generate_state(1)[0])


def _section(raw: dict, name: str) -> dict:
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(raw, dict) or "model" not in raw:
        raise ConfigError("config needs a 'model' section")
    model = _section(raw, "model")
    try:
        m = len(model["states"])
        chain = ChainSpec(
            model["states"],
            model["generator"],
            model.get("initial_dist", [1.0 / m] * m),
        )
        market = MarketMap(
            model.get("drift", [0.0] * m),
            model["vol"],
            model.get("intensity", [0.0] * m),
        )
        check_compatible(chain, market)
        arr = _section(raw, "arrivals")
        arrivals = ArrivalModel(arr.get("kind", "cox"), arr.get("rate"), arr.get("step"))
    except KeyError as exc:
        raise ConfigError(f"missing model key {exc}") from None
    except (InvalidSpecError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None

    sim = _section(raw, "simulation")
    table = _section(raw, "table")
    flt = _section(raw, "filter")
    paths = _section(raw, "paths")

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    cfg = RunConfig(
        chain=chain,
        market=market,
        arrivals=arrivals,
        seed=int(raw.get("seed", 0)),
        horizon=float(sim.get("horizon", 20.0)),
        replicates=int(sim.get("replicates", 1)),
        x0=float(sim.get("x0", 0.0)),
        n_samples=int(table.get("n_samples", 100_000)),
        n_t=int(table.get("n_t", 96)),
        n_z=int(table.get("n_z", 257)),
        t_min=table.get("t_min"),
        t_max=table.get("t_max"),
        output_grid_dt=flt.get("output_grid_dt", 0.1),
        dt_max=float(flt.get("dt_max", 1e-3)),
        form=str(flt.get("form", "feedback")),
        validate=_section(raw, "validate"),
        out=resolve(paths.get("out", "run")),
        ticks=resolve(paths.get("ticks")),
        table=resolve(paths.get("table")),
    )
    if not cfg.horizon > 0:
        raise ConfigError(f"simulation.horizon must be > 0, got {cfg.horizon}")
    if cfg.replicates < 1:
        raise ConfigError("simulation.replicates must be >= 1")
    if cfg.n_samples < 1 or cfg.n_t < 1 or cfg.n_z < 2:
        raise ConfigError("table sizes must be positive (n_z >= 2)")
    if not cfg.dt_max > 0:
        raise ConfigError("filter.dt_max must be > 0")
    if cfg.form not in ("feedback", "frozen"):
        raise ConfigError("filter.form must be 'feedback' or 'frozen'")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(raw, path.parent)
