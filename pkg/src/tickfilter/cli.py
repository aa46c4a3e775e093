"""Command-line pipeline: ``simulate``, ``precompute``, ``filter``, ``validate``, ``report``.

Every stage reads the same YAML config (see :mod:`tickfilter.config`) and
works inside one run directory::

    manifest.json                 seed, model digest, per-stage metadata
    tick_000.csv, truth_000.csv   simulated replicates
    table.bin                     structure table (table.csv with --csv)
    traj_000.csv                  filter output per tick file
    validate_report.csv/.txt      appended on every validate run
    report.txt                    written by ``report``

Exit codes: 0 ok, 2 config error, 3 data error, 4 validation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .arrivals import POISSON
from .config import ConfigError, RunConfig, load_config
from .filtering import POST_JUMP, FilterError, read_trajectory, run_filter
from .model import InvalidSpecError, model_digest
from .simulate import RangeError, TickDataError, read_ticks, read_truth, simulate, write_ticks, write_truth
from .structures import (
    InvalidGridError,
    TableError,
    build_table,
    default_grids,
    export_table_csv,
    load_table,
    save_table,
)
from .validation import all_passed, append_report, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VALIDATION = 0, 2, 3, 4

MANIFEST = "manifest.json"
TABLE_FILE = "table.bin"
REPORT_CSV = "validate_report.csv"
REPORT_TXT = "validate_report.txt"


class DataError(RuntimeError):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / MANIFEST
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: unreadable manifest: {exc}") from None


def _update_manifest(run_dir: Path, cfg: RunConfig, stage: str, info: dict) -> None:
    manifest = _read_manifest(run_dir)
    digest = model_digest(cfg.chain, cfg.market)
    if manifest.get("model_hash", digest) != digest:
        raise DataError(
            f"run directory {run_dir} belongs to model {manifest['model_hash'][:12]}, config is {digest[:12]}"
        )
    manifest.update(seed=cfg.seed, model_hash=digest, arrivals=cfg.arrivals.to_dict())
    manifest.setdefault("stages", {})[stage] = info
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _run_dir(cfg: RunConfig, create: bool) -> Path:
    run_dir = Path(cfg.out)
    if create:
        run_dir.mkdir(parents=True, exist_ok=True)
    elif not run_dir.is_dir():
        raise ConfigError(f"run directory {run_dir} does not exist")
    return run_dir


def _table_path(cfg: RunConfig, run_dir: Path) -> Path:
    return Path(cfg.table) if cfg.table is not None else run_dir / TABLE_FILE


def _load_table_for(cfg: RunConfig, run_dir: Path, required: bool):
    path = _table_path(cfg, run_dir)
    if not path.exists():
        if required:
            raise ConfigError(f"structure table {path} not found; run 'precompute' first")
        return None
    return load_table(path)


# --- subcommands ----------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, threads: int = 1) -> int:
    run_dir = _run_dir(cfg, create=True)
    started = _now()
    files, seeds = [], []
    for r in range(cfg.replicates):
        seed = cfg.replicate_seed(r)
        out = simulate(cfg.chain, cfg.market, cfg.arrivals, cfg.horizon, seed, cfg.x0)
        tick_path = run_dir / f"tick_{r:03d}.csv"
        write_ticks(tick_path, out.ticks)
        write_truth(run_dir / f"truth_{r:03d}.csv", out.truth)
        files.append({"ticks": tick_path.name, "truth": f"truth_{r:03d}.csv",
                      "n_obs": out.ticks.n_obs, "sha256": _sha256(tick_path)})
        seeds.append(seed)
        print(f"replicate {r}: {out.ticks.n_obs} ticks, {out.truth.n_jumps} regime changes -> {tick_path}")
    _update_manifest(run_dir, cfg, "simulate", {
        "horizon": cfg.horizon, "replicates": cfg.replicates, "replicate_seeds": seeds,
        "files": files, "started": started, "finished": _now(),
    })
    return EXIT_OK


def cmd_precompute(cfg: RunConfig, threads: int = 1, csv: bool = False) -> int:
    run_dir = _run_dir(cfg, create=True)
    started = _now()
    t_grid, u_grid = default_grids(cfg.market, cfg.arrivals, cfg.n_t, cfg.n_z, cfg.t_min, cfg.t_max)
    table_market = cfg.arrivals.table_market(cfg.market)
    table = build_table(cfg.chain, table_market, t_grid, u_grid, cfg.n_samples, cfg.table_seed(), threads)
    path = _table_path(cfg, run_dir)
    save_table(table, path)
    if csv:
        export_table_csv(table, path.with_suffix(".csv"))
    print(f"table: {cfg.chain.n_states} states, {t_grid.size} t nodes in [{t_grid[0]:.4g}, {t_grid[-1]:.4g}], "
          f"{u_grid.size} u nodes, {cfg.n_samples} paths per start state")
    print(f"q_bar SE: max {table.q_bar_se.max():.3e}, median {np.median(table.q_bar_se):.3e}")
    print(f"q SE:     max {table.q_se.max():.3e}, median {np.median(table.q_se):.3e}")
    for j in range(cfg.chain.n_states):
        print(f"  start state {j}: max q_bar SE {table.q_bar_se[j].max():.3e}, max q SE {table.q_se[j].max():.3e}")
    print(f"model digest {table.model_hash}")
    _update_manifest(run_dir, cfg, "precompute", {
        "table": path.name, "table_model_hash": table.model_hash, "sha256": _sha256(path),
        "n_samples": cfg.n_samples, "threads": threads,
        "q_bar_se_max": float(table.q_bar_se.max()), "q_se_max": float(table.q_se.max()),
        "q_bar_se_median": float(np.median(table.q_bar_se)), "q_se_median": float(np.median(table.q_se)),
        "started": started, "finished": _now(),
    })
    return EXIT_OK


def _tick_inputs(cfg: RunConfig, run_dir: Path) -> list[tuple[Path, Path, float | None]]:
    """(tick file, trajectory file, horizon) triples for the filter stage."""
    if cfg.ticks is not None:
        src = Path(cfg.ticks)
        if not src.exists():
            raise ConfigError(f"tick file {src} not found")
        return [(src, run_dir / f"traj_{src.stem}.csv", None)]
    found = sorted(run_dir.glob("tick_*.csv"))
    if not found:
        raise ConfigError(f"no tick_*.csv files in {run_dir}; run 'simulate' or set paths.ticks")
    manifest = _read_manifest(run_dir)
    digest = model_digest(cfg.chain, cfg.market)
    if manifest.get("model_hash", digest) != digest:
        raise DataError(f"ticks in {run_dir} were simulated from a different model")
    return [(p, run_dir / p.name.replace("tick_", "traj_", 1), cfg.horizon) for p in found]


def cmd_filter(cfg: RunConfig, threads: int = 1) -> int:
    run_dir = _run_dir(cfg, create=True)
    inputs = _tick_inputs(cfg, run_dir)
    table = _load_table_for(cfg, run_dir, required=cfg.arrivals.kind != POISSON)
    started = _now()
    outputs = []
    for src, dst, horizon in inputs:
        ticks = read_ticks(src)
        if horizon is not None and horizon < ticks.tau[-1]:
            horizon = None
        try:
            traj = run_filter(ticks, cfg.chain, cfg.market, table, cfg.arrivals, cfg.output_grid_dt,
                              horizon, cfg.dt_max, cfg.form)
        except (FilterError, TableError, ValueError) as exc:
            raise DataError(f"{src}: {exc}") from None
        traj.to_csv(dst)
        outputs.append({"ticks": str(src), "trajectory": dst.name, "rows": len(traj), "sha256": _sha256(dst)})
        print(f"{src.name}: {ticks.n_obs} ticks -> {dst} ({len(traj)} rows)")
    _update_manifest(run_dir, cfg, "filter", {
        "form": cfg.form, "output_grid_dt": cfg.output_grid_dt, "outputs": outputs,
        "started": started, "finished": _now(),
    })
    return EXIT_OK


def cmd_validate(cfg: RunConfig, threads: int = 1) -> int:
    run_dir = _run_dir(cfg, create=True)
    table = _load_table_for(cfg, run_dir, required=False)
    if table is None:
        print(f"no table at {_table_path(cfg, run_dir)}; building one in memory")
        t_grid, u_grid = default_grids(cfg.market, cfg.arrivals, cfg.n_t, cfg.n_z, cfg.t_min, cfg.t_max)
        table = build_table(cfg.chain, cfg.arrivals.table_market(cfg.market), t_grid, u_grid,
                            cfg.n_samples, cfg.table_seed(), threads)
    started = _now()
    lines: list[str] = []

    def log(line: str) -> None:
        print(line)
        lines.append(line)

    results = run_suite(cfg.chain, cfg.market, table, cfg.arrivals, cfg.validate_seed(), cfg.validate, log)
    ok = all_passed(results)
    append_report(results, run_dir / REPORT_CSV)
    with (run_dir / REPORT_TXT).open("a") as fh:
        fh.write(f"# validate run {started}\n" + "\n".join(lines) + f"\n{'ALL PASS' if ok else 'FAILED'}\n")
    log(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    _update_manifest(run_dir, cfg, "validate", {
        "checks": len(results), "passed": int(sum(r.passed for r in results)),
        "started": started, "finished": _now(),
    })
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_report(cfg: RunConfig, threads: int = 1) -> int:
    """Summarize a run directory: manifest, per-trajectory accuracy, latest validation."""
    run_dir = _run_dir(cfg, create=False)
    manifest = _read_manifest(run_dir)
    out = [f"run directory: {run_dir}",
           f"model digest: {manifest.get('model_hash', model_digest(cfg.chain, cfg.market))}",
           f"seed: {manifest.get('seed', cfg.seed)}",
           f"arrivals: {json.dumps(manifest.get('arrivals', cfg.arrivals.to_dict()))}",
           f"stages: {', '.join(sorted(manifest.get('stages', {}))) or 'none'}"]
    for traj_path in sorted(run_dir.glob("traj_*.csv")):
        traj = read_trajectory(traj_path)
        times, post = traj.select(POST_JUMP)
        line = f"{traj_path.name}: {len(traj)} rows, {times.size} ticks"
        if times.size:
            line += ", final posterior [" + ", ".join(f"{p:.4f}" for p in post[-1]) + "]"
        truth_path = run_dir / traj_path.name.replace("traj_", "truth_", 1)
        if times.size and truth_path.exists():
            truth = read_truth(truth_path)
            states = truth.state_at(np.minimum(times, truth.horizon))
            hits = np.eye(post.shape[1])[states]
            line += (f", MAP accuracy {np.mean(post.argmax(axis=1) == states):.3f}"
                     f", Brier {np.mean(((post - hits) ** 2).sum(axis=1)):.4f}")
        out.append(line)
    report_csv = run_dir / REPORT_CSV
    if report_csv.exists():
        rows = report_csv.read_text().splitlines()[1:]
        failed = [r for r in rows if r.endswith(",false")]
        out.append(f"validation rows recorded: {len(rows)}, failed: {len(failed)}")
        out.extend(f"  FAIL {r}" for r in failed)
    text = "\n".join(out) + "\n"
    (run_dir / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "precompute": cmd_precompute,
    "filter": cmd_filter,
    "validate": cmd_validate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run configuration")
    common.add_argument("--out", help="run directory (overrides paths.out)")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for table builds")
    parser = argparse.ArgumentParser(prog="tickfilter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).splitlines()[0])
        if name == "precompute":
            p.add_argument("--csv", action="store_true", help="also export the table as CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = Path(args.out)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        kwargs = {"threads": args.threads}
        if args.command == "precompute":
            kwargs["csv"] = args.csv
        return COMMANDS[args.command](cfg, **kwargs)
    except (ConfigError, InvalidSpecError, InvalidGridError, RangeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TickDataError, TableError, FilterError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
