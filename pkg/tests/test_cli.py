import json
import time

import numpy as np
import pytest
import yaml

from tickfilter.cli import main
from tickfilter.config import ConfigError, load_config
from tickfilter.model import model_digest
from tickfilter.structures import load_table

STOCK = {
    "seed": 11,
    "model": {
        "states": [0.1, 0.4],
        "generator": [[-0.5, 0.5], [0.5, -0.5]],
        "initial_dist": [0.5, 0.5],
        "drift": [0.05, 0.05],
        "vol": [0.1, 0.4],
        "intensity": [5.0, 20.0],
    },
    "arrivals": {"kind": "cox"},
    "simulation": {"horizon": 5.0, "replicates": 3},
    "table": {"n_samples": 4000, "n_t": 48, "n_z": 129},
    "filter": {"output_grid_dt": 0.1},
    "paths": {"out": "run"},
}


def write_config(tmp_path, overrides=None, name="cfg.yaml"):
    cfg = json.loads(json.dumps(STOCK))
    for section, values in (overrides or {}).items():
        if isinstance(values, dict) and isinstance(cfg.get(section), dict):
            cfg[section].update(values)
        else:
            cfg[section] = values
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_simulate_writes_replicates_and_manifest(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg) == 0
    out = tmp_path / "run"
    assert sorted(p.name for p in out.glob("tick_*.csv")) == ["tick_000.csv", "tick_001.csv", "tick_002.csv"]
    assert len(list(out.glob("truth_*.csv"))) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    loaded = load_config(cfg)
    assert manifest["seed"] == 11
    assert manifest["model_hash"] == model_digest(loaded.chain, loaded.market)
    stage = manifest["stages"]["simulate"]
    assert stage["started"] and stage["finished"]
    assert (out / "tick_000.csv").read_text().startswith("tau,x\n")
    assert (out / "truth_000.csv").read_text().startswith("start,end,state_index\n")


def test_simulate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "b") == 0
    assert run("simulate", "--config", cfg, "--out", tmp_path / "c", "--seed", 12) == 0
    for r in range(3):
        name = f"tick_{r:03d}.csv"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert (tmp_path / "a" / name).read_bytes() != (tmp_path / "c" / name).read_bytes()


@pytest.mark.parametrize(
    "overrides",
    [
        {"simulation": {"horizon": 0.0}},
        {"model": {"states": [1, 2], "generator": [[-1, 2], [1, -1]], "vol": [0.1, 0.2]}},
        {"arrivals": {"kind": "hawkes"}},
        {"filter": {"form": "other"}},
    ],
)
def test_config_errors_exit_2(tmp_path, overrides, capsys):
    cfg = write_config(tmp_path, overrides)
    assert run("simulate", "--config", cfg) == 2
    assert "config error" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    assert run("simulate", "--config", tmp_path / "missing.yaml") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed\n")
    assert run("simulate", "--config", bad) == 2
    with pytest.raises(ConfigError):
        load_config(bad)
    assert main(["nonsense"]) == 2


def test_precompute_single_state_is_fast(tmp_path, capsys):
    cfg = write_config(tmp_path, {"model": {"states": [1.0], "generator": [[0.0]], "initial_dist": [1.0],
                                            "drift": [0.0], "vol": [0.2], "intensity": [3.0]},
                                  "table": {"n_samples": 100_000, "n_t": 96, "n_z": 257}})
    start = time.perf_counter()
    assert run("precompute", "--config", cfg) == 0
    assert time.perf_counter() - start < 1.0
    out = capsys.readouterr().out
    assert "q_bar SE: max 0.000e+00" in out


def test_precompute_embeds_digest(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert run("precompute", "--config", cfg, "--csv") == 0
    loaded = load_config(cfg)
    digest = model_digest(loaded.chain, loaded.market)
    table = load_table(tmp_path / "run" / "table.bin")
    assert table.model_hash == digest
    assert digest in capsys.readouterr().out
    assert (tmp_path / "run" / "table.csv").exists()


def test_precompute_se_halves_with_four_times_samples(tmp_path):
    medians = []
    for n in (4000, 8000):
        cfg = write_config(tmp_path, {"table": {"n_samples": n}, "paths": {"out": f"run{n}"}}, f"c{n}.yaml")
        assert run("precompute", "--config", cfg) == 0
        manifest = json.loads((tmp_path / f"run{n}" / "manifest.json").read_text())
        medians.append(manifest["stages"]["precompute"]["q_bar_se_median"])
    assert medians[1] / medians[0] == pytest.approx(1 / np.sqrt(2), rel=0.1)


def test_table_independent_of_threads(tmp_path):
    cfg = write_config(tmp_path)
    assert run("precompute", "--config", cfg, "--out", tmp_path / "t1", "--threads", 1) == 0
    assert run("precompute", "--config", cfg, "--out", tmp_path / "t2", "--threads", 2) == 0
    assert (tmp_path / "t1" / "table.bin").read_bytes() == (tmp_path / "t2" / "table.bin").read_bytes()


def test_filter_row_counts_and_determinism(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg) == 0
    assert run("precompute", "--config", cfg) == 0
    assert run("filter", "--config", cfg) == 0
    out = tmp_path / "run"
    first = {p.name: p.read_bytes() for p in out.glob("traj_*.csv")}
    assert len(first) == 3
    for r in range(3):
        n_ticks = len((out / f"tick_{r:03d}.csv").read_text().splitlines()) - 2
        rows = (out / f"traj_{r:03d}.csv").read_text().splitlines()
        assert rows[0] == "t,event,pi_1,pi_2"
        assert len(rows) - 1 == 51 + 2 * n_ticks
    assert run("filter", "--config", cfg) == 0
    assert {p.name: p.read_bytes() for p in out.glob("traj_*.csv")} == first
    assert run("report", "--config", cfg) == 0
    assert "MAP accuracy" in (out / "report.txt").read_text()


def test_filter_external_duplicate_tau(tmp_path, capsys):
    ticks = tmp_path / "ext.csv"
    ticks.write_text("tau,x\n0,0\n0.1,0.01\n0.2,0.0\n0.2,0.02\n")
    cfg = write_config(tmp_path, {"paths": {"out": "run", "ticks": "ext.csv"}})
    assert run("precompute", "--config", cfg) == 0
    assert run("filter", "--config", cfg) == 3
    assert "row 4: duplicate" in capsys.readouterr().err
    ticks.write_text("tau,x\n0,0\n0.1,0.01\n0.25,0.0\n")
    assert run("filter", "--config", cfg) == 0
    rows = (tmp_path / "run" / "traj_ext.csv").read_text().splitlines()
    assert len(rows) - 1 == 3 + 2 * 2


def test_filter_needs_table(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg) == 0
    assert run("filter", "--config", cfg) == 2


def test_filter_rejects_stale_table(tmp_path, capsys):
    other = write_config(tmp_path, {"model": {"intensity": [5.0, 25.0]}, "paths": {"out": "other"}}, "o.yaml")
    assert run("precompute", "--config", other) == 0
    cfg = write_config(tmp_path, {"paths": {"out": "run", "table": "other/table.bin"}})
    assert run("simulate", "--config", cfg) == 0
    assert run("filter", "--config", cfg) == 3
    assert "does not match" in capsys.readouterr().err


def test_stage_digest_consistency(tmp_path):
    cfg = write_config(tmp_path)
    assert run("simulate", "--config", cfg) == 0
    changed = write_config(tmp_path, {"model": {"vol": [0.1, 0.5]}}, "changed.yaml")
    assert run("precompute", "--config", changed) == 3


def test_validate_mismatched_table(tmp_path):
    other = write_config(tmp_path, {"model": {"intensity": [5.0, 25.0]}, "paths": {"out": "other"}}, "o.yaml")
    assert run("precompute", "--config", other) == 0
    cfg = write_config(tmp_path, {"paths": {"out": "run", "table": "other/table.bin"}})
    assert run("validate", "--config", cfg) == 4
    assert run("validate", "--config", cfg) == 4
    lines = (tmp_path / "run" / "validate_report.csv").read_text().splitlines()
    assert lines[0] == "check,metric,value,tolerance,pass"
    assert lines[1:] == ["table_digest,matches_model,0.0,>= 1,false"] * 2
    assert "FAILED" in (tmp_path / "run" / "validate_report.txt").read_text()


@pytest.mark.slow
def test_validate_stock_scenario_passes(tmp_path):
    cfg = write_config(tmp_path, {"table": {"n_samples": 20_000, "n_t": 96, "n_z": 257}})
    assert run("precompute", "--config", cfg) == 0
    assert run("validate", "--config", cfg) == 0
    rows = (tmp_path / "run" / "validate_report.csv").read_text().splitlines()[1:]
    checks = {r.split(",")[0] for r in rows}
    assert {"poisson_reduction", "fixed_grid_separation", "oracle_agreement", "time_change", "calibration"} <= checks
    assert all(r.endswith(",true") for r in rows)


def test_check_result_and_report(tmp_path):
    from tickfilter.validation import CheckResult, append_report, reliability

    ok = CheckResult.compare("c", "m", 0.5, "<=", 1.0)
    bad = CheckResult.within("c", "slope", 1.5, 0.8, 1.2)
    nan = CheckResult.compare("c", "n", float("nan"), "<=", 1.0)
    assert ok.passed and not bad.passed and not nan.passed
    append_report([ok], tmp_path / "r.csv")
    append_report([bad], tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines() == [
        "check,metric,value,tolerance,pass",
        "c,m,0.5,<= 1,true",
        "c,slope,1.5,\"in [0.8, 1.2]\",false",
    ]
    rng = np.random.default_rng(0)
    p = rng.uniform(size=20_000)
    slope, _, _ = reliability(p, (rng.uniform(size=p.size) < p).astype(float))
    assert slope == pytest.approx(1.0, abs=0.05)


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    cfg = write_config(tmp_path, {"simulation": {"horizon": 1.0, "replicates": 1}})
    proc = subprocess.run([sys.executable, "-m", "tickfilter", "simulate", "--config", str(cfg)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "run" / "tick_000.csv").exists()
