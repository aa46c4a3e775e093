"""Invariant and cross-validation checks.

Each check returns a list of :class:`CheckResult` rows with a measured
value, a tolerance and a verdict.  The CLI ``validate`` command and the
acceptance tests run the same functions.
"""

from __future__ import annotations

import csv
import math
import operator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .arrivals import COX, ArrivalModel
from .filtering import (
    FROZEN,
    POST_JUMP,
    PRE_JUMP,
    GRID,
    filter_at_observations,
    integrated_compensator,
    run_filter,
)
from .model import ChainSpec, MarketMap, transition_matrix
from .oracle import OracleConfig, oracle_filter
from .simulate import TickSeries, make_rng, simulate
from .structures import StructureTable, TableError, build_table, default_grids

REPORT_COLUMNS = ("check", "metric", "value", "tolerance", "pass")

_OPS = {"<=": operator.le, "<": operator.lt, ">=": operator.ge, ">": operator.gt}


@dataclass(frozen=True)
class CheckResult:
    check: str
    metric: str
    value: float
    tolerance: str
    passed: bool

    @classmethod
    def compare(cls, check: str, metric: str, value: float, op: str, bound: float) -> "CheckResult":
        ok = bool(np.isfinite(value)) and _OPS[op](value, bound)
        return cls(check, metric, float(value), f"{op} {bound:g}", ok)

    @classmethod
    def within(cls, check: str, metric: str, value: float, lo: float, hi: float) -> "CheckResult":
        ok = bool(np.isfinite(value)) and lo <= value <= hi
        return cls(check, metric, float(value), f"in [{lo:g}, {hi:g}]", ok)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.check}.{self.metric} = {self.value:.6g} ({self.tolerance})"


def all_passed(results: list[CheckResult]) -> bool:
    return all(r.passed for r in results)


def append_report(results: list[CheckResult], path: str | Path) -> None:
    """Append rows to the CSV report, writing the header only for a new file."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(REPORT_COLUMNS)
        for r in results:
            writer.writerow([r.check, r.metric, repr(r.value), r.tolerance, str(r.passed).lower()])


# --- reference models -------------------------------------------------------------


def stock_model() -> tuple[ChainSpec, MarketMap]:
    """The two-state Cox scenario used for oracle, KS and calibration checks."""
    chain = ChainSpec([0.1, 0.4], [[-0.5, 0.5], [0.5, -0.5]], [0.5, 0.5])
    market = MarketMap([0.05, 0.05], [0.1, 0.4], [5.0, 20.0])
    return chain, market


def random_model(rng: np.random.Generator, m: int = 3) -> tuple[ChainSpec, MarketMap]:
    off = rng.uniform(0.1, 2.0, (m, m))
    np.fill_diagonal(off, 0.0)
    gen = off - np.diag(off.sum(axis=1))
    chain = ChainSpec(np.arange(1.0, m + 1), gen, rng.dirichlet(np.ones(m)))
    market = MarketMap(rng.uniform(-0.1, 0.1, m), rng.uniform(0.1, 0.5, m), np.zeros(m))
    return chain, market


def stock_table(chain, market, n_samples=100_000, seed=0, threads=1) -> StructureTable:
    t_grid, u_grid = default_grids(market, ArrivalModel.cox())
    return build_table(chain, market, t_grid, u_grid, n_samples, seed, threads)


# --- checks -------------------------------------------------------------------------


def check_table_digest(table: StructureTable, chain: ChainSpec, market: MarketMap, arrivals: ArrivalModel):
    try:
        table.check_model(chain, arrivals.table_market(market))
        ok = 1.0
    except TableError:
        ok = 0.0
    return [CheckResult.compare("table_digest", "matches_model", ok, ">=", 1.0)]


def check_poisson_reduction(n_models: int = 20, horizon: float = 10.0, seed: int = 0,
                            grid_dt: float = 0.01, tol: float = 1e-6):
    """Between arrivals of a constant-rate law the filter is forward Kolmogorov.

    Runs the default filter with no ticks over ``horizon`` for random
    3-state models and compares every grid posterior with ``pi_0 P(t)``.
    """
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        chain, market = random_model(rng)
        arrivals = ArrivalModel.poisson_const(rng.uniform(1.0, 20.0))
        empty = TickSeries([0.0], [0.0])
        traj = run_filter(empty, chain, market, None, arrivals, output_grid_dt=grid_dt, horizon=horizon)
        ts, ps = traj.select(GRID)
        exact = np.array([chain.initial_dist @ transition_matrix(chain, t) for t in ts])
        worst = max(worst, float(np.abs(ps - exact).sum(axis=1).max()))
    return [CheckResult.compare("poisson_reduction", "max_l1", worst, "<=", tol)]


def check_poisson_reduction_frozen(n_models: int = 20, horizon: float = 10.0, seed: int = 0,
                                   tol: float = 1e-6):
    """Same reduction for the frozen-coefficient form, over simulated ticks.

    Each pre-jump posterior must equal ``pi_k P(tau_{k+1} - tau_k)``.
    """
    rng = make_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        chain, market = random_model(rng)
        arrivals = ArrivalModel.poisson_const(rng.uniform(1.0, 20.0))
        sim = simulate(chain, market, arrivals, horizon, int(rng.integers(2**32)))
        # jump updates need a table; the gaps under test do not use it
        t_grid, u_grid = default_grids(market, arrivals, n_t=32, n_z=129)
        longest = float(np.diff(sim.ticks.tau).max(initial=0.0))
        t_grid = np.geomspace(t_grid[0], max(t_grid[-1], longest), t_grid.size)
        table = build_table(chain, market, t_grid, u_grid, 2_000, int(rng.integers(2**32)))
        traj = run_filter(sim.ticks, chain, market, table, arrivals, form=FROZEN)
        _, pre = traj.select(PRE_JUMP)
        _, post = traj.select(POST_JUMP)
        prev = np.vstack([chain.initial_dist, post[:-1]])
        for k, dt in enumerate(np.diff(sim.ticks.tau)):
            exact = prev[k] @ transition_matrix(chain, dt)
            worst = max(worst, float(np.abs(pre[k] - exact).sum()))
    return [CheckResult.compare("poisson_reduction_frozen", "max_l1", worst, "<=", tol)]


def check_fixed_grid_separation(h: float = 0.1, n_steps: int = 100, seed: int = 0,
                                n_samples: int = 20_000, tol: float = 1e-9):
    """With equally spaced ticks the Bayes recursion alone gives the posterior.

    Compares the direct recursion with the full filter (Kolmogorov to the
    pre-jump value, then Bayes) at every tick, and the pre-jump posterior
    with ``pi_k P(h)``.
    """
    chain = ChainSpec([0.1, 0.3], [[-1.0, 1.0], [2.0, -2.0]], [0.3, 0.7])
    market = MarketMap([0.02, -0.01], [0.15, 0.45], [0.0, 0.0])
    arrivals = ArrivalModel.fixed_grid(h)
    t_grid, u_grid = default_grids(market, arrivals)
    table = build_table(chain, arrivals.table_market(market), t_grid, u_grid, n_samples, seed)
    sim = simulate(chain, market, arrivals, h * n_steps, seed)
    direct = filter_at_observations(sim.ticks, chain, market, table, arrivals)
    traj = run_filter(sim.ticks, chain, market, table, arrivals)
    _, pre = traj.select(PRE_JUMP)
    _, post = traj.select(POST_JUMP)
    p_h = transition_matrix(chain, h)
    expected_pre = direct[:-1] @ p_h
    return [
        CheckResult.compare("fixed_grid_separation", "n_ticks", float(post.shape[0]), ">=", float(n_steps)),
        CheckResult.compare("fixed_grid_separation", "max_l1_post", float(np.abs(post - direct[1:]).sum(1).max()), "<=", tol),
        CheckResult.compare("fixed_grid_separation", "max_l1_pre", float(np.abs(pre - expected_pre).sum(1).max()), "<=", tol),
    ]


def check_oracle_agreement(chain, market, table, arrivals=None, horizon: float = 20.0, seed: int = 0,
                           oracle_dt: float = 1e-3, mean_tol: float = 0.05, max_tol: float = 0.10):
    """Filter and discrete-time oracle posteriors at every observation."""
    arrivals = arrivals or ArrivalModel.cox()
    sim = simulate(chain, market, arrivals, horizon, seed)
    ours = filter_at_observations(sim.ticks, chain, market, table, arrivals)[1:]
    _, ref = oracle_filter(sim.ticks, chain, market, OracleConfig(oracle_dt), arrivals).select(POST_JUMP)
    l1 = np.abs(ours - ref).sum(axis=1)
    return [
        CheckResult.compare("oracle_agreement", "n_ticks", float(l1.size), ">", 0.0),
        CheckResult.compare("oracle_agreement", "mean_l1", float(l1.mean()) if l1.size else math.nan, "<=", mean_tol),
        CheckResult.compare("oracle_agreement", "max_l1", float(l1.max()) if l1.size else math.nan, "<=", max_tol),
    ]


def check_table_identities(rate: float = 4.0, n_samples: int = 20_000, seed: int = 0, n_se: float = 3.0):
    """Row sums of ``q_bar`` under constant intensity and ``z``-marginalization of ``q``.

    With ``n == rate`` in every state, ``sum_i q_bar_ji(t) = exp(-rate t)``
    exactly.  Integrating ``q`` over ``z`` recovers ``q_bar``; the
    tolerance is the trapezoid truncation bound plus ``n_se`` standard
    errors of the integrand.
    """
    chain = ChainSpec([0.1, 0.25, 0.5], [[-1.0, 0.6, 0.4], [0.5, -0.8, 0.3], [0.2, 0.7, -0.9]], [1 / 3] * 3)
    market = MarketMap([0.0, 0.05, -0.05], [0.1, 0.25, 0.5], [rate] * 3)
    t_grid, u_grid = default_grids(market, ArrivalModel.cox(), n_t=24, n_z=257)
    table = build_table(chain, market, t_grid, u_grid, n_samples, seed)
    rows = table.q_bar.sum(axis=1)  # (M, T)
    rows_se = np.sqrt((table.q_bar_se**2).sum(axis=1))
    target = np.exp(-rate * table.t_grid)[None, :]
    dev = np.abs(rows - target)
    z_score = float(np.max(dev / np.maximum(rows_se, 1e-300) * (dev > 1e-14)))

    du = np.diff(table.u_grid)
    weights = np.zeros(table.u_grid.size)
    weights[:-1] += du / 2
    weights[1:] += du / 2
    integral = (table.q.sum(axis=1) * weights).sum(axis=-1)  # (M, T)
    # cells share sample paths, so bound the SE by the fully correlated sum
    integral_se = (table.q_se.sum(axis=1) * weights).sum(axis=-1)
    # second-derivative bound of a mixture of Gaussians with variance >= vmin^2
    vmin2 = float(np.min(market.vol) ** 2)
    h = float(du.max())
    quad = (table.u_grid[-1] - table.u_grid[0]) * h**2 / 12.0 * rows / (vmin2 * math.sqrt(2 * math.pi * vmin2))
    # Gaussian mass beyond the grid edges for the widest state
    vmax = float(np.max(market.vol))
    mu = np.abs(market.log_drift).max() * np.sqrt(table.t_grid.max())
    edge = min(-table.u_grid[0], table.u_grid[-1]) - mu
    tail = 2.0 * stats.norm.sf(edge / vmax) * rows
    bound = quad + tail + n_se * integral_se
    ratio = np.abs(integral - table.q_bar.sum(axis=1)) / np.maximum(bound, 1e-300)
    return [
        CheckResult.compare("table_identities", "row_sum_max_se", z_score, "<=", n_se),
        CheckResult.compare("table_identities", "marginal_error_over_bound", float(ratio.max()), "<=", 1.0),
    ]


def check_time_change(chain, market, table, n_arrivals: int = 10_000, seed: int = 0, level: float = 0.01):
    """Compensator increments of Cox arrivals are unit exponentials."""
    mean_rate = float(chain.stationary_distribution() @ market.intensity)
    horizon = 1.05 * n_arrivals / mean_rate
    arrivals = ArrivalModel.cox()
    sim = simulate(chain, market, arrivals, horizon, seed)
    while sim.ticks.n_obs < n_arrivals:
        horizon *= 1.1
        sim = simulate(chain, market, arrivals, horizon, seed)
    e = integrated_compensator(sim.ticks, chain, market, table, arrivals)
    p = float(stats.kstest(e, "expon").pvalue)
    return [
        CheckResult.compare("time_change", "n_arrivals", float(e.size), ">=", float(n_arrivals)),
        CheckResult.compare("time_change", "ks_pvalue", p, ">=", level),
    ]


def reliability(p: np.ndarray, y: np.ndarray, n_bins: int = 10) -> tuple[float, np.ndarray, np.ndarray]:
    """Count-weighted least-squares slope of outcome frequency on mean forecast per decile."""
    bins = np.minimum((p * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    used = counts > 0
    mean_p = np.bincount(bins, weights=p, minlength=n_bins)[used] / counts[used]
    mean_y = np.bincount(bins, weights=y, minlength=n_bins)[used] / counts[used]
    slope = np.polyfit(mean_p, mean_y, 1, w=np.sqrt(counts[used]))[0]
    return float(slope), mean_p, mean_y


def check_calibration(chain, market, table, n_paths: int = 200, horizon: float = 10.0, seed: int = 0,
                      slope_range: tuple[float, float] = (0.8, 1.2)):
    """Reliability slope and Brier score of the posteriors against the true state."""
    arrivals = ArrivalModel.cox()
    seeds = np.random.SeedSequence(seed).generate_state(n_paths)
    probs, hits = [], []
    for s in seeds:
        sim = simulate(chain, market, arrivals, horizon, int(s))
        if sim.ticks.n_obs == 0:
            continue
        post = filter_at_observations(sim.ticks, chain, market, table, arrivals)[1:]
        truth = sim.truth.state_at(sim.ticks.tau[1:])
        probs.append(post)
        hits.append(np.eye(chain.n_states)[truth])
    p = np.vstack(probs)
    y = np.vstack(hits)
    slope, _, _ = reliability(p.ravel(), y.ravel())
    brier = float(np.mean(((p - y) ** 2).sum(axis=1)))
    baseline = float(np.mean(((chain.initial_dist[None, :] - y) ** 2).sum(axis=1)))
    return [
        CheckResult.within("calibration", "reliability_slope", slope, *slope_range),
        CheckResult.compare("calibration", "brier", brier, "<", baseline),
    ]


def run_suite(chain, market, table, arrivals, seed: int = 0, settings: dict | None = None, log=print):
    """Every check the CLI ``validate`` command runs, in a fixed order."""
    s = settings or {}
    results = check_table_digest(table, chain, market, arrivals)
    log(results[-1].line())
    if not results[0].passed:
        return results
    steps = [
        lambda: check_poisson_reduction(int(s.get("poisson_models", 20)), seed=seed),
        lambda: check_poisson_reduction_frozen(int(s.get("poisson_models", 20)), seed=seed),
        lambda: check_fixed_grid_separation(seed=seed),
    ]
    if arrivals.kind == COX:
        steps += [
            lambda: check_oracle_agreement(chain, market, table, arrivals, float(s.get("oracle_horizon", 20.0)),
                                           seed, float(s.get("oracle_dt", 1e-3))),
            lambda: check_time_change(chain, market, table, int(s.get("time_change_arrivals", 10_000)), seed),
            lambda: check_calibration(chain, market, table, int(s.get("calibration_paths", 200)),
                                      float(s.get("calibration_horizon", 10.0)), seed),
        ]
    for step in steps:
        rows = step()
        for r in rows:
            log(r.line())
        results += rows
    return results
