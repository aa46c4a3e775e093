"""Ground-truth simulation of the chain, its Cox/fixed arrivals and log-prices.

All sampling is exact: the chain is piecewise constant, so arrivals are
per-segment homogeneous Poisson draws and log-price increments are Gaussian
with moments given by occupation times.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from numpy.typing import NDArray

from .arrivals import FIXED_GRID, ArrivalModel
from .model import ChainSpec, MarketMap, OccupationVector, check_compatible, model_digest

Seed = Union[int, np.random.SeedSequence, np.random.Generator]


class RangeError(ValueError):
    """Raised for times or intervals outside the simulated horizon."""


class TickDataError(ValueError):
    """Raised when tick data violates ordering or format rules."""


def make_rng(seed: Seed) -> np.random.Generator:
    """Counter-based generator (Philox) from an int or SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def spawn_streams(seed: Seed, n: int) -> list[np.random.SeedSequence]:
    if isinstance(seed, np.random.Generator):
        raise TypeError("spawn_streams needs an int or SeedSequence")
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return seed.spawn(n)


@dataclass(frozen=True, eq=False)
class PathSegmentList:
    """Piecewise-constant chain trajectory on ``[0, horizon]``."""

    states: NDArray[np.int64]
    starts: NDArray[np.float64]
    ends: NDArray[np.float64]
    horizon: float

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=np.int64)
        starts = np.asarray(self.starts, dtype=float)
        ends = np.asarray(self.ends, dtype=float)
        if not (states.size == starts.size == ends.size) or states.size == 0:
            raise ValueError("segments must be non-empty with matching lengths")
        if starts[0] != 0.0 or ends[-1] != self.horizon:
            raise ValueError("segments must cover [0, horizon]")
        if np.any(starts[1:] != ends[:-1]) or np.any(ends <= starts):
            raise ValueError("segments must be contiguous with positive length")
        if np.any(states[1:] == states[:-1]):
            raise ValueError("consecutive segments must have distinct states")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "ends", ends)

    def __len__(self) -> int:
        return self.states.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PathSegmentList):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.starts, other.starts)
            and np.array_equal(self.ends, other.ends)
        )

    @property
    def n_jumps(self) -> int:
        return self.states.size - 1

    def state_at(self, t) -> NDArray[np.int64]:
        """State index at time(s) ``t``; right-continuous."""
        idx = np.searchsorted(self.starts, np.asarray(t, dtype=float), side="right") - 1
        return self.states[np.clip(idx, 0, None)]

    def cumulative_occupation(self, t, n_states: int) -> NDArray[np.float64]:
        """Occupation times on ``[0, t]`` for each ``t``; shape ``(len(t), n_states)``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        seg_len = self.ends - self.starts
        before = np.zeros((self.states.size, n_states))
        if self.states.size > 1:
            np.add.at(before[1:], (np.arange(self.states.size - 1), self.states[:-1]), seg_len[:-1])
            before = np.cumsum(before, axis=0)
        idx = np.clip(np.searchsorted(self.starts, t, side="right") - 1, 0, None)
        out = before[idx].copy()
        out[np.arange(t.size), self.states[idx]] += t - self.starts[idx]
        return out


@dataclass(frozen=True, eq=False)
class TickSeries:
    """Observed ``(tau_k, X_k)`` with ``tau_0 = 0`` and ``X_0 = x0``."""

    tau: NDArray[np.float64]
    x: NDArray[np.float64]

    def __post_init__(self) -> None:
        tau = np.asarray(self.tau, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float).reshape(-1)
        if tau.size == 0 or tau.size != x.size:
            raise TickDataError("tick series needs matching, non-empty tau and x")
        if tau[0] != 0.0:
            raise TickDataError("first record must be tau_0 = 0")
        bad = np.flatnonzero(np.diff(tau) <= 0)
        if bad.size:
            raise TickDataError(f"tau not strictly increasing at record {bad[0] + 1}")
        if not (np.all(np.isfinite(tau)) and np.all(np.isfinite(x))):
            raise TickDataError("tick series has non-finite values")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "x", x)

    @property
    def x0(self) -> float:
        return float(self.x[0])

    @property
    def n_obs(self) -> int:
        """Number of observations after ``tau_0``."""
        return self.tau.size - 1

    def count(self, t: float) -> int:
        """Counting process ``N_t``: observations in ``(0, t]``."""
        return int(np.searchsorted(self.tau, t, side="right")) - 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TickSeries):
            return NotImplemented
        return np.array_equal(self.tau, other.tau) and np.array_equal(self.x, other.x)


@dataclass(frozen=True)
class SimOutput:
    ticks: TickSeries
    truth: PathSegmentList
    seed: int
    model_hash: str


def simulate_chain(chain: ChainSpec, horizon: float, rng_seed: Seed) -> PathSegmentList:
    """Exact CTMC path: exponential holding times, jumps proportional to off-diagonal rates."""
    if not horizon > 0:
        raise RangeError(f"horizon must be > 0, got {horizon}")
    rng = make_rng(rng_seed)
    gen = chain.generator
    state = int(rng.choice(chain.n_states, p=chain.initial_dist))
    states, starts = [state], [0.0]
    t = 0.0
    while True:
        rate = -gen[state, state]
        if rate <= 0:
            break
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            break
        weights = gen[state].copy()
        weights[state] = 0.0
        state = int(rng.choice(chain.n_states, p=weights / weights.sum()))
        states.append(state)
        starts.append(t)
    ends = starts[1:] + [float(horizon)]
    return PathSegmentList(np.array(states), np.array(starts), np.array(ends), float(horizon))


def simulate_cox_arrivals(path: PathSegmentList, market: MarketMap, rng_seed: Seed) -> NDArray[np.float64]:
    """Arrival times in ``(0, horizon]`` with intensity ``n(theta_t)``."""
    rng = make_rng(rng_seed)
    chunks = []
    for state, start, end in zip(path.states, path.starts, path.ends):
        lam = market.intensity[state]
        if lam <= 0:
            continue
        k = rng.poisson(lam * (end - start))
        if k:
            chunks.append(np.sort(rng.uniform(start, end, size=k)))
    if not chunks:
        return np.empty(0)
    times = np.concatenate(chunks)
    # uniform() is half-open; guard the measure-zero tau = 0 draw and exact ties
    times = times[times > 0]
    return np.unique(times)


def fixed_grid_times(step: float, horizon: float) -> NDArray[np.float64]:
    n = int(math.floor(horizon / step + 1e-9))
    return step * np.arange(1, n + 1)


def occupation_on_interval(path: PathSegmentList, s: float, t: float, n_states: int | None = None) -> OccupationVector:
    """Exact occupation times on ``(s, t]`` and the state at ``t``."""
    if not (0 <= s < t <= path.horizon):
        raise RangeError(f"need 0 <= s < t <= horizon, got s={s}, t={t}")
    m = n_states if n_states is not None else int(path.states.max()) + 1
    cum = path.cumulative_occupation([s, t], m)
    occ = np.clip(cum[1] - cum[0], 0.0, None)
    end = int(path.state_at(t)) if t < path.horizon else int(path.states[-1])
    return OccupationVector(occ, end)


def simulate_log_price(
    path: PathSegmentList,
    market: MarketMap,
    times,
    x0: float,
    rng_seed: Seed,
) -> TickSeries:
    """Log-prices at ``times`` (``tau_0 = 0`` is prepended if absent)."""
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size and (times[0] < 0 or times[-1] > path.horizon):
        raise RangeError("observation times outside [0, horizon]")
    if np.any(np.diff(times) <= 0):
        raise RangeError("observation times must be strictly increasing")
    if times.size == 0 or times[0] != 0.0:
        times = np.concatenate([[0.0], times])
    rng = make_rng(rng_seed)
    cum = path.cumulative_occupation(times, market.n_states)
    occ = np.clip(np.diff(cum, axis=0), 0.0, None)
    mean = occ @ market.log_drift
    sd = np.sqrt(occ @ market.vol**2)
    incr = mean + sd * rng.standard_normal(mean.size)
    x = x0 + np.concatenate([[0.0], np.cumsum(incr)])
    return TickSeries(times, x)


def simulate(
    chain: ChainSpec,
    market: MarketMap,
    arrivals: ArrivalModel,
    horizon: float,
    seed: int,
    x0: float = 0.0,
) -> SimOutput:
    """One replicate; the chain, arrival and return streams are independent children of ``seed``."""
    check_compatible(chain, market)
    chain_ss, arrival_ss, return_ss = spawn_streams(seed, 3)
    path = simulate_chain(chain, horizon, chain_ss)
    if arrivals.kind == FIXED_GRID:
        times = fixed_grid_times(arrivals.step, horizon)
    else:
        times = simulate_cox_arrivals(path, arrivals.simulation_market(market), arrival_ss)
    ticks = simulate_log_price(path, market, times, x0, return_ss)
    return SimOutput(ticks, path, int(seed), model_digest(chain, market))


# --- CSV I/O ---------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_ticks(path: str | Path, ticks: TickSeries) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("tau,x\n")
        for tau, x in zip(ticks.tau, ticks.x):
            fh.write(f"{_fmt(tau)},{_fmt(x)}\n")


def read_ticks(path: str | Path) -> TickSeries:
    """Parse a ``tau,x`` CSV; errors name the offending data row (1-based)."""
    taus, xs = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["tau", "x"]:
            raise TickDataError(f"{path}: expected header 'tau,x', got {header!r}")
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != 2:
                raise TickDataError(f"{path}: row {row_no}: expected 2 fields, got {len(row)}")
            try:
                tau, x = float(row[0]), float(row[1])
            except ValueError as exc:
                raise TickDataError(f"{path}: row {row_no}: {exc}") from None
            if taus and tau <= taus[-1]:
                kind = "duplicate" if tau == taus[-1] else "non-increasing"
                raise TickDataError(f"{path}: row {row_no}: {kind} tau {row[0]}")
            taus.append(tau)
            xs.append(x)
    if not taus:
        raise TickDataError(f"{path}: no tick records")
    if taus[0] != 0.0:
        raise TickDataError(f"{path}: row 1: first record must have tau = 0")
    return TickSeries(np.array(taus), np.array(xs))


def write_truth(path: str | Path, truth: PathSegmentList) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("start,end,state_index\n")
        for s, e, k in zip(truth.starts, truth.ends, truth.states):
            fh.write(f"{_fmt(s)},{_fmt(e)},{int(k)}\n")


def read_truth(path: str | Path) -> PathSegmentList:
    starts, ends, states = [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            starts.append(float(row["start"]))
            ends.append(float(row["end"]))
            states.append(int(row["state_index"]))
    return PathSegmentList(np.array(states), np.array(starts), np.array(ends), ends[-1])
