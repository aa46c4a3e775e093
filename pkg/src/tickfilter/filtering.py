"""Recursive filter for a finite-state volatility chain observed at random times.

At an observation the posterior is revised by a Bayes ratio built from the
tabulated kernels ``q_ji(dt, dx)``.  Between observations it follows a
deterministic ODE: the generator term plus a correction that accounts for
the fact that no observation has arrived yet.  The correction can be written
with coefficients frozen at the last observation (``form="frozen"``) or in
terms of the current posterior (``form="feedback"``, the default); the two
agree exactly, but only the second is numerically stable over long gaps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.special import logsumexp

from .arrivals import COX, FIXED_GRID, POISSON, ArrivalModel
from .model import (
    DEFAULT_DT_MAX,
    ChainSpec,
    MarketMap,
    forward_kolmogorov_step,
    normalize,
    transition_matrix,
)
from .simulate import TickSeries
from .structures import StructureTable

PROB_FLOOR = 1e-300
STARVATION_LEVEL = 1e-300
LOG_DOMAIN_STATES = 16

GRID, PRE_JUMP, POST_JUMP = "grid", "pre_jump", "post_jump"


class FilterError(RuntimeError):
    """Base class for filter failures; ``obs_index`` is set when raised inside a run."""

    obs_index: int | None = None


class DegenerateLikelihoodError(FilterError):
    pass


class StarvationError(FilterError):
    """No predicted mass left for a future observation; the table's t range is too short."""


@dataclass(frozen=True)
class Posterior:
    time: float
    probs: NDArray[np.float64]

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-10:
            raise ValueError("posterior must be a probability vector")
        object.__setattr__(self, "probs", probs)


@dataclass
class FilterTrajectory:
    """Emitted posteriors in time order, each tagged ``grid``, ``pre_jump`` or ``post_jump``."""

    times: list[float] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    probs: list[NDArray[np.float64]] = field(default_factory=list)

    def emit(self, t: float, event: str, pi: NDArray[np.float64]) -> None:
        self.times.append(float(t))
        self.events.append(event)
        self.probs.append(np.array(pi, dtype=float))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def samples(self) -> list[Posterior]:
        return [Posterior(t, p) for t, p in zip(self.times, self.probs)]

    @property
    def jump_indices(self) -> list[int]:
        return [k for k, e in enumerate(self.events) if e == POST_JUMP]

    def select(self, event: str) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        idx = [k for k, e in enumerate(self.events) if e == event]
        times = np.array([self.times[k] for k in idx])
        probs = np.array([self.probs[k] for k in idx]).reshape(len(idx), -1)
        return times, probs

    def to_csv(self, path: str | Path) -> None:
        m = self.probs[0].size if self.probs else 0
        with open(path, "w", newline="") as fh:
            fh.write(",".join(["t", "event"] + [f"pi_{i + 1}" for i in range(m)]) + "\n")
            for t, e, p in zip(self.times, self.events, self.probs):
                fh.write(",".join([format(t, ".17g"), e] + [format(float(v), ".17g") for v in p]) + "\n")


def read_trajectory(path: str | Path) -> FilterTrajectory:
    traj = FilterTrajectory()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            traj.emit(float(row[0]), row[1], np.array([float(v) for v in row[2:]]))
    return traj


# --- jump update -----------------------------------------------------------

def _check_grid_step(dt: float, arrivals: ArrivalModel) -> None:
    # the jump correction vanishes only when the observation lands on the grid
    if abs(dt - arrivals.step) > 1e-9 * max(1.0, arrivals.step):
        raise FilterError(
            f"fixed_grid arrivals expect spacing {arrivals.step}, got {dt}"
        )


def jump_update(
    pi_prev: NDArray[np.float64],
    dt: float,
    dx: float,
    table: StructureTable,
    market: MarketMap,
    arrivals: ArrivalModel,
) -> NDArray[np.float64]:
    """Posterior at ``tau_{k+1}`` from the posterior at ``tau_k``.

    ``pi_i  ~  n_i * sum_j q_ji(dt, dx) pi_j`` for Cox arrivals; the factor
    ``n_i`` is dropped for the Poisson and fixed-grid laws, whose tables are
    built with zero intensity.
    """
    if not dt > 0:
        raise FilterError(f"observation spacing must be > 0, got {dt}")
    if arrivals.kind == FIXED_GRID:
        _check_grid_step(dt, arrivals)
    pi_prev = np.asarray(pi_prev, dtype=float)
    q = table.q_at(dt, dx)
    weight = market.intensity if arrivals.kind == COX else np.ones(table.n_states)
    if table.n_states > LOG_DOMAIN_STATES:
        with np.errstate(divide="ignore"):
            log_terms = np.log(q) + np.log(pi_prev)[:, None]
            log_num = logsumexp(log_terms, axis=0) + np.log(weight)
        if not np.any(np.isfinite(log_num)):
            raise DegenerateLikelihoodError(f"zero likelihood for dt={dt!r}, dx={dx!r}")
        num = np.exp(log_num - np.max(log_num))
    else:
        num = weight * (pi_prev @ q)
    total = num.sum()
    if not (np.isfinite(total) and total > 0):
        raise DegenerateLikelihoodError(f"zero likelihood for dt={dt!r}, dx={dx!r}")
    post = num / total
    if np.any((num > 0) & (post < PROB_FLOOR)):
        post = np.where(num > 0, np.maximum(post, PROB_FLOOR), post)
        post = post / post.sum()
    return post


# --- between observations ----------------------------------------------------

def _phi1(z):
    """``(e^z - 1) / z`` with the ``z -> 0`` limit."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-8
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _phi2(z):
    """``int_0^1 u e^(z u) du = (e^z (z - 1) + 1) / z^2`` with a series near 0."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-2
    safe = np.where(small, 1.0, z)
    direct = (np.exp(safe) * (safe - 1.0) + 1.0) / (safe * safe)
    series = 0.5 + z / 3.0 + z * z / 8.0 + z**3 / 30.0
    return np.where(small, series, direct)


class CoxGap:
    """Frozen-gap quantities for Cox arrivals, built once per observation.

    ``h_i(e) = sum_j q_bar_ji(e) pi_j`` is the predicted no-arrival mass in
    state ``i``, ``g(e) = n . h(e)`` the predicted arrival density and
    ``den(e) = int_e^inf g`` the predicted survival.  Between table nodes the
    total mass ``S = sum_i h_i`` is interpolated log-linearly and the
    composition ``h / S`` linearly, so ``g`` is integrated in closed form
    and constant-intensity or single-state models are reproduced exactly.
    Beyond ``t_max`` the mass decays at the smallest positive intensity.
    """

    def __init__(self, table: StructureTable, market: MarketMap, pi_k: NDArray[np.float64]):
        intensity = market.intensity
        positive = intensity[intensity > 0]
        if positive.size == 0:
            raise FilterError("cox arrivals need a positive intensity in some state")
        self.intensity = intensity
        self.n_min = float(positive.min())
        self.nodes = table._t_aug
        h_nodes = np.einsum("j,jik->ki", np.asarray(pi_k, dtype=float), table._qbar_aug)
        mass = h_nodes.sum(axis=1)
        if np.any(mass <= 0):
            raise StarvationError("no predicted mass left; the table has empty q_bar rows")
        self.mass = mass
        self.comp = h_nodes / mass[:, None]
        self.rate = self.comp @ intensity
        width = np.diff(self.nodes)
        self.beta = np.log(mass[1:] / mass[:-1]) / width
        self.slope = np.diff(self.rate) / width
        whole = self._segment_integral(np.arange(width.size), np.zeros(width.size))
        tail = mass[-1] * self.rate[-1] / self.n_min
        self.den_nodes = tail + np.concatenate([np.cumsum(whole[::-1])[::-1], [0.0]])

    def _segment_integral(self, k, x):
        """``int_x^width g`` on segment ``k``, with ``x`` measured from its left node."""
        rest = self.nodes[k + 1] - self.nodes[k] - x
        beta, slope = self.beta[k], self.slope[k]
        level = self.mass[k] * np.exp(beta * x)
        start = self.rate[k] + slope * x
        return level * rest * (start * _phi1(beta * rest) + slope * rest * _phi2(beta * rest))

    @property
    def t_max(self) -> float:
        return float(self.nodes[-1])

    def evaluate(self, e) -> tuple[NDArray, NDArray, NDArray]:
        """``(h, g, den)`` at elapsed times ``e``; ``h`` has shape ``(len(e), M)``."""
        e = np.atleast_1d(np.asarray(e, dtype=float))
        if np.any(e < 0):
            raise ValueError("elapsed time must be >= 0")
        nodes = self.nodes
        inside = e <= self.t_max
        k = np.clip(np.searchsorted(nodes, e, side="right") - 1, 0, nodes.size - 2)
        x = np.clip(e - nodes[k], 0.0, nodes[k + 1] - nodes[k])
        w = x / (nodes[k + 1] - nodes[k])
        mass = self.mass[k] * np.exp(self.beta[k] * x)
        comp = (1.0 - w)[:, None] * self.comp[k] + w[:, None] * self.comp[k + 1]
        h = mass[:, None] * comp
        g = h @ self.intensity
        den = self.den_nodes[k + 1] + self._segment_integral(k, x)
        if not np.all(inside):
            decay = np.exp(-self.n_min * (e[~inside] - self.t_max))
            h[~inside] = (self.mass[-1] * self.comp[-1]) * decay[:, None]
            g[~inside] = self.mass[-1] * self.rate[-1] * decay
            den[~inside] = self.den_nodes[-1] * decay
        return h, g, den

    def corrections(self, e) -> tuple[NDArray, NDArray]:
        """``D`` (shape ``(len(e), M)``) and ``D_bar`` of the inter-arrival ODE."""
        h, g, den = self.evaluate(e)
        if np.any(den < STARVATION_LEVEL):
            raise StarvationError("no future observation mass left; extend the table's t grid")
        return -(self.intensity * h) / den[:, None], g / den

    def corrections_progression(self, e0: float, half: float, count: int):
        return self.corrections(e0 + half * np.arange(count))

    def stage_terms(self, e0: float, half: float, count: int):
        d, dbar = self.corrections_progression(e0, half, count)
        return lambda pi, idx: dbar[idx] * pi + d[idx]

    def intensity_at(self, e) -> NDArray[np.float64]:
        _, g, den = self.evaluate(e)
        if np.any(den < STARVATION_LEVEL):
            raise StarvationError("no future observation mass left; extend the table's t grid")
        return g / den

    def integrated(self, e) -> NDArray[np.float64]:
        """``int_0^e g/den = log den(0) - log den(e)`` (exact for this interpolant)."""
        _, _, den = self.evaluate(e)
        if np.any(den < STARVATION_LEVEL):
            raise StarvationError("no future observation mass left; extend the table's t grid")
        return np.log(self.den_nodes[0]) - np.log(den)


class PoissonGap:
    """Constant-rate arrivals: the correction is ``-rate * (P(e)^T pi_k - pi)``.

    ``P`` is the exact transition matrix; the arrival factors cancel.
    """

    def __init__(self, chain: ChainSpec, rate: float, pi_k: NDArray[np.float64]):
        self.chain = chain
        self.rate = float(rate)
        self.pi_k = np.asarray(pi_k, dtype=float)

    def corrections_progression(self, e0: float, half: float, count: int):
        step = transition_matrix(self.chain, half)
        v = self.pi_k @ transition_matrix(self.chain, e0)
        pred = np.empty((count, self.pi_k.size))
        for c in range(count):
            pred[c] = v
            v = v @ step
        return -self.rate * pred, np.full(count, self.rate)

    def corrections(self, e) -> tuple[NDArray, NDArray]:
        e = np.atleast_1d(np.asarray(e, dtype=float))
        pred = np.array([self.pi_k @ transition_matrix(self.chain, x) for x in e])
        return -self.rate * pred, np.full(e.size, self.rate)

    def stage_terms(self, e0: float, half: float, count: int):
        d, dbar = self.corrections_progression(e0, half, count)
        return lambda pi, idx: dbar[idx] * pi + d[idx]

    def intensity_at(self, e) -> NDArray[np.float64]:
        return np.full(np.atleast_1d(e).shape, self.rate)

    def integrated(self, e) -> NDArray[np.float64]:
        return self.rate * np.atleast_1d(np.asarray(e, dtype=float))


class FeedbackGap:
    """Inter-arrival correction written in terms of the current posterior.

    Since ``den(e) = sum_i h_i(e)``, the frozen-gap ratios ``h_i/den`` equal
    ``pi_i(t)`` itself, so ``D_i = -n_i pi_i(t)`` and ``D_bar = sum_l n_l pi_l(t)``.
    Deviations from the exact solution then decay instead of growing at
    rate ``D_bar``.
    """

    def __init__(self, intensity: NDArray[np.float64]):
        self.intensity = np.asarray(intensity, dtype=float)

    def stage_terms(self, e0: float, half: float, count: int):
        n = self.intensity
        return lambda pi, idx: pi * (n @ pi) - n * pi


FROZEN, FEEDBACK = "frozen", "feedback"


def gap_state(
    pi_k: NDArray[np.float64],
    chain: ChainSpec,
    market: MarketMap,
    table: StructureTable | None,
    arrivals: ArrivalModel,
    form: str = FEEDBACK,
):
    """Precomputed state for the gap following an observation.

    ``form="frozen"`` evaluates the correction terms from the tabulated
    ``q_bar`` at the frozen posterior ``pi_k``; ``form="feedback"`` uses the
    equivalent current-posterior expressions.
    """
    if arrivals.kind == FIXED_GRID:
        raise ValueError("fixed_grid arrivals have no inter-arrival correction")
    if form == FEEDBACK:
        rates = market.intensity if arrivals.kind == COX else np.full(chain.n_states, arrivals.rate)
        return FeedbackGap(rates)
    if form != FROZEN:
        raise ValueError(f"unknown inter-arrival form {form!r}")
    if arrivals.kind == COX:
        return CoxGap(table, market, pi_k)
    return PoissonGap(chain, arrivals.rate, pi_k)


def _evolve(pi, e_start, e_end, gen_t, gap, dt_max):
    span = e_end - e_start
    if span <= 0:
        return pi
    n = max(1, math.ceil(span / dt_max - 1e-9))
    h = span / n
    extra = gap.stage_terms(e_start, 0.5 * h, 2 * n + 1)
    half, sixth = 0.5 * h, h / 6.0
    dot = gen_t.dot
    for s in range(n):
        a = 2 * s
        k1 = dot(pi) + extra(pi, a)
        p = pi + half * k1
        k2 = dot(p) + extra(p, a + 1)
        p = pi + half * k2
        k3 = dot(p) + extra(p, a + 1)
        p = pi + h * k3
        k4 = dot(p) + extra(p, a + 2)
        pi = normalize(pi + sixth * (k1 + 2.0 * (k2 + k3) + k4))
    return pi


def interarrival_step(
    pi: NDArray[np.float64],
    tau_k: float,
    t: float,
    dt: float,
    chain: ChainSpec,
    market: MarketMap,
    table: StructureTable | None,
    arrivals: ArrivalModel,
    horizon_integral=None,
    form: str = FEEDBACK,
) -> NDArray[np.float64]:
    """One RK4 step of the inter-arrival ODE from ``t`` to ``t + dt``.

    ``horizon_integral`` is the gap state from :func:`gap_state` for the
    posterior at ``tau_k``; when omitted it is built from ``pi`` (valid only
    at ``t == tau_k``).
    """
    if not tau_k <= t:
        raise ValueError("need tau_k <= t")
    if arrivals.kind == FIXED_GRID:
        raise ValueError("fixed_grid arrivals evolve by the forward Kolmogorov equation")
    if horizon_integral is None:
        horizon_integral = gap_state(pi, chain, market, table, arrivals, form)
    return _evolve(np.asarray(pi, dtype=float), t - tau_k, t - tau_k + dt,
                   chain.generator.T, horizon_integral, dt)


def compensator_intensity(
    pi_at_tau_k: NDArray[np.float64],
    elapsed: float,
    table: StructureTable,
    market: MarketMap,
) -> float:
    """Observation-filtration intensity of the next arrival at ``tau_k + elapsed`` (Cox)."""
    return float(CoxGap(table, market, pi_at_tau_k).intensity_at(elapsed)[0])


# --- full runs -----------------------------------------------------------------

def _with_index(exc: Exception, k: int) -> Exception:
    if isinstance(exc, FilterError):
        exc.obs_index = k
    exc.args = (f"observation {k}: {exc.args[0] if exc.args else exc}",) + exc.args[1:]
    return exc


def _check_inputs(ticks, chain, market, table, arrivals):
    if arrivals.kind != POISSON or table is not None:
        table.check_model(chain, arrivals.table_market(market))
    if arrivals.kind == FIXED_GRID:
        for k, dt in enumerate(np.diff(ticks.tau), start=1):
            try:
                _check_grid_step(dt, arrivals)
            except FilterError as exc:
                raise _with_index(exc, k)


def filter_at_observations(
    ticks: TickSeries,
    chain: ChainSpec,
    market: MarketMap,
    table: StructureTable,
    arrivals: ArrivalModel,
) -> NDArray[np.float64]:
    """Posteriors at ``tau_0..tau_N`` by the Bayes recursion alone.

    Valid for every supported arrival law because none of them has a
    nonzero jump correction.  Row 0 is the prior.
    """
    _check_inputs(ticks, chain, market, table, arrivals)
    out = np.empty((ticks.tau.size, chain.n_states))
    pi = chain.initial_dist.copy()
    out[0] = pi
    dts, dxs = np.diff(ticks.tau), np.diff(ticks.x)
    for k in range(dts.size):
        try:
            pi = jump_update(pi, dts[k], dxs[k], table, market, arrivals)
        except (FilterError, ValueError) as exc:
            raise _with_index(exc, k + 1)
        out[k + 1] = pi
    return out


def integrated_compensator(
    ticks: TickSeries,
    chain: ChainSpec,
    market: MarketMap,
    table: StructureTable,
    arrivals: ArrivalModel,
    posteriors: NDArray[np.float64] | None = None,
) -> NDArray[np.float64]:
    """Compensator increments over each gap; unit-rate exponential under the model."""
    if posteriors is None:
        posteriors = filter_at_observations(ticks, chain, market, table, arrivals)
    dts = np.diff(ticks.tau)
    out = np.empty(dts.size)
    for k, dt in enumerate(dts):
        gap = gap_state(posteriors[k], chain, market, table, arrivals, FROZEN)
        out[k] = gap.integrated(dt)[0]
    return out


def _output_grid(grid_dt: float | None, end: float) -> NDArray[np.float64]:
    if not grid_dt:
        return np.empty(0)
    n = math.floor(end / grid_dt + 1e-9)
    return grid_dt * np.arange(n + 1)


def run_filter(
    ticks: TickSeries,
    chain: ChainSpec,
    market: MarketMap,
    table: StructureTable | None,
    arrivals: ArrivalModel,
    output_grid_dt: float | None = None,
    horizon: float | None = None,
    dt_max: float = DEFAULT_DT_MAX,
    form: str = FEEDBACK,
) -> FilterTrajectory:
    """Filter a tick series from the prior ``chain.initial_dist`` at time 0.

    Emits a ``grid`` row at every multiple of ``output_grid_dt`` in
    ``[0, T]`` (``T`` = ``horizon`` or the last tick) and a ``pre_jump`` /
    ``post_jump`` pair at every observation after ``tau_0``.  A grid time
    that coincides with an observation reports the post-jump value.
    """
    _check_inputs(ticks, chain, market, table, arrivals)
    end = float(ticks.tau[-1] if horizon is None else horizon)
    if end < ticks.tau[-1]:
        raise ValueError("horizon ends before the last observation")
    gen_t = chain.generator.T
    grid = _output_grid(output_grid_dt, end)
    tol = 1e-9 * max(1.0, end)
    # snap grid points onto observation times they coincide with
    if grid.size:
        pos = np.clip(np.searchsorted(ticks.tau, grid), 1, ticks.tau.size - 1) if ticks.n_obs else None
        if pos is not None:
            for near in (pos - 1, pos):
                hit = np.abs(ticks.tau[near] - grid) <= tol
                grid[hit] = ticks.tau[near][hit]
    obs_set = set(ticks.tau.tolist())

    traj = FilterTrajectory()
    pi_k = chain.initial_dist.copy()
    gi = 0
    while gi < grid.size and grid[gi] == 0.0:
        traj.emit(0.0, GRID, pi_k)
        gi += 1
    bounds = list(ticks.tau[1:]) + ([end] if end > ticks.tau[-1] else [])
    tau_k = 0.0
    for k, nxt in enumerate(bounds, start=1):
        is_obs = k <= ticks.n_obs
        try:
            gap = None if arrivals.kind == FIXED_GRID else gap_state(pi_k, chain, market, table, arrivals, form)
            pi, t = pi_k, tau_k
            targets = []
            while gi < grid.size and (grid[gi] < nxt or (not is_obs and grid[gi] <= nxt)):
                targets.append((float(grid[gi]), GRID))
                gi += 1
            if is_obs:
                targets.append((float(nxt), PRE_JUMP))
            for g, event in targets:
                if g > t:
                    if gap is None:
                        pi = forward_kolmogorov_step(chain, pi, g - t, dt_max)
                    else:
                        pi = _evolve(pi, t - tau_k, g - tau_k, gen_t, gap, dt_max)
                    t = g
                traj.emit(g, event, pi)
            if not is_obs:
                break
            dx = ticks.x[k] - ticks.x[k - 1]
            pi_k = jump_update(pi_k, nxt - tau_k, dx, table, market, arrivals)
        except (FilterError, ValueError) as exc:
            raise _with_index(exc, k)
        traj.emit(nxt, POST_JUMP, pi_k)
        while gi < grid.size and grid[gi] == nxt and nxt in obs_set:
            traj.emit(nxt, GRID, pi_k)
            gi += 1
        tau_k = nxt
    return traj
