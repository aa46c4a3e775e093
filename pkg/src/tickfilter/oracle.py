"""Brute-force discrete-time reference filter.

Time is cut into steps of length at most ``dt``.  Over each gap between
observations the forward variable is carried jointly over the chain state
and the number of steps spent in each state, so the Gaussian return
evidence at the next tick can be evaluated exactly for the discretized chain.
Evidence per step: Euler transition ``I + h Lambda``, no-arrival factor
``exp(-n_i h)``, and ``n_i h`` on the step that ends at a tick.

Nothing here is imported from the filter or the structure tables on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .arrivals import COX, FIXED_GRID, ArrivalModel
from .filtering import GRID, POST_JUMP, PRE_JUMP, FilterTrajectory
from .model import ChainSpec, MarketMap
from .simulate import TickSeries

MAX_CELLS = 20_000_000


class InvalidOracleConfig(ValueError):
    pass


@dataclass(frozen=True)
class OracleConfig:
    dt: float = 1e-3
    markov_order_check: bool = True

    def validate(self, chain: ChainSpec, market: MarketMap) -> None:
        if not self.dt > 0:
            raise InvalidOracleConfig("dt must be > 0")
        rate = float(np.max(-np.diag(chain.generator)))
        if self.dt * rate >= 0.1:
            raise InvalidOracleConfig(f"dt * max|lambda_ii| = {self.dt * rate:.3g} must be < 0.1")
        if self.dt * float(np.max(market.intensity)) >= 0.1:
            raise InvalidOracleConfig("dt * max intensity must be < 0.1")


def _euler_kernel(gen: np.ndarray, h: float, check: bool) -> np.ndarray:
    kernel = np.eye(gen.shape[0]) + h * gen
    if check and (np.any(kernel < 0) or np.any(np.abs(kernel.sum(axis=1) - 1.0) > 1e-12)):
        raise InvalidOracleConfig("one-step kernel is not a stochastic matrix")
    return kernel


def _normal(y, mean, var):
    return np.exp(-((y - mean) ** 2) / (2.0 * var)) / np.sqrt(2.0 * math.pi * var)


def _shift(block: np.ndarray, axis: int) -> np.ndarray:
    """Move mass one count up along ``axis``."""
    out = np.zeros_like(block)
    src = [slice(None)] * block.ndim
    dst = [slice(None)] * block.ndim
    src[axis] = slice(0, -1)
    dst[axis] = slice(1, None)
    out[tuple(dst)] = block[tuple(src)]
    return out


class _Gap:
    """Forward variable over (state, step counts in states 0..M-2) for one gap."""

    def __init__(self, pi: np.ndarray, n_steps: int):
        m = pi.size
        self.m = m
        shape = (m,) + (n_steps + 1,) * (m - 1)
        if int(np.prod(shape)) > MAX_CELLS:
            raise InvalidOracleConfig(
                f"gap needs {int(np.prod(shape))} cells; use fewer states or a larger dt"
            )
        self.alpha = np.zeros(shape)
        self.alpha[(slice(None),) + (0,) * (m - 1)] = pi
        self.n_steps = n_steps

    def step(self, kernel: np.ndarray, evidence: np.ndarray) -> None:
        m = self.m
        moved = np.tensordot(kernel, self.alpha, axes=([0], [0]))
        new = np.empty_like(self.alpha)
        for i in range(m):
            block = moved[i]
            # the step is credited to the state occupied at its end
            new[i] = _shift(block, i) if i < m - 1 else block
            new[i] *= evidence[i]
        total = new.sum()
        if total <= 0:
            raise InvalidOracleConfig("oracle forward variable vanished")
        self.alpha = new / total

    def marginal(self) -> np.ndarray:
        axes = tuple(range(1, self.alpha.ndim))
        p = self.alpha.sum(axis=axes) if axes else self.alpha.copy()
        return p / p.sum()

    def observe_return(self, dx: float, h: float, steps_done: int, log_drift: np.ndarray, var_rate: np.ndarray) -> np.ndarray:
        m = self.m
        if m == 1:
            occ = steps_done * h
            weight = _normal(dx, log_drift[0] * occ, var_rate[0] * occ)
            p = self.alpha.reshape(1) * weight
        else:
            counts = np.indices(self.alpha.shape[1:]).astype(float)
            rest = steps_done - counts.sum(axis=0)
            mean = rest * h * log_drift[-1]
            var = rest * h * var_rate[-1]
            for s in range(m - 1):
                mean = mean + counts[s] * h * log_drift[s]
                var = var + counts[s] * h * var_rate[s]
            valid = rest >= 0
            safe_var = np.where(valid & (var > 0), var, 1.0)
            dens = np.where(valid & (var > 0), _normal(dx, mean, safe_var), 0.0)
            p = (self.alpha * dens[None]).sum(axis=tuple(range(1, self.alpha.ndim)))
        total = p.sum()
        if not total > 0:
            raise InvalidOracleConfig(f"oracle return likelihood underflowed for dx={dx}")
        return p / total


def oracle_filter(
    ticks: TickSeries,
    chain: ChainSpec,
    market: MarketMap,
    cfg: OracleConfig,
    arrivals: ArrivalModel | None = None,
    output_grid_dt: float | None = None,
) -> FilterTrajectory:
    """Reference posteriors at every tick (and, optionally, near grid times)."""
    arrivals = arrivals or ArrivalModel.cox()
    rates = arrivals.simulation_market(market).intensity if arrivals.kind != FIXED_GRID else np.zeros(chain.n_states)
    cfg.validate(chain, market.with_intensity(rates))
    gen = np.array(chain.generator, dtype=float)
    log_drift = np.array(market.drift, dtype=float) - 0.5 * np.array(market.vol, dtype=float) ** 2
    var_rate = np.array(market.vol, dtype=float) ** 2
    traj = FilterTrajectory()
    pi = np.array(chain.initial_dist, dtype=float)
    if output_grid_dt:
        traj.emit(0.0, GRID, pi)
    next_grid = 1
    for k in range(1, ticks.tau.size):
        t0, t1 = ticks.tau[k - 1], ticks.tau[k]
        n = max(1, math.ceil((t1 - t0) / cfg.dt - 1e-9))
        h = (t1 - t0) / n
        kernel = _euler_kernel(gen, h, cfg.markov_order_check)
        quiet = np.exp(-rates * h)
        fire = rates * h if arrivals.kind == COX else np.ones_like(rates)
        gap = _Gap(pi, n)
        for s in range(1, n + 1):
            gap.step(kernel, quiet if s < n else np.ones_like(rates))
            if output_grid_dt:
                now = t0 + s * h
                while next_grid * output_grid_dt < t1 and next_grid * output_grid_dt <= now + 1e-12:
                    traj.emit(next_grid * output_grid_dt, GRID, gap.marginal())
                    next_grid += 1
        traj.emit(t1, PRE_JUMP, gap.marginal())
        gap.alpha = gap.alpha * fire.reshape((-1,) + (1,) * (gap.alpha.ndim - 1))
        pi = gap.observe_return(ticks.x[k] - ticks.x[k - 1], h, n, log_drift, var_rate)
        traj.emit(t1, POST_JUMP, pi)
    return traj
