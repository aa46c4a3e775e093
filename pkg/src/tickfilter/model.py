"""Volatility chain and market primitives.

The volatility is a finite-state continuous-time Markov chain with generator
``Lambda``.  Given a chain path, the log-price increment over ``(s, t]`` is
Gaussian with mean ``sum_i (m_i - v_i**2 / 2) L_i`` and variance
``sum_i v_i**2 L_i`` where ``L_i`` is the time spent in state ``i``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm

ROW_SUM_TOL = 1e-12
DEFAULT_DT_MAX = 1e-3


class InvalidSpecError(ValueError):
    """Raised when a chain or market definition violates its invariants."""


class DegenerateIntervalError(ValueError):
    """Raised when a log-return density is requested over a zero-length interval."""


@dataclass(frozen=True, eq=False)
class ChainSpec:
    """Finite-state volatility chain.

    Attributes
    ----------
    states : NDArray[np.float64]
        Numeric labels ``a_1..a_M``.  Duplicates are allowed; states are
        identified by position.
    generator : NDArray[np.float64]
        ``M x M`` intensity matrix, rows summing to zero.
    initial_dist : NDArray[np.float64]
        Prior law of the chain at time 0.
    """

    states: NDArray[np.float64]
    generator: NDArray[np.float64]
    initial_dist: NDArray[np.float64]

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=float).reshape(-1)
        gen = np.asarray(self.generator, dtype=float)
        p0 = np.asarray(self.initial_dist, dtype=float).reshape(-1)
        m = states.size
        if m < 1:
            raise InvalidSpecError("chain needs at least one state")
        if gen.shape != (m, m):
            raise InvalidSpecError(f"generator must be {m}x{m}, got {gen.shape}")
        if not np.all(np.isfinite(gen)):
            raise InvalidSpecError("generator has non-finite entries")
        off = gen - np.diag(np.diag(gen))
        if np.any(off < 0):
            raise InvalidSpecError("off-diagonal generator entries must be >= 0")
        if np.any(np.abs(gen.sum(axis=1)) > ROW_SUM_TOL):
            raise InvalidSpecError("generator rows must sum to 0")
        if p0.shape != (m,) or np.any(p0 < 0) or abs(p0.sum() - 1.0) > ROW_SUM_TOL:
            raise InvalidSpecError("initial_dist must be a probability vector of length M")
        for name, arr in (("states", states), ("generator", gen), ("initial_dist", p0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.states.size

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ChainSpec):
            return NotImplemented
        return (
            np.array_equal(self.states, other.states)
            and np.array_equal(self.generator, other.generator)
            and np.array_equal(self.initial_dist, other.initial_dist)
        )

    def stationary_distribution(self) -> NDArray[np.float64]:
        """Solve ``pi Lambda = 0`` with ``sum(pi) = 1`` (least squares)."""
        m = self.n_states
        a = np.vstack([self.generator.T, np.ones((1, m))])
        b = np.zeros(m + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(a, b, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


@dataclass(frozen=True, eq=False)
class MarketMap:
    """Per-state drift ``m``, volatility ``v`` and observation intensity ``n``."""

    drift: NDArray[np.float64]
    vol: NDArray[np.float64]
    intensity: NDArray[np.float64]

    def __post_init__(self) -> None:
        drift = np.asarray(self.drift, dtype=float).reshape(-1)
        vol = np.asarray(self.vol, dtype=float).reshape(-1)
        intensity = np.asarray(self.intensity, dtype=float).reshape(-1)
        if not (drift.shape == vol.shape == intensity.shape):
            raise InvalidSpecError("drift, vol and intensity must have equal length")
        for name, arr in (("drift", drift), ("vol", vol), ("intensity", intensity)):
            if not np.all(np.isfinite(arr)):
                raise InvalidSpecError(f"{name} has non-finite entries")
        if np.any(vol <= 0):
            raise InvalidSpecError("vol must be strictly positive in every state")
        if np.any(intensity < 0):
            raise InvalidSpecError("intensity must be >= 0")
        for name, arr in (("drift", drift), ("vol", vol), ("intensity", intensity)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.vol.size

    @property
    def log_drift(self) -> NDArray[np.float64]:
        """Drift of the log-price, ``m - v**2 / 2``."""
        return self.drift - 0.5 * self.vol**2

    def with_intensity(self, intensity) -> "MarketMap":
        intensity = np.broadcast_to(np.asarray(intensity, dtype=float), self.vol.shape)
        return MarketMap(self.drift, self.vol, intensity.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MarketMap):
            return NotImplemented
        return (
            np.array_equal(self.drift, other.drift)
            and np.array_equal(self.vol, other.vol)
            and np.array_equal(self.intensity, other.intensity)
        )


@dataclass(frozen=True)
class OccupationVector:
    """Time spent in each state over an interval, plus the state at its end."""

    occupation: NDArray[np.float64]
    end_state: int = field(default=0)

    @property
    def length(self) -> float:
        return float(np.sum(self.occupation))


def check_compatible(chain: ChainSpec, market: MarketMap) -> None:
    if chain.n_states != market.n_states:
        raise InvalidSpecError(
            f"chain has {chain.n_states} states but market map has {market.n_states}"
        )


def model_digest(chain: ChainSpec, market: MarketMap) -> str:
    """SHA-256 over a canonical rendering of the model (hex string)."""
    check_compatible(chain, market)
    payload = {
        "states": [float.hex(float(x)) for x in chain.states],
        "generator": [[float.hex(float(x)) for x in row] for row in chain.generator],
        "initial_dist": [float.hex(float(x)) for x in chain.initial_dist],
        "drift": [float.hex(float(x)) for x in market.drift],
        "vol": [float.hex(float(x)) for x in market.vol],
        "intensity": [float.hex(float(x)) for x in market.intensity],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def transition_matrix(chain: ChainSpec, t: float) -> NDArray[np.float64]:
    """``P(t) = exp(t Lambda)``; row ``j`` is the law of ``theta_t`` given ``theta_0 = a_j``."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    if t == 0:
        return np.eye(chain.n_states)
    p = expm(t * chain.generator)
    # expm can leave ~1e-17 negatives on zero-probability transitions
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=1, keepdims=True)


def _rk4_linear(apply, pi: NDArray[np.float64], h: float) -> NDArray[np.float64]:
    k1 = apply(pi)
    k2 = apply(pi + 0.5 * h * k1)
    k3 = apply(pi + 0.5 * h * k2)
    k4 = apply(pi + h * k3)
    return pi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def normalize(pi: NDArray[np.float64], floor: float = 0.0) -> NDArray[np.float64]:
    pi = np.maximum(pi, floor)
    s = float(pi.sum())
    if not (0.0 < s < math.inf):
        raise ValueError("cannot normalize a vector with no positive mass")
    return pi / s


def forward_kolmogorov_step(
    chain: ChainSpec,
    pi: NDArray[np.float64],
    dt: float,
    dt_max: float = DEFAULT_DT_MAX,
) -> NDArray[np.float64]:
    """Advance ``d pi / dt = Lambda^T pi`` by ``dt`` with fixed-step RK4.

    The interval is split into ``ceil(dt / dt_max)`` equal steps and the
    vector is renormalized after each one.
    """
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    pi = np.asarray(pi, dtype=float)
    gen_t = chain.generator.T
    n_steps = max(1, math.ceil(dt / dt_max - 1e-12))
    h = dt / n_steps
    for _ in range(n_steps):
        pi = normalize(_rk4_linear(gen_t.dot, pi, h))
    return pi


def occupation_moments(market: MarketMap, occupation) -> tuple[NDArray, NDArray]:
    """Mean and variance of the log-return for occupation vector(s) (last axis = state)."""
    occ = np.asarray(occupation, dtype=float)
    mean = occ @ market.log_drift
    var = occ @ (market.vol**2)
    return mean, var


def gaussian_pdf(y, mean, var):
    y = np.asarray(y, dtype=float)
    return np.exp(-0.5 * (y - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def log_return_density(market: MarketMap, occ: OccupationVector, y: float) -> float:
    """Conditional density of a log-price increment given the occupation times."""
    if occ.length <= 0:
        raise DegenerateIntervalError("occupation vector has zero total length")
    mean, var = occupation_moments(market, occ.occupation)
    return float(gaussian_pdf(y, mean, var))
