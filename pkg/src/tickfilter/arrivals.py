"""Observation-time laws supported by the filter."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import InvalidSpecError, MarketMap

COX = "cox"
POISSON = "poisson_const"
FIXED_GRID = "fixed_grid"


@dataclass(frozen=True)
class ArrivalModel:
    """How observation times are generated.

    ``cox``: intensity ``n(theta_t)`` from the market map, reference measure
    ``ds``.  ``poisson_const``: constant rate independent of the chain.
    ``fixed_grid``: ``tau_k = k h``, reference measure a point mass at the
    next grid time, so the jump correction vanishes.
    """

    kind: str
    rate: float | None = None
    step: float | None = None

    def __post_init__(self) -> None:
        if self.kind == COX:
            return
        if self.kind == POISSON:
            if self.rate is None or not self.rate > 0:
                raise InvalidSpecError("poisson_const arrivals need rate > 0")
        elif self.kind == FIXED_GRID:
            if self.step is None or not self.step > 0:
                raise InvalidSpecError("fixed_grid arrivals need step > 0")
        else:
            raise InvalidSpecError(f"unknown arrival model {self.kind!r}")

    @classmethod
    def cox(cls) -> "ArrivalModel":
        return cls(COX)

    @classmethod
    def poisson_const(cls, rate: float) -> "ArrivalModel":
        return cls(POISSON, rate=float(rate))

    @classmethod
    def fixed_grid(cls, step: float) -> "ArrivalModel":
        return cls(FIXED_GRID, step=float(step))

    def table_market(self, market: MarketMap) -> MarketMap:
        """Market map the structure table must be built against.

        For the non-Cox laws the arrival factor is state independent and
        cancels from every ratio, so the table is built with ``n == 0``.
        """
        if self.kind == COX:
            if not np.any(market.intensity > 0):
                raise InvalidSpecError("cox arrivals need a positive intensity in some state")
            return market
        return market.with_intensity(0.0)

    def simulation_market(self, market: MarketMap) -> MarketMap:
        """Market map whose intensities drive arrival sampling."""
        if self.kind == POISSON:
            return market.with_intensity(self.rate)
        return market

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.rate is not None:
            out["rate"] = self.rate
        if self.step is not None:
            out["step"] = self.step
        return out
