"""Exact recursive filtering of a hidden Markov volatility chain from irregular ticks."""

from .arrivals import ArrivalModel
from .filtering import (
    FilterTrajectory,
    filter_at_observations,
    integrated_compensator,
    jump_update,
    run_filter,
)
from .model import ChainSpec, MarketMap, OccupationVector, model_digest, transition_matrix
from .oracle import OracleConfig, oracle_filter
from .simulate import PathSegmentList, TickSeries, simulate
from .structures import StructureTable, build_table, load_table, save_table

__all__ = [
    "ArrivalModel",
    "ChainSpec",
    "FilterTrajectory",
    "MarketMap",
    "OccupationVector",
    "OracleConfig",
    "PathSegmentList",
    "StructureTable",
    "TickSeries",
    "build_table",
    "filter_at_observations",
    "integrated_compensator",
    "jump_update",
    "load_table",
    "model_digest",
    "oracle_filter",
    "run_filter",
    "save_table",
    "simulate",
    "transition_matrix",
]
__version__ = "0.1.0"
