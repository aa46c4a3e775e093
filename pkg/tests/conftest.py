import numpy as np
import pytest

from tickfilter.arrivals import ArrivalModel
from tickfilter.model import ChainSpec, MarketMap
from tickfilter.structures import build_table, default_grids


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def stock():
    chain = ChainSpec([0.1, 0.4], [[-0.5, 0.5], [0.5, -0.5]], [0.5, 0.5])
    market = MarketMap([0.05, 0.05], [0.1, 0.4], [5.0, 20.0])
    return chain, market


@pytest.fixture(scope="session")
def stock_small_table(stock):
    """Cox table for the stock model with a modest sample count."""
    chain, market = stock
    t_grid, u_grid = default_grids(market, ArrivalModel.cox(), n_t=64, n_z=201)
    return build_table(chain, market, t_grid, u_grid, 20_000, 99)


@pytest.fixture(scope="session")
def contrast():
    """Two states with intensities (1, 10)."""
    chain = ChainSpec([0.1, 0.3], [[-0.5, 0.5], [0.5, -0.5]], [0.5, 0.5])
    market = MarketMap([0.0, 0.0], [0.1, 0.3], [1.0, 10.0])
    return chain, market


@pytest.fixture(scope="session")
def contrast_table(contrast):
    chain, market = contrast
    t_grid, u_grid = default_grids(market, ArrivalModel.cox(), n_t=64, n_z=201)
    return build_table(chain, market, t_grid, u_grid, 20_000, 5)
