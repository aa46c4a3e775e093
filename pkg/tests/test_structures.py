import math

import numpy as np
import pytest
from scipy.linalg import expm

from tickfilter.model import ChainSpec, MarketMap, model_digest
from tickfilter.structures import (
    ChecksumError,
    InvalidGridError,
    OutOfRangeError,
    StaleTableError,
    TableFormatError,
    build_table,
    default_grids,
    export_table_csv,
    load_table,
    query_q,
    query_q_bar,
    save_table,
)
from tickfilter.arrivals import ArrivalModel

T_GRID = np.geomspace(0.05, 3.0, 12)
U_GRID = np.linspace(-4.0, 4.0, 161)


def gauss(x, mean, var):
    return math.exp(-((x - mean) ** 2) / (2 * var)) / math.sqrt(2 * math.pi * var)


def feynman_kac(gen, intensity, t, dt=1e-4):
    """E_j[1{theta_t = i} exp(-int n)] from the product of one-step kernels."""
    n = max(1, round(t / dt))
    h = t / n
    step = (np.eye(len(intensity)) + h * np.asarray(gen)) * np.exp(-np.asarray(intensity) * h)[None, :]
    return np.linalg.matrix_power(step, n)


@pytest.fixture(scope="module")
def sym2():
    chain = ChainSpec([0.1, 0.3], [[-0.8, 0.8], [0.8, -0.8]], [0.5, 0.5])
    market = MarketMap([0.02, -0.03], [0.15, 0.35], [2.0, 6.0])
    return chain, market, build_table(chain, market, T_GRID, U_GRID, 20_000, 17)


@pytest.fixture(scope="module")
def rand3():
    rng = np.random.default_rng(3)
    off = rng.uniform(0.2, 1.5, (3, 3))
    np.fill_diagonal(off, 0.0)
    chain = ChainSpec([1, 2, 3], off - np.diag(off.sum(1)), [1 / 3] * 3)
    market = MarketMap([0.0, 0.01, 0.02], [0.1, 0.2, 0.3], rng.uniform(0.5, 4.0, 3))
    return chain, market, build_table(chain, market, T_GRID, U_GRID, 20_000, 23)


def test_single_state_zero_variance():
    lam, m, v = 3.0, 0.07, 0.25
    chain = ChainSpec([1], [[0.0]], [1.0])
    market = MarketMap([m], [v], [lam])
    table = build_table(chain, market, T_GRID, U_GRID, 50, 1)
    assert np.allclose(table.q_bar[0, 0], np.exp(-lam * T_GRID), rtol=0, atol=1e-12)
    assert np.all(table.q_bar_se == 0) and np.all(table.q_se == 0)
    a = m - v * v / 2
    for t in T_GRID[[0, 5, 11]]:
        for u in U_GRID[[40, 80, 83]]:
            z = u * math.sqrt(t)
            expected = math.exp(-lam * t) * gauss(z, a * t, v * v * t)
            assert query_q(table, 0, 0, t, z) == pytest.approx(expected, abs=1e-12, rel=1e-12)


def test_entrywise_bounds(rand3):
    _, _, table = rand3
    assert np.all(table.q >= 0)
    assert np.all((table.q_bar >= 0) & (table.q_bar <= 1))
    assert np.all(table.q_bar.sum(axis=1) <= 1 + 1e-12)


def test_feynman_kac_two_state(sym2):
    chain, market, table = sym2
    for k, t in enumerate(T_GRID):
        oracle = feynman_kac(chain.generator, market.intensity, t)
        err = np.abs(table.q_bar[:, :, k] - oracle)
        # Euler product error is O(dt); far below the MC noise here
        assert np.all(err <= 3 * table.q_bar_se[:, :, k] + 1e-3 * t), (t, err)


def test_feynman_kac_three_state(rand3):
    chain, market, table = rand3
    for k, t in enumerate(T_GRID):
        oracle = feynman_kac(chain.generator, market.intensity, t)
        for j in range(3):
            for i in range(3):
                got = query_q_bar(table, j, i, t)
                assert abs(got - oracle[j, i]) <= 3 * table.q_bar_se[j, i, k] + 1e-3 * t


def test_euler_product_agrees_with_expm():
    gen = np.array([[-0.8, 0.8], [0.8, -0.8]])
    n = np.array([2.0, 6.0])
    exact = expm(1.3 * (gen - np.diag(n)))
    assert np.allclose(feynman_kac(gen, n, 1.3), exact, atol=1e-4)


def test_constant_intensity_row_sums():
    chain = ChainSpec([1, 2], [[-1, 1], [2, -2]], [0.5, 0.5])
    market = MarketMap([0.0, 0.0], [0.1, 0.4], [3.0, 3.0])
    table = build_table(chain, market, T_GRID, U_GRID, 5_000, 2)
    rows = table.q_bar.sum(axis=1)
    se = table.q_bar_se.sum(axis=1)
    target = np.exp(-3.0 * T_GRID)
    assert np.all(np.abs(rows - target) <= 3 * se + 1e-14)


def test_query_at_nodes_is_exact(sym2):
    _, _, table = sym2
    k, l = 4, 97
    t, u = T_GRID[k], U_GRID[l]
    z = u * math.sqrt(t)
    for j in range(2):
        for i in range(2):
            assert query_q_bar(table, j, i, t) == table.q_bar[j, i, k]
            assert query_q(table, j, i, t, z) == pytest.approx(table.q[j, i, k, l] / math.sqrt(t), rel=1e-12)


def test_flat_data_interpolates_to_mean():
    chain = ChainSpec([1], [[0.0]], [1.0])
    # m = v^2 / 2 puts the Gaussian's mean at u = 0, so the two nodes agree
    market = MarketMap([0.02], [0.2], [0.0])
    table = build_table(chain, market, [1.0, 2.0], [-0.2, 0.2], 10, 1)
    t = 1.0
    left, right = table.q[0, 0, 0]
    assert left == pytest.approx(right, rel=1e-14)
    mid = query_q(table, 0, 0, t, 0.0)
    assert mid == pytest.approx(0.5 * (left + right), rel=1e-12)


def test_off_grid_matches_direct_monte_carlo():
    chain = ChainSpec([0.1, 0.4], [[-0.5, 0.5], [0.5, -0.5]], [0.5, 0.5])
    market = MarketMap([0.05, 0.05], [0.1, 0.4], [5.0, 20.0])
    # linear interpolation of exp(-20 t) needs 20 * dt well below 1 for 2%
    t_grid = np.linspace(0.25, 0.40, 16)
    _, u_grid = default_grids(market, ArrivalModel.cox(), n_z=257)
    table = build_table(chain, market, t_grid, u_grid, 100_000, 8)
    t, z = 0.3131, 0.0421
    direct = direct_q(chain, market, t, z, 1_000_000, np.random.default_rng(77))
    got = table.q_at(t, z)
    for j in range(2):
        assert got[j].sum() == pytest.approx(direct[j].sum(), rel=0.02)
        assert got[j, j] == pytest.approx(direct[j, j], rel=0.02)


def direct_q(chain, market, t, z, n, rng):
    """Plain Monte Carlo of q_ji(t, z) for a two-state chain, one path at a time in bulk."""
    rates = -np.diag(chain.generator)
    out = np.zeros((2, 2))
    for j in range(2):
        state = np.full(n, j)
        clock = np.zeros(n)
        occ = np.zeros((n, 2))
        alive = np.ones(n, dtype=bool)
        while alive.any():
            hold = rng.exponential(1.0 / rates[state])
            stop = np.minimum(clock + hold, t)
            occ[np.arange(n), state] += np.where(alive, stop - clock, 0.0)
            clock = np.where(alive, stop, clock)
            jumped = alive & (clock < t)
            state = np.where(jumped, 1 - state, state)
            alive = jumped
        mean = occ @ market.log_drift
        var = occ @ market.vol**2
        dens = np.exp(-((z - mean) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)
        w = np.exp(-(occ @ market.intensity)) * dens
        for i in range(2):
            out[j, i] = w[state == i].sum() / n
    return out


def test_below_t_min_uses_exact_limit(sym2):
    _, _, table = sym2
    assert np.allclose(table.q_bar_at(1e-9), np.eye(2), atol=1e-6)
    v0 = table.vol[0]
    t = 1e-8
    assert query_q(table, 0, 0, t, 0.0) * math.sqrt(t) == pytest.approx(gauss(0.0, 0.0, v0 * v0), rel=1e-3)


def test_out_of_range(sym2):
    _, _, table = sym2
    with pytest.raises(OutOfRangeError):
        query_q_bar(table, 0, 0, 3.5)
    with pytest.raises(OutOfRangeError):
        query_q(table, 0, 0, 0.0, 0.0)


def test_stale_hash_on_query(sym2):
    _, _, table = sym2
    with pytest.raises(StaleTableError):
        query_q(table, 0, 0, 0.5, 0.0, model_hash="0" * 64)
    with pytest.raises(StaleTableError):
        query_q_bar(table, 0, 0, 0.5, model_hash="0" * 64)


def test_tail_extrapolation_is_continuous_and_positive(sym2):
    _, _, table = sym2
    t = 0.5
    edge = U_GRID[-1] * math.sqrt(t)
    inside = table.q_at(t, edge * (1 - 1e-9))
    outside = table.q_at(t, edge * (1 + 1e-9))
    assert np.allclose(inside, outside, rtol=1e-6, atol=1e-300)
    far = table.q_at(t, 10 * edge)
    assert np.all(far >= 0) and np.all(far <= outside)


def test_invalid_grids():
    chain = ChainSpec([1], [[0.0]], [1.0])
    market = MarketMap([0.0], [0.2], [1.0])
    with pytest.raises(InvalidGridError):
        build_table(chain, market, [0.0, 1.0], U_GRID, 10, 1)
    with pytest.raises(InvalidGridError):
        build_table(chain, market, [1.0, 0.5], U_GRID, 10, 1)
    with pytest.raises(InvalidGridError):
        build_table(chain, market, [], U_GRID, 10, 1)
    with pytest.raises(InvalidGridError):
        build_table(chain, market, T_GRID, U_GRID, 0, 1)


def test_thread_count_does_not_change_table(rand3):
    chain, market, table = rand3
    again = build_table(chain, market, T_GRID, U_GRID, 20_000, 23, threads=3)
    assert again == table


def test_se_scales_with_sample_count():
    chain = ChainSpec([1, 2], [[-1, 1], [1, -1]], [0.5, 0.5])
    market = MarketMap([0.0, 0.0], [0.1, 0.3], [1.0, 4.0])
    small = build_table(chain, market, T_GRID, U_GRID, 10_000, 1)
    large = build_table(chain, market, T_GRID, U_GRID, 20_000, 2)
    ratio = np.median(large.q_bar_se) / np.median(small.q_bar_se)
    assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.1)


def test_round_trip_is_bitwise(tmp_path, sym2):
    chain, market, table = sym2
    path = tmp_path / "t.bin"
    save_table(table, path)
    loaded = load_table(path, chain, market)
    assert loaded == table
    for name in ("t_grid", "u_grid", "q", "q_bar", "q_se", "q_bar_se"):
        assert getattr(loaded, name).tobytes() == getattr(table, name).tobytes()
    assert loaded.model_hash == model_digest(chain, market)


def test_load_with_other_model_is_stale(tmp_path, sym2):
    chain, market, table = sym2
    save_table(table, tmp_path / "t.bin")
    with pytest.raises(StaleTableError):
        load_table(tmp_path / "t.bin", chain, market.with_intensity([2.0, 6.5]))


def test_corruption_detected(tmp_path, sym2):
    _, _, table = sym2
    path = tmp_path / "t.bin"
    save_table(table, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_table(path)


def test_truncation_and_version(tmp_path, sym2):
    _, _, table = sym2
    path = tmp_path / "t.bin"
    save_table(table, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-100])
    with pytest.raises(TableFormatError):
        load_table(path)
    path.write_bytes(b"NOTATABLE" + raw[9:])
    with pytest.raises(TableFormatError):
        load_table(path)


def test_csv_export(tmp_path, sym2):
    _, _, table = sym2
    export_table_csv(table, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "kind,j,i,t,u,z,value,se"
    assert len(lines) == 1 + 4 * T_GRID.size * (1 + U_GRID.size)
