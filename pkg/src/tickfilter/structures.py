"""Offline Monte Carlo tables of the structure kernels.

For a chain started in state ``j`` the table estimates

    q_ji(t, z)  = E_j[ 1{theta_t = a_i} exp(-int_0^t n) rho_{0,t}(z) ]
    qbar_ji(t)  = E_j[ 1{theta_t = a_i} exp(-int_0^t n) ]

which are the only path functionals the online recursion needs.

The log-return axis is stored in scaled form ``u = z / sqrt(t)``, and ``q``
is stored as the density of ``u`` (``sqrt(t)`` times the density of ``z``).
The Gaussian width in ``u`` does not shrink with ``t``, so one grid
resolves both short and long gaps.  ``query_q`` takes and returns raw ``z``
quantities.

Below ``t_grid[0]`` values are interpolated against the exact ``t -> 0``
limit (``qbar = I``, scaled ``q_jj = N(0, v_j^2)``).
"""

from __future__ import annotations

import csv
import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .model import ChainSpec, MarketMap, check_compatible, model_digest
from .simulate import Seed, make_rng, spawn_streams

MAGIC = b"TKFQTAB\n"
FORMAT_VERSION = 1
_ROW_CHUNK = 8192


class TableError(ValueError):
    """Base class for structure-table failures."""


class InvalidGridError(TableError):
    pass


class OutOfRangeError(TableError):
    pass


class StaleTableError(TableError):
    """The table was built for a different model."""


class TableFormatError(TableError):
    """Bad magic, unsupported version or truncated file."""


class ChecksumError(TableFormatError):
    pass


@dataclass(frozen=True, eq=False)
class StructureTable:
    """Tabulated ``q`` (scaled density, shape ``(M, M, T, Z)``) and ``q_bar`` (``(M, M, T)``).

    Index order is ``[j, i, t, u]``: start state, end state, time node,
    scaled offset node.  ``q_se`` and ``q_bar_se`` hold per-cell Monte Carlo
    standard errors.  ``log_drift`` and ``vol`` are copied from the market
    map for the ``t -> 0`` limit and tail extrapolation.
    """

    t_grid: NDArray[np.float64]
    u_grid: NDArray[np.float64]
    q: NDArray[np.float64]
    q_bar: NDArray[np.float64]
    q_se: NDArray[np.float64]
    q_bar_se: NDArray[np.float64]
    log_drift: NDArray[np.float64]
    vol: NDArray[np.float64]
    n_samples: int
    model_hash: str

    def __post_init__(self) -> None:
        for name in ("t_grid", "u_grid", "q", "q_bar", "q_se", "q_bar_se", "log_drift", "vol"):
            arr = np.ascontiguousarray(getattr(self, name), dtype="<f8")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        m, t, z = self.n_states, self.t_grid.size, self.u_grid.size
        if self.q.shape != (m, m, t, z) or self.q_bar.shape != (m, m, t):
            raise TableFormatError("table arrays have inconsistent shapes")
        # t = 0 limit prepended for interpolation
        t_aug = np.concatenate([[0.0], self.t_grid])
        q0 = np.zeros((m, m, 1, z))
        for j in range(m):
            q0[j, j, 0] = _normal_pdf(self.u_grid, 0.0, self.vol[j] ** 2)
        object.__setattr__(self, "_t_aug", t_aug)
        object.__setattr__(self, "_q_aug", np.concatenate([q0, self.q], axis=2))
        qb0 = np.eye(m)[:, :, None]
        object.__setattr__(self, "_qbar_aug", np.concatenate([qb0, self.q_bar], axis=2))
        widest = int(np.argmax(self.vol))
        object.__setattr__(self, "_tail_drift", float(self.log_drift[widest]))
        object.__setattr__(self, "_tail_var", float(self.vol[widest] ** 2))

    @property
    def n_states(self) -> int:
        return self.vol.size

    @property
    def t_max(self) -> float:
        return float(self.t_grid[-1])

    def check_model(self, chain: ChainSpec, market: MarketMap) -> None:
        digest = model_digest(chain, market)
        if digest != self.model_hash:
            raise StaleTableError(
                f"table digest {self.model_hash[:12]} does not match model {digest[:12]}"
            )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, StructureTable):
            return NotImplemented
        return (
            self.n_samples == other.n_samples
            and self.model_hash == other.model_hash
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("t_grid", "u_grid", "q", "q_bar", "q_se", "q_bar_se", "log_drift", "vol")
            )
        )

    # --- interpolation ----------------------------------------------------

    def _bracket(self, t: NDArray) -> tuple[NDArray, NDArray]:
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0):
            raise OutOfRangeError("elapsed time must be > 0")
        if np.any(t > self.t_max * (1 + 1e-12)):
            raise OutOfRangeError(
                f"elapsed time {float(np.max(t)):.6g} beyond table range {self.t_max:.6g}; extend t_grid"
            )
        t_aug = self._t_aug
        k = np.clip(np.searchsorted(t_aug, t, side="right") - 1, 0, t_aug.size - 2)
        w = (t - t_aug[k]) / (t_aug[k + 1] - t_aug[k])
        return k, np.clip(w, 0.0, 1.0)

    def q_bar_at(self, t) -> NDArray[np.float64]:
        """``q_bar`` linearly interpolated in ``t``; shape ``t.shape + (M, M)``."""
        t = np.asarray(t, dtype=float)
        k, w = self._bracket(t.reshape(-1))
        qa = self._qbar_aug
        lo = np.moveaxis(qa[:, :, k], 2, 0)
        hi = np.moveaxis(qa[:, :, k + 1], 2, 0)
        out = (1.0 - w)[:, None, None] * lo + w[:, None, None] * hi
        return out.reshape(t.shape + (self.n_states, self.n_states))

    def _scaled_at_node(self, node: int, u: float) -> NDArray[np.float64]:
        grid = self.u_grid
        vals = self._q_aug[:, :, node, :]
        if grid[0] <= u <= grid[-1]:
            pos = np.searchsorted(grid, u, side="right") - 1
            pos = min(max(pos, 0), grid.size - 2)
            a = (u - grid[pos]) / (grid[pos + 1] - grid[pos])
            return (1.0 - a) * vals[:, :, pos] + a * vals[:, :, pos + 1]
        edge = 0 if u < grid[0] else grid.size - 1
        mu = self._tail_drift * math.sqrt(self._t_aug[node])
        u_e = grid[edge]
        factor = math.exp(-((u - mu) ** 2 - (u_e - mu) ** 2) / (2.0 * self._tail_var))
        return vals[:, :, edge] * factor

    def q_at(self, t: float, z: float) -> NDArray[np.float64]:
        """``(M, M)`` matrix of ``q_ji(t, z)`` as a density in ``z``."""
        k, w = self._bracket(np.array([t]))
        k, w = int(k[0]), float(w[0])
        u = z / math.sqrt(t)
        scaled = (1.0 - w) * self._scaled_at_node(k, u) + w * self._scaled_at_node(k + 1, u)
        return np.clip(scaled, 0.0, None) / math.sqrt(t)


def _normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def query_q(table: StructureTable, j: int, i: int, t: float, z: float, model_hash: str | None = None) -> float:
    """Interpolated ``q_ji(t, z)``: bilinear in ``(t, u = z/sqrt(t))``, Gaussian tail outside the u grid."""
    if model_hash is not None and model_hash != table.model_hash:
        raise StaleTableError("table does not match the current model")
    return float(table.q_at(t, z)[j, i])


def query_q_bar(table: StructureTable, j: int, i: int, t: float, model_hash: str | None = None) -> float:
    if model_hash is not None and model_hash != table.model_hash:
        raise StaleTableError("table does not match the current model")
    return float(table.q_bar_at(t)[j, i])


# --- grids ----------------------------------------------------------------

def default_t_grid(fast_rate: float, slow_rate: float, n_t: int = 96) -> NDArray[np.float64]:
    """Geometric nodes from ``(1/fast_rate)/50`` to ``20/slow_rate``."""
    if not (fast_rate > 0 and slow_rate > 0):
        raise InvalidGridError("rates must be positive to size the t grid")
    return np.geomspace(1.0 / fast_rate / 50.0, 20.0 / slow_rate, n_t)


def default_u_grid(market: MarketMap, t_max: float, n_z: int = 257) -> NDArray[np.float64]:
    """Scaled offsets covering every state's mean over ``[0, t_max]`` plus 8 widest sds."""
    root = math.sqrt(t_max)
    means = market.log_drift * root
    half = 8.0 * float(np.max(market.vol))
    lo = min(0.0, float(means.min())) - half
    hi = max(0.0, float(means.max())) + half
    return np.linspace(lo, hi, n_z)


# --- Monte Carlo construction -------------------------------------------

def _sample_jump_paths(gen: NDArray, j: int, n: int, t_max: float, rng: np.random.Generator):
    """Vectorized chain paths from state ``j``; padded segments start at ``t_max``."""
    m = gen.shape[0]
    rates = -np.diag(gen)
    jump_p = np.where(rates[:, None] > 0, gen / np.where(rates > 0, rates, 1.0)[:, None], 0.0)
    np.fill_diagonal(jump_p, 0.0)
    cum_p = np.cumsum(jump_p, axis=1)
    state = np.full(n, j, dtype=np.int64)
    t = np.zeros(n)
    starts, states = [t.copy()], [state.copy()]
    alive = np.full(n, rates[j] > 0)
    while alive.any():
        e = rng.standard_exponential(n)
        u = rng.random(n)
        r = rates[state]
        with np.errstate(divide="ignore"):
            t_new = t + np.where(r > 0, e / np.where(r > 0, r, 1.0), np.inf)
        jumped = alive & (t_new < t_max)
        nxt = np.minimum((u[:, None] > cum_p[state]).sum(axis=1), m - 1)
        t = np.where(jumped, t_new, t_max)
        state = np.where(jumped, nxt, state)
        starts.append(t.copy())
        states.append(state.copy())
        alive = jumped & (rates[state] > 0)
    return np.stack(starts, axis=1), np.stack(states, axis=1)


def _occupation_at(starts: NDArray, states: NDArray, t: float, m: int):
    n, k = starts.shape
    ends = np.concatenate([starts[:, 1:], np.full((n, 1), np.inf)], axis=1)
    overlap = np.clip(np.minimum(ends, t) - starts, 0.0, None)
    occ = np.empty((n, m))
    for s in range(m):
        occ[:, s] = np.where(states == s, overlap, 0.0).sum(axis=1)
    rows = np.arange(n)
    last = (starts <= t).sum(axis=1) - 1
    end_state = states[rows, last]
    return occ, end_state


def _build_start_state(j, chain, market, t_grid, u_grid, n_samples, seed_seq):
    m = chain.n_states
    rng = make_rng(seed_seq)
    starts, states = _sample_jump_paths(chain.generator, j, n_samples, float(t_grid[-1]), rng)
    first_jump = starts[:, 1] if starts.shape[1] > 1 else np.full(n_samples, np.inf)
    nt, nz = t_grid.size, u_grid.size
    q_sum = np.zeros((m, nt, nz))
    q_sq = np.zeros((m, nt, nz))
    qb_sum = np.zeros((m, nt))
    qb_sq = np.zeros((m, nt))
    ld, v2, inten = market.log_drift, market.vol**2, market.intensity
    for k, t in enumerate(t_grid):
        root = math.sqrt(t)
        occ, end = _occupation_at(starts, states, t, m)
        w = np.exp(-(occ @ inten))
        qb_sum[:, k] = np.bincount(end, weights=w, minlength=m)
        qb_sq[:, k] = np.bincount(end, weights=w * w, minlength=m)
        # paths with no jump before t share one occupation vector
        still = first_jump > t
        n_still = int(still.sum())
        if n_still:
            w0 = math.exp(-inten[j] * t)
            r0 = _normal_pdf(u_grid, ld[j] * root, v2[j])
            q_sum[j, k] += n_still * w0 * r0
            q_sq[j, k] += n_still * (w0 * r0) ** 2
        moved = np.flatnonzero(~still)
        for c0 in range(0, moved.size, _ROW_CHUNK):
            idx = moved[c0:c0 + _ROW_CHUNK]
            mean_u = (occ[idx] @ ld) / root
            var_u = (occ[idx] @ v2) / t
            dens = _normal_pdf(u_grid[None, :], mean_u[:, None], var_u[:, None])
            wm = np.zeros((idx.size, m))
            wm[np.arange(idx.size), end[idx]] = w[idx]
            q_sum[:, k] += wm.T @ dens
            q_sq[:, k] += (wm * wm).T @ (dens * dens)
    return q_sum, q_sq, qb_sum, qb_sq


def _mean_se(total, total_sq, n):
    mean = total / n
    if n < 2:
        return mean, np.zeros_like(mean)
    var = total_sq / n - mean * mean
    # summing n terms leaves up to ~n * eps * mean^2 of roundoff in the
    # one-pass formula; anything below that is indistinguishable from zero
    floor = 4.0 * n * np.finfo(float).eps * mean * mean
    var = np.where(var > floor, var, 0.0) * n / (n - 1)
    return mean, np.sqrt(var / n)


def build_table(
    chain: ChainSpec,
    market: MarketMap,
    t_grid,
    u_grid,
    n_samples: int,
    rng_seed: Seed,
    threads: int = 1,
) -> StructureTable:
    """Monte Carlo estimate of ``q`` and ``q_bar`` on the given grids.

    Each start state gets its own child stream of ``rng_seed`` and a single
    batch of ``n_samples`` paths of length ``t_grid[-1]`` reused at every
    time node.  The result does not depend on ``threads``.
    """
    check_compatible(chain, market)
    t_grid = np.asarray(t_grid, dtype=float).reshape(-1)
    u_grid = np.asarray(u_grid, dtype=float).reshape(-1)
    if t_grid.size == 0 or u_grid.size < 2:
        raise InvalidGridError("t_grid must be non-empty and u_grid needs >= 2 nodes")
    if np.any(t_grid <= 0):
        raise InvalidGridError("t_grid entries must be > 0")
    if np.any(np.diff(t_grid) <= 0) or np.any(np.diff(u_grid) <= 0):
        raise InvalidGridError("grids must be strictly increasing")
    if n_samples < 1:
        raise InvalidGridError("n_samples must be >= 1")
    m = chain.n_states
    seeds = spawn_streams(rng_seed, m)

    def work(j):
        return _build_start_state(j, chain, market, t_grid, u_grid, n_samples, seeds[j])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, range(m)))
    else:
        parts = [work(j) for j in range(m)]
    q, q_se = zip(*(_mean_se(p[0], p[1], n_samples) for p in parts))
    qb, qb_se = zip(*(_mean_se(p[2], p[3], n_samples) for p in parts))
    return StructureTable(
        t_grid=t_grid,
        u_grid=u_grid,
        q=np.stack(q),
        q_bar=np.stack(qb),
        q_se=np.stack(q_se),
        q_bar_se=np.stack(qb_se),
        log_drift=market.log_drift,
        vol=market.vol,
        n_samples=int(n_samples),
        model_hash=model_digest(chain, market),
    )


# --- persistence ------------------------------------------------------------

_ARRAYS = ("t_grid", "u_grid", "log_drift", "vol", "q", "q_bar", "q_se", "q_bar_se")


def save_table(table: StructureTable, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    little-endian float64 arrays in header order, trailing u32 CRC32."""
    header = {
        "model_hash": table.model_hash,
        "n_samples": table.n_samples,
        "arrays": [[name, list(getattr(table, name).shape)] for name in _ARRAYS],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(hbytes))
    body += hbytes
    for name in _ARRAYS:
        body += getattr(table, name).tobytes(order="C")
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_table(path: str | Path, chain: ChainSpec | None = None, market: MarketMap | None = None) -> StructureTable:
    """Read a table; with ``chain`` and ``market`` the stored digest is re-verified."""
    raw = Path(path).read_bytes()
    fixed = len(MAGIC) + 8
    if len(raw) < fixed + 4:
        raise TableFormatError(f"{path}: truncated table file")
    if raw[: len(MAGIC)] != MAGIC:
        raise TableFormatError(f"{path}: not a structure table (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted or truncated")
    version, hlen = struct.unpack("<II", raw[len(MAGIC):fixed])
    if version != FORMAT_VERSION:
        raise TableFormatError(f"{path}: unsupported table format version {version}")
    header = json.loads(raw[fixed:fixed + hlen])
    offset = fixed + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw) - 4:
            raise TableFormatError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw) - 4:
        raise TableFormatError(f"{path}: trailing bytes after arrays")
    table = StructureTable(n_samples=int(header["n_samples"]), model_hash=header["model_hash"], **arrays)
    if chain is not None and market is not None:
        table.check_model(chain, market)
    return table


def export_table_csv(table: StructureTable, path: str | Path) -> None:
    """Long-format CSV: ``kind,j,i,t,u,z,value,se`` (``u``/``z`` empty for q_bar rows)."""
    m = table.n_states
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["kind", "j", "i", "t", "u", "z", "value", "se"])
        for j in range(m):
            for i in range(m):
                for k, t in enumerate(table.t_grid):
                    out.writerow(["q_bar", j, i, repr(float(t)), "", "",
                                  repr(float(table.q_bar[j, i, k])), repr(float(table.q_bar_se[j, i, k]))])
                    root = math.sqrt(t)
                    for l, u in enumerate(table.u_grid):
                        out.writerow(["q", j, i, repr(float(t)), repr(float(u)), repr(float(u * root)),
                                      repr(float(table.q[j, i, k, l] / root)),
                                      repr(float(table.q_se[j, i, k, l] / root))])


def default_grids(market: MarketMap, arrivals, n_t: int = 96, n_z: int = 257,
                  t_min: float | None = None, t_max: float | None = None):
    """``(t_grid, u_grid)`` sized for the arrival law.

    ``market`` is the model's own map; the u grid is built from its drift
    and volatility, the t grid from the arrival rates.
    """
    from .arrivals import COX, FIXED_GRID

    if arrivals.kind == FIXED_GRID:
        t_grid = np.array([arrivals.step])
    else:
        if arrivals.kind == COX:
            rates = market.intensity[market.intensity > 0]
            if rates.size == 0:
                raise InvalidGridError("cox arrivals need a positive intensity")
            fast, slow = float(rates.max()), float(rates.min())
        else:
            fast = slow = float(arrivals.rate)
        t_grid = default_t_grid(fast, slow, n_t)
        if t_min is not None or t_max is not None:
            lo = t_min if t_min is not None else float(t_grid[0])
            hi = t_max if t_max is not None else float(t_grid[-1])
            if not 0 < lo < hi:
                raise InvalidGridError("need 0 < t_min < t_max")
            t_grid = np.geomspace(lo, hi, n_t)
    return t_grid, default_u_grid(market, float(t_grid[-1]), n_z)
