"""Reference beamformers, grid-search oracles and comparison tables.

The grid searches enumerate the same (alpha, p) space the learned
beamformer covers: per-user hybrid coefficient alpha_k on a uniform grid
of [0, 1] and per-user powers on a discretised simplex.  Ties go to the
lexicographically smallest grid index, i.e. the first maximum in
enumeration order.
"""
from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import channel
from .channel import SystemConfig


class GridBudgetError(ValueError):
    """The requested grid is larger than the configured budget."""


@dataclass(frozen=True)
class GridSpec:
    alpha_points: int = 11
    power_points: int = 11
    position_points: int = 50
    budget: int = 50_000_000

    def __post_init__(self):
        if min(self.alpha_points, self.power_points, self.position_points) < 2:
            raise ValueError("every grid needs at least 2 points")
        if self.budget < 1:
            raise ValueError("budget must be positive")

    def alpha_grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.alpha_points)

    def check(self, size: int, what: str) -> None:
        if size > self.budget:
            raise GridBudgetError(f"{what} needs {size} grid cells, budget is {self.budget}; "
                                  f"raise the budget to at least {size} or coarsen the grid")


def power_grid(n_users: int, levels: int, p_max: float) -> np.ndarray:
    """Candidate power tuples, shape (M, K).

    All K-tuples of the levels linspace(0, P_max, levels) with sum <= P_max,
    followed by the same tuples rescaled onto sum = P_max (the full-power
    face).  Duplicates and the all-zero tuple are dropped; the order is
    deterministic.
    """
    lv = np.linspace(0.0, 1.0, levels)
    steps = np.array(list(itertools.product(range(levels), repeat=n_users)), dtype=np.int64)
    steps = steps[steps.sum(axis=1) <= levels - 1]
    steps = steps[steps.sum(axis=1) > 0]
    inside = lv[steps]
    boundary = inside / inside.sum(axis=1, keepdims=True)
    cand = np.concatenate([inside, boundary]) * p_max
    # drop tuples equal to 12 decimals, keeping the first occurrence order
    _, first = np.unique(np.round(cand / p_max, 12), axis=0, return_index=True)
    return cand[np.sort(first)]


@dataclass
class BaselineResult:
    method: str
    positions: np.ndarray
    beams: np.ndarray  # (N, K)
    utility: float
    seconds: float
    alpha: np.ndarray | None = None
    power: np.ndarray | None = None


# ---------------------------------------------------------------------------
# closed-form baselines


def _columns(g: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(g, -1, -2))


def _normalise(a: np.ndarray) -> np.ndarray:
    return a / np.linalg.norm(a, axis=-2, keepdims=True)


def zf_basis(g: np.ndarray) -> np.ndarray:
    """U = G^H (G G^H)^-1 for channels (..., K, N)."""
    gh = _columns(g)
    return gh @ np.linalg.inv(g @ gh)


def mrt_equal_power(g: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """w_k = sqrt(P_max/K) h_k/|h_k|; works on batches (..., K, N)."""
    k = g.shape[-2]
    return math.sqrt(cfg.p_max / k) * _normalise(_columns(g))


def zf_equal_power(g: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    """w_k = sqrt(P_max/K) u_k/|u_k|."""
    k = g.shape[-2]
    return math.sqrt(cfg.p_max / k) * _normalise(zf_basis(g))


def hybrid_directions(g: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Unit hybrid directions for every user and alpha value, (A, N, K)."""
    u = _normalise(zf_basis(g))
    h = _normalise(_columns(g))
    a = np.asarray(alphas, dtype=np.float64)[:, None, None]
    return _normalise(a * u + (1.0 - a) * h)


# ---------------------------------------------------------------------------
# grid search


def _grid_utilities(g: np.ndarray, cfg: SystemConfig, alphas: np.ndarray, powers: np.ndarray,
                    kind: str) -> np.ndarray:
    """Utility of every (alpha combination, power tuple), shape (A^K, M).

    Row order is itertools.product over the per-user alpha indices.
    """
    k = g.shape[-2]
    dirs = hybrid_directions(g, alphas)  # (A, N, K)
    # table[a, k, i] = |g_k . wbar_i(alpha = alphas[a])|^2
    table = np.abs(np.einsum("kn,ani->aki", g, dirs)) ** 2
    combos = np.array(list(itertools.product(range(len(alphas)), repeat=k)), dtype=np.int64)  # (C, K)
    users = np.arange(k)
    # gains[c, k, i] = table[combos[c, i], k, i]
    gains = table[combos[:, None, :], users[None, :, None], users[None, None, :]]
    d = cfg.gains(k) if cfg.path_loss else np.ones(k)
    received = np.einsum("cki,mi->cmk", gains, powers)  # sum_i p_i gain[k, i]
    signal = np.einsum("ckk,mk->cmk", gains, powers)
    sinr = d * signal / (d * (received - signal) + cfg.noise_power)
    rate = np.log2(1.0 + sinr).sum(axis=-1)
    if kind == "sum_rate":
        return rate
    if kind == "energy_efficiency":
        return rate / (powers.sum(axis=-1)[None, :] + cfg.p_c)
    raise ValueError(f"unknown utility {kind!r}")


def hzf_grid_search(g: np.ndarray, cfg: SystemConfig, grid: GridSpec | None = None,
                    kind: str = "sum_rate", positions=None) -> BaselineResult:
    """Exhaustive search over per-user alpha and the power simplex for one channel (K, N)."""
    grid = grid or GridSpec()
    t0 = time.perf_counter()
    g = np.asarray(g)
    k = g.shape[-2]
    alphas = grid.alpha_grid()
    powers = power_grid(k, grid.power_points, cfg.p_max)
    grid.check(len(alphas) ** k * len(powers), "hzf grid search")
    table = _grid_utilities(g, cfg, alphas, powers, kind)
    best = int(np.argmax(table))  # first maximum = smallest flat index
    c, m = divmod(best, table.shape[1])
    combo = np.array(np.unravel_index(c, (len(alphas),) * k))
    alpha = alphas[combo]
    dirs = hybrid_directions(g, alphas)
    direction = dirs[combo, :, np.arange(k)].T  # (N, K)
    beams = direction * np.sqrt(powers[m])[None, :]
    return BaselineResult("hzf_grid_search", None if positions is None else np.asarray(positions),
                          beams, float(table.flat[best]), time.perf_counter() - t0, alpha, powers[m].copy())


def position_candidates(cfg: SystemConfig, points: int) -> np.ndarray:
    """Feasible position vectors on a nested grid with x_1 = 0, shape (M, N).

    x_2 runs over ``points`` values in [spacing, D - (N-2) spacing]; for
    N = 3, x_3 runs over ``points`` values in [x_2 + spacing, D].
    """
    n, s, big_d = cfg.n_antennas, cfg.min_spacing, cfg.aperture
    if n > 3:
        raise GridBudgetError(f"position oracle supports N <= 3, got N={n}")
    if n == 1:
        return np.zeros((1, 1))
    second = np.linspace(s, big_d - (n - 2) * s, points)
    if n == 2:
        return np.stack([np.zeros(points), second], axis=1)
    rows = [(0.0, x2, x3) for x2 in second for x3 in np.linspace(x2 + s, big_d, points)]
    return np.array(rows)


def position_grid_oracle(angles, cfg: SystemConfig, grid: GridSpec | None = None,
                         kind: str = "sum_rate") -> BaselineResult:
    """Nested search: positions on a grid, hzf_grid_search inside.

    Fixing x_1 = 0 loses nothing: shifting every antenna by the same
    offset multiplies each user's channel by a unit phase, which leaves
    every hybrid direction's gains unchanged.
    """
    grid = grid or GridSpec()
    t0 = time.perf_counter()
    angles = np.asarray(angles, dtype=np.float64)
    k = angles.shape[-1]
    cand = position_candidates(cfg, grid.position_points)
    n_inner = grid.alpha_points ** k * len(power_grid(k, grid.power_points, cfg.p_max))
    grid.check(len(cand) * n_inner, "position grid oracle")
    best = None
    for x in cand:
        res = hzf_grid_search(channel.channel_matrix(x, angles, cfg), cfg, grid, kind, positions=x)
        if best is None or res.utility > best.utility:
            best = res
    best.method = "position_grid_oracle"
    best.seconds = time.perf_counter() - t0
    return best


# ---------------------------------------------------------------------------
# comparison table


@dataclass
class ComparisonRow:
    method: str
    positions: str
    beams: str
    mean_utility: float
    ms_per_sample: float
    n_samples: int


@dataclass
class ComparisonTable:
    utility: str
    rows: list = field(default_factory=list)

    def __getitem__(self, method: str) -> ComparisonRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["method", "positions", "beams", "utility", "mean_utility", "ms_per_sample", "n_samples"])
            for r in self.rows:
                out.writerow([r.method, r.positions, r.beams, self.utility, repr(r.mean_utility),
                              f"{r.ms_per_sample:.6f}", r.n_samples])

    def to_text(self) -> str:
        head = ("method", "positions", "beams", f"mean {self.utility}", "ms/sample")
        body = [(r.method, r.positions, r.beams, f"{r.mean_utility:.4f}", f"{r.ms_per_sample:.3f}") for r in self.rows]
        widths = [max(len(str(row[i])) for row in [head, *body]) for i in range(len(head))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        lines = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
        lines += [fmt.format(*row) for row in body]
        return "\n".join(lines)


def _closed_form_row(name, beams_fn, angles, x, cfg, kind) -> ComparisonRow:
    t0 = time.perf_counter()
    g = channel.channel_matrix(x, angles, cfg)
    w = beams_fn(g, cfg)
    u = channel.utility(w, g, cfg, kind)
    return ComparisonRow(name, "equidistant", name.split("+")[-1], float(np.mean(u)),
                         1e3 * (time.perf_counter() - t0) / len(angles), len(angles))


def compare_table(model, angles, cfg: SystemConfig, grid: GridSpec | None = None,
                  kind: str = "sum_rate", include_grid: bool = True,
                  include_closed_form: bool = True) -> ComparisonTable:
    """Mean utility per method on one set of angle vectors.

    The four core cells cross {equidistant, stage-1} positions with
    {grid search, stage-2} beams.  ``model`` may be None, which leaves only
    the equidistant rows.
    """
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    cfg = cfg.with_users(angles.shape[-1])
    n = len(angles)
    x_eq = channel.equidistant_positions(cfg)
    table = ComparisonTable(kind)
    if include_closed_form:
        table.rows.append(_closed_form_row("equidistant+mrt_equal_power", mrt_equal_power, angles, x_eq, cfg, kind))
        table.rows.append(_closed_form_row("equidistant+zf_equal_power", zf_equal_power, angles, x_eq, cfg, kind))
    x_model = None
    if model is not None:
        t0 = time.perf_counter()
        sol = model.forward(angles, training=False)
        x_model = sol.x.data
        u = channel.utility(sol.w.data, sol.g.data, cfg, kind)
        ms_two = 1e3 * (time.perf_counter() - t0) / n
        t0 = time.perf_counter()
        sol_eq = model.forward(angles, training=False, positions=x_eq)
        u_eq = channel.utility(sol_eq.w.data, sol_eq.g.data, cfg, kind)
        ms_eq = 1e3 * (time.perf_counter() - t0) / n
        table.rows.append(ComparisonRow("equidistant+stage2", "equidistant", "stage2", float(np.mean(u_eq)), ms_eq, n))
        table.rows.append(ComparisonRow("stage1+stage2", "stage1", "stage2", float(np.mean(u)), ms_two, n))
    if include_grid:
        cells = [("equidistant+grid", "equidistant", np.broadcast_to(x_eq, (n, cfg.n_antennas)))]
        if x_model is not None:
            cells.append(("stage1+grid", "stage1", x_model))
        for name, where, xs in cells:
            t0 = time.perf_counter()
            vals = [hzf_grid_search(channel.channel_matrix(xs[i], angles[i], cfg), cfg, grid, kind).utility
                    for i in range(n)]
            table.rows.append(ComparisonRow(name, where, "grid", float(np.mean(vals)),
                                            1e3 * (time.perf_counter() - t0) / n, n))
    return table
