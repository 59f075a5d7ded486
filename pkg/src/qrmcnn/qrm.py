"""Quasi-reversibility solve of the Black-Scholes equation forwards in time.

The domain is the rectangle ``[stock bid, stock ask] x [0, 2 days]`` in
(stock price, forward time). Grid time ``t`` runs forward from today, so
time-to-maturity is ``tau = T - t`` and the Black-Scholes operator reads

    L u = du/dtau - (sigma^2 / 2) s^2 d2u/ds2 = -du/dt - (sigma^2 / 2) s^2 d2u/ds2.

Marching that forwards in ``t`` is ill-posed, so instead we minimize

    J(u) = ||L u||^2 + beta * ||u - F||_*^2

over grid functions that match the data on ``t = 0`` and on both stock-price
edges. ``F`` linearly interpolates the edge data in ``s`` (it matches all
constrained lines exactly), and ``||.||_*`` is a discrete H1 norm: nodal values
plus first differences in ``s`` and ``t``. All sums carry the cell area
``h_s * h_t`` so ``beta`` means the same thing on every grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import TRADING_DAY
from .market_data import OptionQuoteRow

DEFAULT_BETA = 0.01
DEFAULT_GRID = 20


class QrmError(ValueError):
    pass


class DegenerateInterval(QrmError):
    pass


class MissingHistory(QrmError):
    pass


class NonpositiveVol(QrmError):
    pass


class NoConvergence(RuntimeError):
    def __init__(self, iterations, residual):
        super().__init__(f"CG stopped after {iterations} iterations at relative residual {residual:.3e}")
        self.iterations = iterations
        self.residual = residual


class MissingGroundTruth(QrmError):
    pass


class ZeroDenominator(QrmError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    beta: float | None = None
    n_s: int | None = None
    n_t: int | None = None
    cg_tol: float = 1e-10
    cg_max_iter: int = 50_000


@dataclass(frozen=True)
class QrmGrid:
    s_lo: float
    s_hi: float
    n_s: int
    n_t: int
    day: float = TRADING_DAY

    def __post_init__(self):
        if not self.s_lo < self.s_hi:
            raise DegenerateInterval(f"empty stock interval [{self.s_lo}, {self.s_hi}]")
        if self.n_s < 3 or self.n_t < 3:
            raise QrmError(f"grid too small: n_s={self.n_s}, n_t={self.n_t}")

    @property
    def h_s(self) -> float:
        return (self.s_hi - self.s_lo) / (self.n_s + 1)

    @property
    def h_t(self) -> float:
        return 2 * self.day / (self.n_t - 1)

    @property
    def s(self) -> np.ndarray:
        """Stock-price nodes including both edges (length n_s + 2)."""
        return self.s_lo + self.h_s * np.arange(self.n_s + 2)

    @property
    def t(self) -> np.ndarray:
        return self.h_t * np.arange(self.n_t)


@dataclass(frozen=True)
class QrmProblem:
    grid: QrmGrid
    initial: np.ndarray
    boundary_lo: np.ndarray
    boundary_hi: np.ndarray
    sigma: float
    beta: float

    def __post_init__(self):
        g = self.grid
        if len(self.initial) != g.n_s + 2:
            raise QrmError("initial data must cover n_s + 2 nodes")
        if len(self.boundary_lo) != g.n_t or len(self.boundary_hi) != g.n_t:
            raise QrmError("boundary data must cover n_t time levels")
        if not self.sigma > 0:
            raise NonpositiveVol(f"sigma={self.sigma}")
        if not self.beta > 0:
            raise QrmError(f"beta must be positive, got {self.beta}")
        scale = max(1.0, float(np.max(np.abs(self.initial))))
        if (abs(self.initial[0] - self.boundary_lo[0]) > 1e-12 * scale
                or abs(self.initial[-1] - self.boundary_hi[0]) > 1e-12 * scale):
            raise QrmError("initial data disagrees with boundary data at t = 0")

    def reference_field(self) -> np.ndarray:
        """Linear-in-s interpolation of the edge data, shape (n_s + 2, n_t)."""
        w = (self.grid.s - self.grid.s_lo) / (self.grid.s_hi - self.grid.s_lo)
        field = self.boundary_lo[None, :] + np.outer(w, self.boundary_hi - self.boundary_lo)
        field[:, 0] = self.initial
        return field


@dataclass
class QrmSolution:
    u: np.ndarray
    est_1: float
    est_2: float
    residual_norm: float
    iterations: int = 0
    minimizer_error_1: float | None = None
    minimizer_error_2: float | None = None


def extrapolate_quadratic(v_m2: float, v_m1: float, v_0: float, x) -> np.ndarray:
    """Quadratic through (-2, v_m2), (-1, v_m1), (0, v_0) evaluated at x (in days)."""
    x = np.asarray(x, dtype=float)
    # Newton form: constant histories come out exact
    return v_0 + x * (v_0 - v_m1) + x * (x + 1) / 2 * ((v_0 - v_m1) - (v_m1 - v_m2))


def build_problem(row: OptionQuoteRow, overrides: SolverConfig | None = None) -> QrmProblem:
    cfg = overrides or SolverConfig()
    bids = (row.option_bid_m2, row.option_bid_m1, row.option_bid_0)
    asks = (row.option_ask_m2, row.option_ask_m1, row.option_ask_0)
    if any(v is None for v in bids + asks):
        raise MissingHistory(f"{row.row_id}: option bid/ask history for days -2..0 incomplete")
    if row.stock_bid_0 is None or row.stock_ask_0 is None:
        raise MissingHistory(f"{row.row_id}: no stock quote for today")
    if row.ivol_0 is None or not row.ivol_0 > 0:
        raise NonpositiveVol(f"{row.row_id}: ivol_0={row.ivol_0}")
    if not row.stock_bid_0 < row.stock_ask_0:
        raise DegenerateInterval(f"{row.row_id}: stock bid {row.stock_bid_0} >= ask {row.stock_ask_0}")

    n = cfg.n_s or row.grid_count or DEFAULT_GRID
    n_t = cfg.n_t or row.grid_count or DEFAULT_GRID
    beta = cfg.beta if cfg.beta is not None else (row.beta if row.beta is not None else DEFAULT_BETA)
    grid = QrmGrid(row.stock_bid_0, row.stock_ask_0, n, n_t)

    days = grid.t / grid.day
    lo = extrapolate_quadratic(*bids, days)
    hi = extrapolate_quadratic(*asks, days)
    # pin t = 0 to the quotes themselves so the corners agree bit-for-bit
    lo[0], hi[0] = bids[2], asks[2]
    w = (grid.s - grid.s_lo) / (grid.s_hi - grid.s_lo)
    initial = bids[2] + w * (asks[2] - bids[2])
    initial[0], initial[-1] = bids[2], asks[2]
    return QrmProblem(grid, initial, lo, hi, row.ivol_0, beta)


@dataclass
class LinearSystem:
    """Normal equations ``A x = b`` over the interior unknowns."""

    A: sp.csr_matrix
    b: np.ndarray
    x0: np.ndarray
    residual_op: sp.csr_matrix  # L acting on the full flattened grid
    known: np.ndarray  # full grid with data on constrained nodes, zeros elsewhere
    unknown: np.ndarray  # flat indices of the unknowns


def _index(n_t, i, j):
    return i * n_t + j


def _operators(p: QrmProblem):
    """Area-weighted residual operator and penalty operator on the full grid."""
    g = p.grid
    n_sx, n_t = g.n_s + 2, g.n_t
    size = n_sx * n_t
    h_s, h_t = g.h_s, g.h_t
    root_area = np.sqrt(h_s * h_t)
    diffusion = 0.5 * p.sigma ** 2 * g.s ** 2

    # residual sits at the cell midpoint (s_i, t_j + h_t / 2): centered in both
    # directions, with the s-curvature averaged over levels j and j + 1
    i, j = np.meshgrid(np.arange(1, g.n_s + 1), np.arange(n_t - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    c = 0.5 * diffusion[i] / h_s ** 2
    stencil = [(i, j + 1, np.full_like(c, -1.0 / h_t)), (i, j, np.full_like(c, 1.0 / h_t))]
    for level in (j, j + 1):
        stencil += [(i + 1, level, -c), (i, level, 2 * c), (i - 1, level, -c)]
    r = i.size
    rows = np.tile(np.arange(r), len(stencil))
    cols = np.concatenate([_index(n_t, ii, jj) for ii, jj, _ in stencil])
    vals = root_area * np.concatenate([v for _, _, v in stencil])
    L = sp.csr_matrix((vals, (rows, cols)), shape=(r, size))

    eye = sp.identity(size, format="csr")
    ds = sp.diags([-1.0, 1.0], [0, n_t], shape=((n_sx - 1) * n_t, size)) / h_s
    # forward differences in t, skipping pairs that wrap across an s line
    dt_full = sp.diags([-1.0, 1.0], [0, 1], shape=(size - 1, size), format="csr")
    keep = np.arange(size - 1) % n_t != n_t - 1
    dt = dt_full[keep] / h_t
    D = root_area * sp.vstack([eye, ds, dt], format="csr")
    return L, D


def assemble_system(p: QrmProblem) -> LinearSystem:
    g = p.grid
    n_sx, n_t = g.n_s + 2, g.n_t
    L, D = _operators(p)

    mask = np.zeros((n_sx, n_t), dtype=bool)
    mask[1:-1, 1:] = True
    unknown = np.flatnonzero(mask.ravel())

    known = np.zeros((n_sx, n_t))
    known[:, 0] = p.initial
    known[0, :] = p.boundary_lo
    known[-1, :] = p.boundary_hi
    known[mask] = 0.0

    L_u = L[:, unknown]
    D_u = D[:, unknown]
    ref = p.reference_field().ravel()[unknown]
    penalty = (D_u.T @ D_u).tocsr()
    A = (L_u.T @ L_u + p.beta * penalty).tocsr()
    A.sort_indices()
    b = -(L_u.T @ (L @ known.ravel())) + p.beta * (penalty @ ref)
    return LinearSystem(A, b, ref.copy(), L, known, unknown)


def conjugate_gradient(A, b, x0=None, tol=1e-10, max_iter=50_000, precondition=None):
    """Preconditioned CG; stops when ||b - A x|| <= tol * ||b||.

    ``precondition`` maps a residual to M^-1 r for an SPD M; the default is
    Jacobi. Returns ``(x, iterations, relative_residual)``. Raises
    NoConvergence at the iteration cap.
    """
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros_like(b), 0, 0.0
    if precondition is None:
        inv_diag = 1.0 / A.diagonal()

        def precondition(v):
            return inv_diag * v
    r = b - A @ x
    rel = np.linalg.norm(r) / b_norm
    if rel <= tol:
        return x, 0, rel
    z = precondition(r)
    d = z.copy()
    rz = r @ z
    for k in range(1, max_iter + 1):
        Ad = A @ d
        alpha = rz / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        if k % 50 == 0:
            # refresh to stop rounding drift in the recursive residual
            r = b - A @ x
        rel = np.linalg.norm(r) / b_norm
        if rel <= tol:
            r = b - A @ x
            rel = np.linalg.norm(r) / b_norm
            if rel <= tol:
                return x, k, rel
        z = precondition(r)
        rz_new = r @ z
        d = z + (rz_new / rz) * d
        rz = rz_new
    raise NoConvergence(max_iter, rel)


def _bilinear(u: np.ndarray, grid: QrmGrid, s: float, t: float) -> float:
    fi = (s - grid.s_lo) / grid.h_s
    fj = t / grid.h_t
    i = min(int(np.floor(fi)), grid.n_s)
    j = min(int(np.floor(fj)), grid.n_t - 2)
    a, c = fi - i, fj - j
    lo = u[i, j] + a * (u[i + 1, j] - u[i, j])
    hi = u[i, j + 1] + a * (u[i + 1, j + 1] - u[i, j + 1])
    return float(lo + c * (hi - lo))


def time_level_preconditioner(system: LinearSystem, n_t: int):
    """Block-Jacobi over time levels: each block couples every s node of one level.

    The s-curvature term dominates the conditioning, and it lives inside these
    blocks; plain Jacobi needs tens of times more iterations.
    """
    level = system.unknown % n_t
    coo = system.A.tocoo()
    keep = level[coo.row] == level[coo.col]
    blocks = sp.csc_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=system.A.shape)
    return splu(blocks).solve


def solve(p: QrmProblem, cg_tol: float = 1e-10, cg_max_iter: int = 50_000) -> QrmSolution:
    system = assemble_system(p)
    x, iterations, _ = conjugate_gradient(system.A, system.b, system.x0, cg_tol, cg_max_iter,
                                          time_level_preconditioner(system, p.grid.n_t))
    g = p.grid
    full = system.known.ravel().copy()
    full[system.unknown] = x
    residual = system.residual_op @ full
    u = full.reshape(g.n_s + 2, g.n_t)
    s_mid = 0.5 * (g.s_lo + g.s_hi)
    return QrmSolution(
        u=u,
        est_1=_bilinear(u, g, s_mid, g.day),
        est_2=_bilinear(u, g, s_mid, 2 * g.day),
        residual_norm=float(np.linalg.norm(residual)),
        iterations=iterations,
    )


def functional(p: QrmProblem, u: np.ndarray) -> tuple[float, float]:
    """(||L u||^2, ||u - F||_*^2) for a full grid function u."""
    L, D = _operators(p)
    flat = np.asarray(u, dtype=float).ravel()
    res = L @ flat
    dev = D @ (flat - p.reference_field().ravel())
    return float(res @ res), float(dev @ dev)


def minimizer_error(sol: QrmSolution, row: OptionQuoteRow) -> tuple[float, float]:
    """Relative errors of the two estimates against the realized option means."""
    out = []
    for est, mean, tag in ((sol.est_1, row.option_mean_p1, "p1"), (sol.est_2, row.option_mean_p2, "p2")):
        if mean is None:
            raise MissingGroundTruth(f"{row.row_id}: option_mean_{tag} unpopulated")
        if mean == 0:
            raise ZeroDenominator(f"{row.row_id}: option_mean_{tag} is zero")
        out.append(abs(est - mean) / abs(mean))
    return out[0], out[1]
