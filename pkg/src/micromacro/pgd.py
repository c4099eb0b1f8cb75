"""Greedy rank-one (tensor-product) solver for the Poisson problem on a rectangle.

Grid functions are arrays ``g[i, j]`` on the interior nodes
``(i h_x, j h_y)`` of a uniform grid with homogeneous Dirichlet boundary.
The discrete Laplacian is the 5-point stencil, ``-Lap g = T_x g + g T_y``
with ``T = tridiag(-1, 2, -1) / h^2`` in each direction.  Inner products
carry the cell measure ``h_x h_y``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.fft import dstn
from scipy.linalg import solveh_banded
from scipy.sparse.linalg import spsolve

from .errors import ConfigError

#: rate fits need this many partial sums above the error floor
MIN_RATE_POINTS = 8


@dataclass(frozen=True)
class ProductGrid:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigError(f"grid needs at least 2 interior nodes per direction, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ConfigError("domain lengths must be positive")

    @property
    def hx(self):
        return self.lx / (self.nx + 1)

    @property
    def hy(self):
        return self.ly / (self.ny + 1)

    @property
    def x(self):
        return self.hx * np.arange(1, self.nx + 1)

    @property
    def y(self):
        return self.hy * np.arange(1, self.ny + 1)

    def sample(self, fn):
        """Evaluate ``fn(x, y)`` on the interior nodes."""
        xx, yy = np.meshgrid(self.x, self.y, indexing="ij")
        return np.asarray(fn(xx, yy), dtype=float) * np.ones((self.nx, self.ny))

    def inner(self, a, b):
        return self.hx * self.hy * float(np.sum(a * b))

    def l2(self, a):
        return np.sqrt(self.inner(a, a))


def _second_difference(v, h):
    """``T v`` with ``T = tridiag(-1, 2, -1)/h^2`` along axis 0."""
    out = 2.0 * v
    out[1:] -= v[:-1]
    out[:-1] -= v[1:]
    return out / (h * h)


def neg_laplacian(g, grid):
    """``-Lap_h g`` for a grid function."""
    return _second_difference(g, grid.hx) + _second_difference(g.T, grid.hy).T


def _solve_shifted(h, n, a, c, rhs):
    """Solve ``(a T + c I) v = rhs`` for the 1D second-difference matrix ``T``."""
    ab = np.empty((2, n))
    ab[0] = -a / (h * h)
    ab[1] = 2.0 * a / (h * h) + c
    return solveh_banded(ab, rhs)


def _eigenvalues(n, h):
    k = np.arange(1, n + 1)
    return (2.0 - 2.0 * np.cos(np.pi * k / (n + 1))) / (h * h)


def poisson_fast(f, grid):
    """Solve ``-Lap_h w = f`` by diagonalizing with the type-I sine transform."""
    lam = _eigenvalues(grid.nx, grid.hx)[:, None] + _eigenvalues(grid.ny, grid.hy)[None, :]
    return dstn(dstn(f, type=1, norm="ortho") / lam, type=1, norm="ortho")


def poisson_full_grid(f, grid):
    """Reference solve of ``-Lap_h w = f`` with a sparse direct factorization."""
    def t(n, h):
        return sparse.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / (h * h)

    op = sparse.kron(t(grid.nx, grid.hx), sparse.identity(grid.ny)) + sparse.kron(
        sparse.identity(grid.nx), t(grid.ny, grid.hy)
    )
    return spsolve(op.tocsc(), np.asarray(f, float).ravel()).reshape(grid.nx, grid.ny)


def h_minus1_norm(f, grid):
    """Discrete dual norm ``sqrt(<f, (-Lap_h)^{-1} f>)``."""
    f = np.asarray(f, dtype=float)
    w = poisson_fast(f, grid)
    return float(np.sqrt(max(grid.inner(f, w), 0.0)))


def energy(g, f, grid):
    """Dirichlet energy ``1/2 <g, -Lap g> - <f, g>``."""
    return 0.5 * grid.inner(g, neg_laplacian(g, grid)) - grid.inner(f, g)


def energy_norm(g, grid):
    return float(np.sqrt(max(grid.inner(g, neg_laplacian(g, grid)), 0.0)))


@dataclass
class RankOneResult:
    r: np.ndarray
    s: np.ndarray
    sweeps: int
    converged: bool
    euler_residual: float
    zero: bool = False


def rank_one_energy(r, s, f, grid):
    """Energy of the correction ``r s^T`` against residual ``f``."""
    tr = _second_difference(r, grid.hx)
    ts = _second_difference(s, grid.hy)
    quad = (r @ tr) * (s @ s) + (r @ r) * (s @ ts)
    return grid.hx * grid.hy * (0.5 * quad - float(r @ f @ s))


def _euler_residual(r, s, f, grid):
    """Relative residual of both rank-one optimality equations."""
    tr = _second_difference(r, grid.hx)
    ts = _second_difference(s, grid.hy)
    res_r = (s @ s) * tr + (s @ ts) * r - f @ s
    res_s = (r @ r) * ts + (r @ tr) * s - f.T @ r
    scale_r = max(np.linalg.norm(f @ s), np.finfo(float).tiny)
    scale_s = max(np.linalg.norm(f.T @ r), np.finfo(float).tiny)
    return max(np.linalg.norm(res_r) / scale_r, np.linalg.norm(res_s) / scale_s)


def pgd_iteration(f_residual, grid, als_tol=1e-10, als_max=500):
    """Best rank-one correction ``r s^T`` for the residual by alternating solves.

    With ``s`` fixed, ``r`` solves ``((s.s) T_x + (s.T_y s) I) r = F s``, and
    symmetrically for ``s``.  ``s`` starts from the residual's largest-norm
    row improved by one power-iteration step.  Stops when the relative
    Euler-equation residual drops below ``als_tol``.  ``r`` is returned with
    unit discrete L2 norm.
    """
    f = np.asarray(f_residual, dtype=float)
    if f.shape != (grid.nx, grid.ny):
        raise ConfigError(f"grid function has shape {f.shape}, expected {(grid.nx, grid.ny)}")
    if not np.all(np.isfinite(f)):
        raise ConfigError("right-hand side must be finite")
    if not np.any(f):
        return RankOneResult(np.zeros(grid.nx), np.zeros(grid.ny), 0, True, 0.0, zero=True)
    row = f[int(np.argmax(np.sum(f * f, axis=1)))]
    s = f.T @ (f @ row)
    if not np.any(s):
        s = row
    s = s / np.linalg.norm(s)
    r = np.zeros(grid.nx)
    residual = np.inf
    sweeps = 0
    for sweeps in range(1, als_max + 1):
        r = _solve_shifted(grid.hx, grid.nx, s @ s, s @ _second_difference(s, grid.hy), f @ s)
        s = _solve_shifted(grid.hy, grid.ny, r @ r, r @ _second_difference(r, grid.hx), f.T @ r)
        residual = _euler_residual(r, s, f, grid)
        if residual < als_tol:
            break
    converged = residual < als_tol
    if not converged:
        warnings.warn(f"alternating solve stopped after {als_max} sweeps (residual {residual:.3g})", RuntimeWarning)
    norm = np.sqrt(grid.hx * float(r @ r))
    if norm == 0.0:
        return RankOneResult(np.zeros(grid.nx), np.zeros(grid.ny), sweeps, converged, residual, zero=True)
    return RankOneResult(r / norm, s * norm, sweeps, converged, float(residual))


@dataclass
class PgdSolution:
    grid: ProductGrid
    terms: list = field(default_factory=list)  # (r_k, s_k) pairs
    residual_history: list = field(default_factory=list)  # H^-1 norm before term 1, after each term
    converged: bool = False
    flags: list = field(default_factory=list)

    def reconstruct(self, n=None):
        """Partial sum of the first ``n`` terms (all by default)."""
        g = np.zeros((self.grid.nx, self.grid.ny))
        for r, s in self.terms[:n]:
            g += np.outer(r, s)
        return g

    def partial_sums(self):
        g = np.zeros((self.grid.nx, self.grid.ny))
        for r, s in self.terms:
            g = g + np.outer(r, s)
            yield g


def pgd_solve(f, grid, eps_tol=1e-8, n_max=100, als_tol=1e-10, als_max=500):
    """Greedy sum of rank-one terms until the residual's H^-1 norm is below
    ``eps_tol`` or ``n_max`` terms are used (flag ``"n_max"``)."""
    if not eps_tol > 0:
        raise ConfigError("eps_tol must be positive")
    f = np.asarray(f, dtype=float)
    residual = f.copy()
    sol = PgdSolution(grid)
    norm = h_minus1_norm(residual, grid)
    sol.residual_history.append(norm)
    while norm >= eps_tol:
        if len(sol.terms) >= n_max:
            sol.flags.append("n_max")
            break
        step = pgd_iteration(residual, grid, als_tol, als_max)
        if step.zero:
            sol.flags.append("zero_term")
            break
        if not step.converged:
            sol.flags.append(f"als_unconverged@{len(sol.terms) + 1}")
        r, s = step.r, step.s
        residual -= np.outer(_second_difference(r, grid.hx), s) + np.outer(r, _second_difference(s, grid.hy))
        sol.terms.append((r, s))
        norm = h_minus1_norm(residual, grid)
        sol.residual_history.append(norm)
    sol.converged = norm < eps_tol
    return sol


@dataclass
class RateReport:
    slope: float
    errors: np.ndarray  # energy-norm error after n = 1, 2, ... terms
    n_used: int
    skipped: bool


def convergence_rate_report(solution, reference, floor=None):
    """Log-log slope of the energy-norm error against the number of terms.

    Points at or below ``floor`` (default ``1e-10`` times the initial error)
    are excluded; the fit is skipped when fewer than 8 remain.
    """
    grid = solution.grid
    e0 = energy_norm(reference, grid)
    errors = np.array([energy_norm(reference - g, grid) for g in solution.partial_sums()])
    floor = 1e-10 * e0 if floor is None else floor
    n = np.arange(1, len(errors) + 1)
    keep = errors > floor
    if keep.sum() < MIN_RATE_POINTS:
        return RateReport(float("nan"), errors, int(keep.sum()), True)
    slope = float(np.polyfit(np.log(n[keep]), np.log(errors[keep]), 1)[0])
    return RateReport(slope, errors, int(keep.sum()), False)


def separable_rhs(grid):
    """Right-hand side whose continuous solution is ``sin(pi x/lx) sin(pi y/ly)``."""
    lam = np.pi**2 * (1.0 / grid.lx**2 + 1.0 / grid.ly**2)
    return grid.sample(lambda x, y: lam * np.sin(np.pi * x / grid.lx) * np.sin(np.pi * y / grid.ly))


__all__ = [
    "ProductGrid",
    "PgdSolution",
    "RankOneResult",
    "RateReport",
    "neg_laplacian",
    "poisson_fast",
    "poisson_full_grid",
    "h_minus1_norm",
    "energy",
    "energy_norm",
    "rank_one_energy",
    "pgd_iteration",
    "pgd_solve",
    "convergence_rate_report",
    "separable_rhs",
]
