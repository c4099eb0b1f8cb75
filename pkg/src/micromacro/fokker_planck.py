"""Finite-volume Fokker-Planck solver in a 2D configuration space.

Solves ``dpsi/dt = div((-kappa X + grad Pi / 2We) psi) + lap(psi) / 2We`` with
zero-flux boundaries.  Drift fluxes are exponentially fitted
(Scharfetter-Gummel): the symmetric part of ``kappa`` enters through the
potential ``Pi - We X^T kappa_s X`` so that ``exp(-potential)`` sampled at
cell centres is an exact discrete equilibrium; the skew part enters as a face
velocity.  Time stepping is explicit and positivity preserving under the
bound returned by :attr:`FokkerPlanckOperator.max_dt`.
"""

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import exprel

from .errors import ConfigError, NoStationaryState, OutOfRegimeError, SupportViolation
from .macro import commutator, skew_part, sym_part

FENE_MASK_MARGIN = 1e-6
HOOKEAN_WIDTH_SIGMAS = 6.0
STEADY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ConfigGrid:
    """Uniform ``n x n`` cells on ``[-L, L]^2``; ``mask`` marks active cells."""

    n: int
    half_width: float
    mask: np.ndarray

    @property
    def h(self):
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self):
        return self.h * self.h

    @cached_property
    def centers(self):
        return -self.half_width + self.h * (np.arange(self.n) + 0.5)

    @cached_property
    def points(self):
        """Cell centres, shape ``(n, n, 2)`` (``indexing='ij'``)."""
        x, y = np.meshgrid(self.centers, self.centers, indexing="ij")
        return np.stack([x, y], axis=-1)


def hookean_covariance(kappa, we):
    """Stationary covariance of the Hookean dumbbell (Lyapunov equation)."""
    kappa = np.asarray(kappa, dtype=float)
    m = kappa - np.eye(2) / (2.0 * we)
    if np.max(np.linalg.eigvals(m).real) >= 0.0:
        raise NoStationaryState("Hookean dynamics are not mean-reverting for this velocity gradient")
    return scipy.linalg.solve_continuous_lyapunov(m, -np.eye(2) / we)


def make_grid(model, n=200, kappa=None, we=1.0, half_width=None):
    """Grid suited to ``model``: a box of 6 stationary standard deviations
    (Hookean) or the disk of radius ``sqrt(b)`` on a staircase mask (FENE)."""
    if n < 4:
        raise ConfigError("grid needs at least 4 cells per axis")
    if model.is_fene:
        L = np.sqrt(model.b) if half_width is None else half_width
        grid = ConfigGrid(n, L, np.ones((n, n), dtype=bool))
        r2 = np.sum(grid.points**2, axis=-1)
        mask = r2 < model.b * (1.0 - FENE_MASK_MARGIN) ** 2
        return ConfigGrid(n, L, mask)
    if half_width is None:
        k = np.zeros((2, 2)) if kappa is None else np.asarray(kappa, float)
        try:
            sigma = np.sqrt(np.max(np.linalg.eigvalsh(hookean_covariance(k, we))))
        except NoStationaryState:
            sigma = 1.0
        half_width = HOOKEAN_WIDTH_SIGMAS * sigma
    return ConfigGrid(n, half_width, np.ones((n, n), dtype=bool))


@dataclass
class DensityGrid:
    grid: ConfigGrid
    values: np.ndarray

    @property
    def mass(self):
        return float(np.sum(self.values) * self.grid.cell_area)

    def normalized(self):
        return replace(self, values=self.values / self.mass)

    def moment(self, fn):
        """Quadrature of ``fn(points)`` against the density."""
        vals = fn(self.grid.points)
        w = self.values * self.grid.cell_area
        return np.tensordot(w, vals, axes=([0, 1], [0, 1]))


def density_from_function(grid, fn):
    vals = np.where(grid.mask, fn(grid.points), 0.0)
    vals = np.maximum(vals, 0.0)
    return DensityGrid(grid, vals).normalized()


def gaussian_density(grid, mean=(0.0, 0.0), cov=np.eye(2)):
    cov = np.asarray(cov, float)
    prec = np.linalg.inv(cov)
    mean = np.asarray(mean, float)

    def fn(p):
        z = p - mean
        return np.exp(-0.5 * np.einsum("...i,ij,...j->...", z, prec, z))

    return density_from_function(grid, fn)


def uniform_disk_density(grid, radius):
    return density_from_function(grid, lambda p: (np.sum(p * p, axis=-1) < radius * radius).astype(float))


def _bernoulli(z):
    return 1.0 / exprel(z)


def _potential(model, kappa_s, we, points):
    # exp(-potential) is the stationary density for symmetric kappa
    r2 = np.sum(points * points, axis=-1)
    if model.is_fene:
        base = -0.5 * model.b * np.log1p(-np.minimum(r2 / model.b, 1.0 - 1e-15))
    else:
        base = 0.5 * r2
    return base - we * np.einsum("...i,ij,...j->...", points, kappa_s, points)


class FokkerPlanckOperator:
    """Sparse generator ``L`` of the semi-discrete equation ``dpsi/dt = L psi``."""

    def __init__(self, grid, model, kappa, we):
        self.grid = grid
        self.model = model
        self.kappa = np.zeros((2, 2)) if kappa is None else np.asarray(kappa, dtype=float)
        self.we = float(we)
        self.matrix = self._assemble()
        self.outflow = -self.matrix.diagonal()

    @property
    def max_dt(self):
        """Largest step keeping the explicit update positivity preserving."""
        top = np.max(self.outflow)
        return np.inf if top <= 0 else 1.0 / top

    def _assemble(self):
        g, n, h = self.grid, self.grid.n, self.grid.h
        diff = 1.0 / (2.0 * self.we)
        ks, ka = sym_part(self.kappa), skew_part(self.kappa)
        phi = _potential(self.model, ks, self.we, g.points)
        idx = np.arange(n * n).reshape(n, n)
        rows, cols, vals = [], [], []
        for axis in (0, 1):
            sl_l = [slice(None), slice(None)]
            sl_r = [slice(None), slice(None)]
            sl_l[axis] = slice(0, n - 1)
            sl_r[axis] = slice(1, n)
            sl_l, sl_r = tuple(sl_l), tuple(sl_r)
            active = g.mask[sl_l] & g.mask[sl_r]
            face = 0.5 * (g.points[sl_l] + g.points[sl_r])
            vel = np.einsum("ij,...j->...i", ka, face)[..., axis]
            pe = -(phi[sl_r] - phi[sl_l]) + vel * h / diff
            pe = np.where(active, pe, 0.0)
            a = diff / h**2 * _bernoulli(-pe)  # left -> right
            c = diff / h**2 * _bernoulli(pe)  # right -> left
            il, ir = idx[sl_l][active], idx[sl_r][active]
            a, c = a[active], c[active]
            rows += [il, ir, ir, il]
            cols += [il, il, ir, ir]
            vals += [-a, a, -c, c]
        rows, cols, vals = (np.concatenate(v) for v in (rows, cols, vals))
        return sp.csr_matrix((vals, (rows, cols)), shape=(n * n, n * n))

    def apply(self, values):
        return (self.matrix @ values.ravel()).reshape(values.shape)

    def step(self, psi, dt):
        if dt > self.max_dt * (1.0 + 1e-12):
            raise ConfigError(f"dt={dt:.3g} exceeds the positivity bound {self.max_dt:.3g}")
        vals = psi.values + dt * self.apply(psi.values)
        return DensityGrid(psi.grid, vals)

    def stationary(self, method="direct", dt=None, max_time=1e4):
        """Discrete steady state of this operator (normalized)."""
        g = self.grid
        act = np.flatnonzero(g.mask.ravel())
        if method == "direct":
            m = self.matrix[act][:, act].tolil()
            centre = int(np.argmin(np.sum(g.points.reshape(-1, 2)[act] ** 2, axis=1)))
            m[centre, :] = np.full(len(act), g.cell_area)
            rhs = np.zeros(len(act))
            rhs[centre] = 1.0
            sol = spla.spsolve(m.tocsc(), rhs)
            vals = np.zeros(g.n * g.n)
            vals[act] = np.maximum(sol, 0.0)
            psi = DensityGrid(g, vals.reshape(g.n, g.n)).normalized()
        elif method == "march":
            dt = 0.9 * self.max_dt if dt is None else dt
            psi = density_from_function(g, lambda p: np.exp(-_potential(self.model, np.zeros((2, 2)), 1.0, p)))
            t = 0.0
            while True:
                new = self.step(psi, dt)
                change = np.max(np.abs(new.values - psi.values)) / (dt * np.max(new.values))
                psi, t = new, t + dt
                if change < STEADY_TOL:
                    break
                if t > max_time:
                    raise NoStationaryState("time marching did not reach a steady state")
        else:
            raise ConfigError(f"unknown stationary method {method!r}")
        if self.steady_residual(psi) >= STEADY_TOL:
            raise NoStationaryState(f"steady-state residual {self.steady_residual(psi):.2e} too large")
        return psi

    def steady_residual(self, psi):
        """Relative change of ``psi`` per unit time under the discrete flow."""
        return float(np.max(np.abs(self.apply(psi.values))) / np.max(psi.values))


def fp_step(psi, model, kappa, we, dt, operator=None):
    """One explicit step; pass a prebuilt ``operator`` to avoid reassembly."""
    op = operator or FokkerPlanckOperator(psi.grid, model, kappa, we)
    return op.step(psi, dt)


def stationary_density(model, kappa=None, we=1.0, grid=None, n=200, method="auto"):
    """Stationary density on a grid.

    Zero or symmetric ``kappa``: ``Z^-1 exp(-Pi + We X^T kappa X)`` sampled at
    cell centres.  Otherwise the discrete steady state of the finite-volume
    operator.
    """
    kappa = np.zeros((2, 2)) if kappa is None else np.asarray(kappa, dtype=float)
    symmetric = np.allclose(kappa, kappa.T, rtol=0, atol=1e-14)
    if not model.is_fene:
        if symmetric and np.max(np.linalg.eigvalsh(kappa)) >= 1.0 / (2.0 * we):
            raise NoStationaryState("Hookean stationary state needs eigenvalues of kappa below 1/(2 We)")
        hookean_covariance(kappa, we)
    grid = grid or make_grid(model, n, kappa, we)
    if method == "auto":
        method = "analytic" if symmetric else "direct"
    if method == "analytic":
        if not symmetric:
            raise ConfigError("analytic stationary density needs a symmetric kappa")
        phi = _potential(model, kappa, we, grid.points)
        return density_from_function(grid, lambda p: np.exp(-(phi - np.min(phi[grid.mask]))))
    return FokkerPlanckOperator(grid, model, kappa, we).stationary(method)


def _check_support(psi, psi_inf):
    if np.any((psi.values > 0) & (psi_inf.values <= 0)):
        raise SupportViolation("density has mass where the stationary density vanishes")


def relative_entropy(psi, psi_inf):
    """``sum psi ln(psi/psi_inf) * area`` with ``0 ln 0 = 0``."""
    _check_support(psi, psi_inf)
    p, q = psi.values, psi_inf.values
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])) * psi.grid.cell_area)


def _masked_gradient(field, valid, h):
    """Centred differences where both neighbours are valid, one-sided otherwise."""
    grads = []
    for axis in (0, 1):
        fwd = np.zeros_like(field)
        bwd = np.zeros_like(field)
        has_f = np.zeros_like(valid)
        has_b = np.zeros_like(valid)
        sl_a = [slice(None)] * 2
        sl_b = [slice(None)] * 2
        sl_a[axis], sl_b[axis] = slice(0, -1), slice(1, None)
        sl_a, sl_b = tuple(sl_a), tuple(sl_b)
        both = valid[sl_a] & valid[sl_b]
        diff = np.where(both, field[sl_b] - field[sl_a], 0.0) / h
        fwd[sl_a], has_f[sl_a] = diff, both
        bwd[sl_b], has_b[sl_b] = diff, both
        g = np.where(has_f & has_b, 0.5 * (fwd + bwd), np.where(has_f, fwd, np.where(has_b, bwd, 0.0)))
        grads.append(np.where(valid, g, 0.0))
    return np.stack(grads, axis=-1)


def fisher_information(psi, psi_inf):
    """``sum |grad ln(psi/psi_inf)|^2 psi * area`` by finite differences."""
    _check_support(psi, psi_inf)
    p, q = psi.values, psi_inf.values
    valid = psi.grid.mask & (p > 0) & (q > 0)
    lr = np.zeros_like(p)
    lr[valid] = np.log(p[valid] / q[valid])
    grad = _masked_gradient(lr, valid, psi.grid.h)
    return float(np.sum(np.sum(grad * grad, axis=-1) * p) * psi.grid.cell_area)


def l1_distance(psi, psi_inf):
    return float(np.sum(np.abs(psi.values - psi_inf.values)) * psi.grid.cell_area)


@dataclass(frozen=True)
class EntropyReport:
    relative_entropy: float
    fisher_information: float
    l1_distance: float

    @property
    def csiszar_kullback_holds(self):
        return self.l1_distance <= np.sqrt(2.0 * max(self.relative_entropy, 0.0)) + 1e-12


def entropy_report(psi, psi_inf):
    return EntropyReport(relative_entropy(psi, psi_inf), fisher_information(psi, psi_inf), l1_distance(psi, psi_inf))


def relax(psi0, operator, dt, t_end, psi_inf, every=1):
    """March ``psi0`` to ``t_end``; returns the final density and rows
    ``(t, H, Fisher, L1)`` every ``every`` steps."""
    psi = psi0
    n_steps = int(round(t_end / dt))
    rep = entropy_report(psi, psi_inf)
    rows = [(0.0, rep.relative_entropy, rep.fisher_information, rep.l1_distance)]
    for k in range(1, n_steps + 1):
        psi = operator.step(psi, dt)
        if k % every == 0 or k == n_steps:
            rep = entropy_report(psi, psi_inf)
            rows.append((k * dt, rep.relative_entropy, rep.fisher_information, rep.l1_distance))
    return psi, rows


def lsi_constant_bakry_emery(model, n=101, fd_step=1e-4):
    """Convexity constant of ``Pi``: smallest Hessian eigenvalue over a scan.

    Hookean gives exactly 1.  For FENE the Hessian is obtained by central
    differences of the force on an ``n x n`` scan of the ball of radius
    ``0.99 sqrt(b)``.
    """
    if not model.is_fene:
        return 1.0
    r = 0.99 * np.sqrt(model.b)
    axis = np.linspace(-r, r, n)
    pts = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    pts = pts[np.sum(pts * pts, axis=1) < r * r]
    hess = np.empty((len(pts), 2, 2))
    for j in range(2):
        e = np.zeros(2)
        e[j] = fd_step
        hess[:, :, j] = (model.force(pts + e) - model.force(pts - e)) / (2.0 * fd_step)
    hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
    return float(np.min(np.linalg.eigvalsh(hess)))


def holley_stroock_bound(rho, perturbation_osc):
    """Log-Sobolev constant lower bound ``rho exp(-osc)`` after a bounded perturbation."""
    if not rho > 0:
        raise ConfigError("rho must be positive")
    if not perturbation_osc >= 0:
        raise ConfigError("oscillation must be non-negative")
    return float(rho * np.exp(-perturbation_osc))


def stress_from_density(psi, model, eps, we):
    """``(eps/We)(-I + int X (x) F(X) psi)`` over active cells, symmetrized."""
    g = psi.grid
    pts = g.points[g.mask]
    f = model.force(pts)
    w = psi.values[g.mask] * g.cell_area
    m = np.einsum("k,ki,kj->ij", w, pts, f)
    m = 0.5 * (m + m.T)
    return eps / we * (m - np.eye(2))


@dataclass(frozen=True)
class GradientBoundReport:
    lhs: float
    bound: float
    passed: bool


def stationary_gradient_bound_check(psi_inf, model, kappa, we=1.0, tol=5e-2):
    """Compare ``max |grad ln(psi_inf e^Pi) - 2 We kappa_s X|`` with
    ``2 sqrt(b) |[k, k^T]| / (1 - 2 |k_s|)``, ``k = We kappa``.

    Norms are Frobenius.  The estimate is stated for ``We = 1``; other values
    are handled by the rescaling ``kappa -> We kappa`` of the equation.
    """
    if not model.is_fene:
        raise ConfigError("the stationary gradient bound is stated for FENE dumbbells")
    k = we * np.asarray(kappa, dtype=float)
    ks_norm = np.linalg.norm(sym_part(k))
    if ks_norm >= 0.5:
        raise OutOfRegimeError(f"|kappa_s| = {ks_norm:.3g} must be below 1/2")
    g = psi_inf.grid
    valid = g.mask & (psi_inf.values > 0)
    field = np.zeros_like(psi_inf.values)
    field[valid] = np.log(psi_inf.values[valid]) + model.potential(g.points[valid])
    interior = valid.copy()
    for axis in (0, 1):
        shifted_p = np.zeros_like(valid)
        shifted_m = np.zeros_like(valid)
        sl = [slice(None)] * 2
        sl[axis] = slice(1, None)
        sr = [slice(None)] * 2
        sr[axis] = slice(0, -1)
        shifted_p[tuple(sr)] = valid[tuple(sl)]
        shifted_m[tuple(sl)] = valid[tuple(sr)]
        interior &= shifted_p & shifted_m
    grad = _masked_gradient(field, valid, g.h)
    resid = grad - 2.0 * np.einsum("ij,...j->...i", sym_part(k), g.points)
    lhs = float(np.max(np.linalg.norm(resid[interior], axis=-1))) if interior.any() else 0.0
    bound = 2.0 * np.sqrt(model.b) * np.linalg.norm(commutator(k)) / (1.0 - 2.0 * ks_norm)
    return GradientBoundReport(lhs, float(bound), lhs <= bound + tol)
