"""One-dimensional Couette flow between plates at ``y = 0`` and ``y = 1``.

The velocity ``u(t, y)`` is continuous piecewise affine on a uniform mesh of
``N`` intervals; the shear stress and the polymer state (a dumbbell ensemble
or a conformation tensor) are constant on each interval.  Two couplings are
provided:

* ``connffessit_step``: per-cell Monte Carlo ensembles of dumbbells
  ``X = (P, Q)`` driven by the local shear rate;
* ``macro_shear_step``: the same velocity update closed by the Oldroyd-B or
  FENE-P conformation equation.

Each step first solves for ``u^{n+1}`` with the stress ``tau^n`` of the
current polymer state, then advances the polymer state with the new shear
rate ``d_y u^{n+1}``.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.linalg import LinAlgError, cholesky_banded, cho_solve_banded, solveh_banded

from .dumbbell import (
    DumbbellEnsemble,
    FlowParams,
    ForceModel,
    check_fene_dt,
    em_finish,
    sample_equilibrium,
)
from .errors import ConfigError, NumericalError
from .macro import (
    FreeEnergyRecord,
    fene_p_equilibrium,
    fene_p_stress,
    free_energy,
    shear_gradient,
    step_conformation,
)
from .rng import BrownianStrategy, brownian_normals

MICRO_MODELS = ("hookean", "fene")
MACRO_MODELS = ("oldroyd-b", "fene-p")
MACRO_SCHEMES = ("semi-implicit", "em-moment", "implicit")
#: the Q noise (and, for Hookean springs, the initial Q) is constant in space;
#: Brownian strategies act on the P component only
SHARED_COMPONENTS = (1,)
#: free-energy increases below this are round-off
MONOTONE_TOL = 1e-12


@dataclass(frozen=True)
class SchemeConfig:
    """Discretization and model choices for a shear run.

    ``model`` selects the coupling: ``"hookean"``/``"fene"`` run dumbbell
    ensembles, ``"oldroyd-b"``/``"fene-p"`` run conformation tensors.
    ``dy`` must divide the unit interval exactly.  ``q_cap`` optionally clips
    ``|Q|`` (in units of its equilibrium standard deviation 1).
    """

    params: FlowParams = field(default_factory=FlowParams)
    dy: float = 1.0 / 32
    replicas: int = 1000
    model: str = "hookean"
    b: float | None = None
    brownian: BrownianStrategy = BrownianStrategy.IID
    seed: int = 0
    boundary: tuple = (0.0, 1.0)
    macro_scheme: str = "semi-implicit"
    q_cap: float | None = None

    def __post_init__(self):
        model = str(self.model).lower()
        if model not in MICRO_MODELS + MACRO_MODELS:
            raise ConfigError(f"unknown shear model {self.model!r}; expected one of {MICRO_MODELS + MACRO_MODELS}")
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "brownian", BrownianStrategy.parse(self.brownian))
        if not (np.isfinite(self.dy) and 0 < self.dy <= 1):
            raise ConfigError(f"dy must lie in (0, 1], got {self.dy}")
        n = round(1.0 / self.dy)
        if abs(n * self.dy - 1.0) > 1e-9:
            raise ConfigError(f"dy = {self.dy} does not divide [0, 1] into whole cells")
        if int(self.replicas) < 1:
            raise ConfigError(f"replica count K must be positive, got {self.replicas}")
        if model in ("fene", "fene-p") and (self.b is None or not self.b > 0):
            raise ConfigError(f"model {model} requires b > 0")
        if model in ("hookean", "oldroyd-b") and self.b is not None:
            raise ConfigError(f"model {model} takes no extensibility b")
        if self.macro_scheme not in MACRO_SCHEMES:
            raise ConfigError(f"unknown macro scheme {self.macro_scheme!r}")
        if self.macro_scheme != "semi-implicit" and model == "fene-p":
            raise ConfigError(f"scheme {self.macro_scheme} is available for Oldroyd-B only")
        if self.q_cap is not None and not self.q_cap > 0:
            raise ConfigError("q_cap must be positive")
        if len(self.boundary) != 2 or not np.all(np.isfinite(self.boundary)):
            raise ConfigError("boundary must hold two finite velocities")
        if int(self.seed) < 0:
            raise ConfigError("seed must be non-negative")
        if self.is_micro:
            check_fene_dt(self.force_model, self.params)

    @property
    def n_cells(self):
        return round(1.0 / self.dy)

    @property
    def dt(self):
        return self.params.dt

    @property
    def K(self):
        return int(self.replicas)

    @property
    def is_micro(self):
        return self.model in MICRO_MODELS

    @property
    def force_model(self):
        return ForceModel.fene(self.b) if self.model == "fene" else ForceModel.hookean()

    @property
    def zero_forcing(self):
        return self.boundary[0] == 0.0 and self.boundary[1] == 0.0

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass
class ShearState:
    t: float
    step: int
    y: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    ensemble: DumbbellEnsemble | None = None
    conformation: np.ndarray | None = None
    tau_stderr: np.ndarray | None = None  # Monte Carlo standard error, when computed

    @property
    def boundary(self):
        return float(self.u[0]), float(self.u[-1])

    @property
    def shear_rate(self):
        return np.diff(self.u) / np.diff(self.y)


# -- velocity system ---------------------------------------------------------


def _banded(n, h, re_dt, weights):
    """Upper banded form of ``(Re/dt) M + S_w`` on interior nodes, plus the
    two couplings to the boundary nodes."""
    off = re_dt * h / 6.0 - weights
    ab = np.zeros((2, n - 1))
    ab[1] = re_dt * 4.0 * h / 6.0 + weights[:-1] + weights[1:]
    ab[0, 1:] = off[1:-1]
    return ab, off[0], off[-1]


def _velocity_rhs(u, tau, h, re_dt):
    mu = h / 6.0 * (u[:-2] + 4.0 * u[1:-1] + u[2:])
    return re_dt * mu + tau[1:] - tau[:-1]


@lru_cache(maxsize=64)
def _factor(n, reynolds, dt, epsilon):
    h = 1.0 / n
    weights = np.full(n, (1.0 - epsilon) / h)
    ab, left, right = _banded(n, h, reynolds / dt, weights)
    try:
        return cholesky_banded(ab), left, right
    except LinAlgError as exc:  # cannot happen for 1 - eps > 0
        raise NumericalError("velocity system is not positive definite") from exc


def solve_velocity(u, tau, params, boundary):
    """Implicit velocity update ``u^{n+1}`` from ``u^n`` and the cell stresses."""
    n = len(tau)
    new = np.empty(n + 1)
    new[0], new[-1] = boundary
    if n == 1:
        return new
    chol, left, right = _factor(n, params.reynolds, params.dt, params.epsilon)
    rhs = _velocity_rhs(u, tau, 1.0 / n, params.reynolds / params.dt)
    rhs[0] -= left * new[0]
    rhs[-1] -= right * new[-1]
    new[1:-1] = cho_solve_banded((chol, False), rhs)
    return new


# -- polymer stress ----------------------------------------------------------


def micro_shear_stress(configs, model, params, with_error=True):
    """Per-cell ``(eps/We) mean_k P F_Q`` and its Monte Carlo standard error
    (``None`` unless ``with_error``)."""
    p_comp = configs[..., 0]
    f_q = model.force(configs)[..., 1] if model.is_fene else configs[..., 1]
    k = configs.shape[1]
    scale = params.epsilon / params.weissenberg
    tau = scale / k * np.einsum("ck,ck->c", p_comp, f_q)
    if not with_error:
        return tau, None
    if k == 1:
        return tau, np.zeros(len(tau))
    return tau, scale * np.std(p_comp * f_q, axis=1, ddof=1) / np.sqrt(k)


def macro_shear_stress(conformation, cfg):
    p = cfg.params
    if cfg.model == "fene-p":
        return fene_p_stress(conformation, p.epsilon, p.weissenberg, cfg.b)[:, 0, 1]
    return p.epsilon / p.weissenberg * conformation[:, 0, 1]


# -- states and steps --------------------------------------------------------


def initial_state(cfg, ensemble=None, conformation=None):
    """Fluid at rest with the plates set in motion at ``t = 0``.

    The polymer state defaults to equilibrium: an exact equilibrium draw for
    ensembles (following the Brownian strategy), ``I`` or ``b/(b+2) I`` for
    conformations.
    """
    n = cfg.n_cells
    y = np.linspace(0.0, 1.0, n + 1)
    u = np.zeros(n + 1)
    u[0], u[-1] = cfg.boundary
    if cfg.is_micro:
        if ensemble is None:
            ensemble = sample_equilibrium(cfg.force_model, n, cfg.K, 2, cfg.seed, cfg.brownian, SHARED_COMPONENTS)
        if ensemble.configs.shape[:2] != (n, cfg.K) or ensemble.dim != 2:
            raise ConfigError("ensemble shape does not match (cells, K, 2)")
        ensemble = replace(ensemble, seed=cfg.seed, strategy=cfg.brownian)
        tau, err = micro_shear_stress(ensemble.configs, cfg.force_model, cfg.params)
        return ShearState(0.0, 0, y, u, tau, ensemble=ensemble, tau_stderr=err)
    if conformation is None:
        a0 = fene_p_equilibrium(cfg.b) if cfg.model == "fene-p" else np.eye(2)
        conformation = np.broadcast_to(a0, (n, 2, 2)).copy()
    conformation = np.array(conformation, dtype=float)
    if conformation.shape != (n, 2, 2):
        raise ConfigError("conformation field must have shape (cells, 2, 2)")
    return ShearState(0.0, 0, y, u, macro_shear_stress(conformation, cfg), conformation=conformation)


def connffessit_step(state, cfg):
    """Advance the coupled velocity / dumbbell-ensemble system by ``dt``."""
    if state.ensemble is None:
        raise ConfigError("connffessit_step needs a state carrying dumbbell ensembles")
    p, model = cfg.params, cfg.force_model
    u = solve_velocity(state.u, state.tau, p, cfg.boundary)
    rate = np.diff(u) / np.diff(state.y)
    ens = state.ensemble
    x = ens.configs
    n, k, _ = x.shape

    def normals(retry=0):
        return brownian_normals(cfg.brownian, cfg.seed, ens.step, n, k, 2, retry=retry,
                                shared_components=SHARED_COMPONENTS)

    # drift for kappa = [[0, rate], [0, 0]] without a batched matmul
    scale = np.sqrt(p.dt / p.weissenberg)
    relax = p.dt / (2.0 * p.weissenberg)
    base = x - relax * model.force(x) if model.is_fene else (1.0 - relax) * x
    base[..., 0] += (p.dt * rate)[:, None] * x[..., 1]
    if model.is_fene:
        new, _ = em_finish(base, model, scale, normals(), normals)
    else:
        new = normals()
        new *= scale
        new += base
    if cfg.q_cap is not None:
        np.clip(new[..., 1], -cfg.q_cap, cfg.q_cap, out=new[..., 1])
    tau, _ = micro_shear_stress(new, model, p, with_error=False)
    ens = replace(ens, configs=new, step=ens.step + 1)
    return ShearState(state.t + p.dt, state.step + 1, state.y, u, tau, ensemble=ens)


def _implicit_oldroyd_b(state, cfg):
    # A_yy and A_xy are affine in the new shear rate, so the fully coupled
    # step is still one SPD tridiagonal solve.
    p = cfg.params
    a = state.conformation
    n = len(a)
    h = 1.0 / n
    c = p.dt / p.weissenberg
    a_yy = (a[:, 1, 1] + c) / (1.0 + c)
    alpha = a[:, 0, 1] / (1.0 + c)
    beta = p.dt * a_yy / (1.0 + c)
    coupling = p.epsilon / p.weissenberg
    u = np.empty(n + 1)
    u[0], u[-1] = cfg.boundary
    if n > 1:
        weights = ((1.0 - p.epsilon) + coupling * beta) / h
        ab, left, right = _banded(n, h, p.reynolds / p.dt, weights)
        rhs = _velocity_rhs(state.u, coupling * alpha, h, p.reynolds / p.dt)
        rhs[0] -= left * u[0]
        rhs[-1] -= right * u[-1]
        u[1:-1] = solveh_banded(ab, rhs)
    rate = np.diff(u) / h
    a_xy = alpha + beta * rate
    a_xx = (a[:, 0, 0] + 2.0 * p.dt * rate * a_xy + c) / (1.0 + c)
    new = np.empty_like(a)
    new[:, 0, 0], new[:, 1, 1] = a_xx, a_yy
    new[:, 0, 1] = new[:, 1, 0] = a_xy
    return u, new


def macro_shear_step(state, cfg):
    """Advance velocity and per-cell conformation tensors by ``dt``.

    ``cfg.macro_scheme`` selects the conformation update: ``"semi-implicit"``
    (explicit stretching, implicit relaxation), ``"em-moment"`` (the exact
    second-moment recursion of the Hookean Euler-Maruyama scheme) or
    ``"implicit"`` (stress and velocity solved together, Oldroyd-B only).
    """
    if state.conformation is None:
        raise ConfigError("macro_shear_step needs a state carrying conformation tensors")
    p = cfg.params
    if cfg.macro_scheme == "implicit":
        u, a = _implicit_oldroyd_b(state, cfg)
    else:
        u = solve_velocity(state.u, state.tau, p, cfg.boundary)
        kappa = shear_gradient(np.diff(u) / np.diff(state.y))
        a = step_conformation(state.conformation, kappa, p.weissenberg, p.dt, cfg.model, cfg.b,
                              cfg.macro_scheme)
    return ShearState(state.t + p.dt, state.step + 1, state.y, u, macro_shear_stress(a, cfg),
                      conformation=a)


def shear_step(state, cfg):
    return connffessit_step(state, cfg) if cfg.is_micro else macro_shear_step(state, cfg)


# -- free energy -------------------------------------------------------------


def velocity_norms(u):
    """``(|u|_{L2}^2, |d_y u|_{L2}^2)`` of a piecewise-affine profile on [0, 1]."""
    n = len(u) - 1
    h = 1.0 / n
    l2 = h / 3.0 * float(np.sum(u[:-1] ** 2 + u[:-1] * u[1:] + u[1:] ** 2))
    grad = float(np.sum(np.diff(u) ** 2)) / h
    return l2, grad


def state_free_energy(state, cfg):
    """Discrete free energy of a shear state.

    Ensembles use their empirical conformation ``mean X (x) X`` (Hookean
    only); FENE ensembles return ``None``.
    """
    if state.conformation is not None:
        a = state.conformation
        model = cfg.model
    elif cfg.model == "hookean":
        x = state.ensemble.configs
        a = np.einsum("ckI,ckJ->cIJ", x, x) / x.shape[1]
        model = "oldroyd-b"
    else:
        return None
    l2, grad = velocity_norms(state.u)
    measures = np.full(len(a), 1.0 / len(a))
    return free_energy(model, a, cfg.params, cfg.b, measures, l2, grad)


@dataclass
class ShearRun:
    """Recorded output of :func:`run_shear`.

    ``u`` is ``(n_records, N + 1)``, ``tau`` and ``tau_stderr`` are
    ``(n_records, N)``; ``free_energy`` holds one record (or ``None``) per
    recorded time.
    """

    times: np.ndarray
    y: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    tau_stderr: np.ndarray | None
    free_energy: list
    final: ShearState
    zero_forcing: bool = False

    def conformation_xy(self, cfg):
        """Per-cell ``E(P F_Q)`` / ``A_xy`` recovered from the recorded stress."""
        p = cfg.params
        return self.tau * p.weissenberg / p.epsilon


def run_shear(cfg, t_end, record_every=1, state=None, with_free_energy=True):
    """Run from ``state`` (default :func:`initial_state`) up to ``t_end``."""
    if t_end < 0:
        raise ConfigError("t_end must be non-negative")
    n_steps = int(round(t_end / cfg.dt))
    if abs(n_steps * cfg.dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ConfigError(f"t_end = {t_end} is not a whole number of steps dt = {cfg.dt}")
    record_every = max(1, int(record_every))
    state = initial_state(cfg) if state is None else state
    times, us, taus, errs, fes = [], [], [], [], []

    def record(s):
        times.append(s.t)
        us.append(s.u.copy())
        taus.append(s.tau.copy())
        if s.ensemble is not None:
            errs.append(s.tau_stderr if s.tau_stderr is not None
                        else micro_shear_stress(s.ensemble.configs, cfg.force_model, cfg.params)[1])
        if with_free_energy:
            fes.append(state_free_energy(s, cfg))

    record(state)
    for n in range(1, n_steps + 1):
        state = shear_step(state, cfg)
        if n % record_every == 0 or n == n_steps:
            record(state)
    return ShearRun(
        np.array(times),
        state.y.copy(),
        np.array(us),
        np.array(taus),
        np.array(errs) if errs else None,
        fes,
        state,
        cfg.zero_forcing,
    )


@dataclass
class FreeEnergyMonitor:
    times: np.ndarray
    records: list
    increases: list  # indices i with F[i] > F[i-1] + tol
    zero_forcing: bool

    @property
    def flagged(self):
        """True when an increase occurs in a run where one is forbidden."""
        return self.zero_forcing and bool(self.increases)

    @property
    def totals(self):
        return np.array([r.total for r in self.records])


def free_energy_monitor(trajectory, cfg, tol=MONOTONE_TOL):
    """Free-energy time series of a macro shear run.

    ``trajectory`` is a :class:`ShearRun` or a sequence of states.  Increases
    are always listed but only flagged when both plates are at rest.
    """
    if isinstance(trajectory, ShearRun):
        times = trajectory.times
        records = [r if r is not None else state_free_energy(trajectory.final, cfg) for r in trajectory.free_energy]
    else:
        states = list(trajectory)
        times = np.array([s.t for s in states])
        records = [state_free_energy(s, cfg) for s in states]
    if any(r is None for r in records):
        raise ConfigError("free energy is undefined for this model")
    totals = np.array([r.total for r in records])
    rises = [i for i in range(1, len(totals)) if totals[i] - totals[i - 1] > tol * max(1.0, abs(totals[i - 1]))]
    return FreeEnergyMonitor(np.asarray(times), records, rises, cfg.zero_forcing)


# -- convergence study -------------------------------------------------------


def solution_error(u, a_xy, u_ref, a_xy_ref):
    """``|u - u_ref|_{L2} + |a_xy - a_xy_ref|_{L1}`` on the finer of the two meshes.

    Velocities are interpolated as piecewise-affine functions; cell values are
    repeated onto the fine cells, so the fine cell count must be a multiple
    of the coarse one.
    """
    n, m = len(a_xy), len(a_xy_ref)
    if m % n:
        raise ConfigError(f"reference mesh ({m} cells) does not refine the coarse mesh ({n} cells)")
    y_fine = np.linspace(0.0, 1.0, m + 1)
    e_u = np.interp(y_fine, np.linspace(0.0, 1.0, n + 1), u) - u_ref
    l2, _ = velocity_norms(e_u)
    l1 = float(np.sum(np.abs(np.repeat(a_xy, m // n) - a_xy_ref))) / m
    return float(np.sqrt(l2)) + l1


@dataclass(frozen=True)
class ConvergenceRow:
    parameter: str  # "dt", "dy" or "K"
    value: float
    error: float
    stderr: float = 0.0


@dataclass
class ConvergenceStudy:
    rows: list
    orders: dict

    def errors(self, parameter):
        sel = [r for r in self.rows if r.parameter == parameter]
        return np.array([r.value for r in sel]), np.array([r.error for r in sel])


def fitted_order(values, errors):
    """Least-squares slope of ``log(error)`` against ``log(value)``."""
    values, errors = np.asarray(values, float), np.asarray(errors, float)
    if len(values) < 2 or np.any(errors <= 0):
        return float("nan")
    return float(np.polyfit(np.log(values), np.log(errors), 1)[0])


def _final_xy(cfg, t_end):
    run = run_shear(cfg, t_end, record_every=10**9, with_free_energy=False)
    return run.u[-1], run.conformation_xy(cfg)[-1]


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def convergence_study(base, dts=(), dys=(), ks=(), t_end=1.0, repeats=64, refine=8, threads=1):
    """Errors against each discretization parameter varied in isolation.

    * ``dt`` and ``dy`` sweeps run the deterministic Oldroyd-B solver and
      compare with the same solver at ``refine`` times finer ``dt`` (resp.
      ``dy``);
    * the ``K`` sweep runs ``repeats`` Hookean CONNFFESSIT simulations per
      ``K`` and compares each with the macro solver using the Euler-Maruyama
      moment recursion at the same ``dt`` and ``dy``, so only the Monte Carlo
      error remains.  The reported error is the mean over repeats.

    ``base`` fixes the remaining parameters (flow numbers, boundary, seed).
    """
    macro = base.with_(model="oldroyd-b", b=None, macro_scheme="semi-implicit")
    rows, orders = [], {}

    if dts:
        fine = macro.with_(params=macro.params.with_dt(min(dts) / refine))
        u_ref, a_ref = _final_xy(fine, t_end)
        for dt in dts:
            u, a = _final_xy(macro.with_(params=macro.params.with_dt(dt)), t_end)
            rows.append(ConvergenceRow("dt", dt, solution_error(u, a, u_ref, a_ref)))
        orders["dt"] = fitted_order(*_sweep(rows, "dt"))

    if dys:
        fine = macro.with_(dy=min(dys) / refine)
        u_ref, a_ref = _final_xy(fine, t_end)
        for dy in dys:
            u, a = _final_xy(macro.with_(dy=dy), t_end)
            rows.append(ConvergenceRow("dy", dy, solution_error(u, a, u_ref, a_ref)))
        orders["dy"] = fitted_order(*_sweep(rows, "dy"))

    if ks:
        mean_cfg = macro.with_(macro_scheme="em-moment")
        u_ref, a_ref = _final_xy(mean_cfg, t_end)
        micro = base.with_(model="hookean", b=None)
        for k in ks:
            def one(r, k=k):
                cfg = micro.with_(replicas=k, seed=base.seed + r)
                u, a = _final_xy(cfg, t_end)
                return solution_error(u, a, u_ref, a_ref)

            errs = np.array(_map(one, range(repeats), threads))
            stderr = float(np.std(errs, ddof=1) / np.sqrt(repeats)) if repeats > 1 else 0.0
            rows.append(ConvergenceRow("K", k, float(np.mean(errs)), stderr))
        orders["K"] = fitted_order(*_sweep(rows, "K"))

    return ConvergenceStudy(rows, orders)


def _sweep(rows, parameter):
    sel = [r for r in rows if r.parameter == parameter]
    return [r.value for r in sel], [r.error for r in sel]


__all__ = [
    "SchemeConfig",
    "ShearState",
    "ShearRun",
    "FreeEnergyMonitor",
    "FreeEnergyRecord",
    "ConvergenceRow",
    "ConvergenceStudy",
    "initial_state",
    "solve_velocity",
    "micro_shear_stress",
    "connffessit_step",
    "macro_shear_step",
    "shear_step",
    "run_shear",
    "state_free_energy",
    "free_energy_monitor",
    "velocity_norms",
    "solution_error",
    "fitted_order",
    "convergence_study",
]
