"""Variance reduction for Monte Carlo stresses.

* control variates with an optimal coefficient (equilibrium or Hookean
  companion processes driven by the same Brownian increments);
* spatial correlation strategies for the Brownian motions of a shear run;
* a reduced basis of control variates selected greedily over a trial set of
  velocity gradients, combined online by least squares.

Empirical variances use the unbiased ``1/(M - 1)`` normalization.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dumbbell import ForceModel, em_step, equilibrium_draw, sample_equilibrium
from .errors import ConfigError, DegenerateControl
from .macro import step_conformation
from .rng import TAG_RB, BrownianStrategy, brownian_normals, keyed_generator, keyed_normals

Z_95 = 1.96
RIDGE = 1e-10
#: sample blocks of the reduced-basis seed schedule
BLOCK_LARGE, BLOCK_TRAINING, BLOCK_ONLINE = 0, 1, 2

__all__ = [
    "BrownianStrategy",
    "apply_brownian_strategy",
    "optimal_alpha",
    "controlled_estimate",
    "ControlVariateSpec",
    "CoupledSamples",
    "coupled_control_variate_run",
    "VarianceReport",
    "variance_report",
    "StrategyVariance",
    "variance_comparison_study",
    "bootstrap_ratio",
    "RbBasis",
    "RbOnlineResult",
    "homogeneous_samples",
    "rb_offline",
    "rb_online",
]


def apply_brownian_strategy(strategy, n_cells, step_key):
    """Increment generator for one time step.

    ``step_key`` is ``(seed, step)``.  The returned callable maps
    ``(n_replicas, dim, retry=0)`` to standard normals of shape
    ``(n_cells, n_replicas, dim)``.
    """
    strategy = BrownianStrategy.parse(strategy)
    seed, step = step_key

    def draw(n_replicas, dim=2, retry=0):
        return brownian_normals(strategy, seed, step, n_cells, n_replicas, dim, retry=retry)

    return draw


# -- control variates --------------------------------------------------------


def optimal_alpha(z_samples, y_samples):
    """Coefficient(s) minimizing the empirical variance of ``Z - alpha Y``.

    ``y_samples`` of shape ``(M,)`` gives ``Cov(Z, Y) / Var(Y)``; shape
    ``(M, n)`` solves the least-squares normal equations for ``n``
    coefficients.
    """
    z = np.asarray(z_samples, dtype=float)
    y = np.asarray(y_samples, dtype=float)
    if y.shape[0] != z.shape[0] or z.ndim != 1:
        raise ConfigError("z must be (M,) and y must be (M,) or (M, n) with matching M")
    if z.shape[0] < 2:
        raise DegenerateControl("need at least two samples")
    zc = z - z.mean()
    if y.ndim == 1:
        yc = y - y.mean()
        var = float(yc @ yc)
        if var <= 1e-300 or var <= 1e-28 * float(y @ y):
            raise DegenerateControl("control variate has zero empirical variance")
        return float(zc @ yc) / var
    yc = y - y.mean(axis=0)
    gram = yc.T @ yc
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise DegenerateControl("control variates are linearly dependent on this sample")
    return np.linalg.solve(gram, yc.T @ zc)


def controlled_estimate(z, y, mean_y, alpha=None):
    """Corrected samples ``Z - alpha (Y - E Y)`` with ``alpha`` defaulting to
    the empirical optimum.  Returns ``(estimate, corrected_samples, alpha)``."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if alpha is None:
        alpha = optimal_alpha(z, y)
    corrected = z - (y - mean_y) @ np.atleast_1d(alpha) if y.ndim == 2 else z - alpha * (y - mean_y)
    return float(np.mean(corrected)), corrected, alpha


@dataclass(frozen=True)
class ControlVariateSpec:
    """Companion process used as control: ``"equilibrium"`` (same spring law,
    no flow) or ``"hookean"`` (linear spring, same flow).  Both companions
    consume the increments of the primary process."""

    variant: str = "hookean"

    def __post_init__(self):
        if self.variant not in ("equilibrium", "hookean"):
            raise ConfigError(f"unknown control variate {self.variant!r}")

    @property
    def shares_increments(self):
        return True


@dataclass
class CoupledSamples:
    z: np.ndarray  # (K, d, d) samples of X (x) F(X)
    y: np.ndarray  # (K, d, d) samples of the companion's X~ (x) F~(X~)
    mean_y: np.ndarray  # (d, d) exact expectation of y

    def component(self, i=0, j=1):
        return self.z[:, i, j], self.y[:, i, j], float(self.mean_y[i, j])


def coupled_control_variate_run(spec, model, kappa, params, K, t_end, seed=0, dim=2):
    """Run ``X`` and its companion on shared increments from a shared start.

    Both start from an exact equilibrium draw of ``model``.  The Hookean
    companion's expectation comes from the second-moment recursion of its
    Euler-Maruyama scheme, so it is exact for the discrete process; the
    equilibrium companion's is ``I`` (exact for the continuous process).
    """
    if not isinstance(model, ForceModel):
        raise ConfigError("model must be a ForceModel")
    kappa = np.asarray(kappa, dtype=float)
    n_steps = int(round(t_end / params.dt))
    we, dt = params.weissenberg, params.dt
    x = sample_equilibrium(model, 1, K, dim, seed).configs[0]
    companion_model = model if spec.variant == "equilibrium" else ForceModel.hookean()
    companion_kappa = np.zeros_like(kappa) if spec.variant == "equilibrium" else kappa
    xt = x.copy()
    for n in range(n_steps):
        def redraw(retry, n=n):
            return keyed_normals(seed, (K, dim), step=n, retry=retry)

        normals = redraw(0)
        x, used = em_step(x, model, kappa, dt, we, normals, redraw)
        xt, _ = em_step(xt, companion_model, companion_kappa, dt, we, used, redraw)
    z = x[:, :, None] * model.force(x)[:, None, :]
    y = xt[:, :, None] * companion_model.force(xt)[:, None, :]
    if spec.variant == "equilibrium":
        mean_y = np.eye(dim)
    else:
        second = model.b / (model.b + dim + 2.0) if model.is_fene else 1.0
        a = second * np.eye(dim)
        for _ in range(n_steps):
            a = step_conformation(a, kappa, we, dt, "oldroyd-b", scheme="em-moment")
        mean_y = a
    return CoupledSamples(z, y, mean_y)


@dataclass
class VarianceReport:
    """Empirical mean and variance of a (possibly vector) quantity over
    ``samples`` independent draws."""

    mean: np.ndarray
    variance: np.ndarray
    samples: int
    name: str = ""

    @property
    def half_width(self):
        return Z_95 * np.sqrt(self.variance / self.samples)


def variance_report(samples, name=""):
    """Report for samples stacked along axis 0."""
    s = np.asarray(samples, dtype=float)
    if s.shape[0] < 2:
        raise ConfigError("a variance needs at least two samples")
    return VarianceReport(s.mean(axis=0), s.var(axis=0, ddof=1), s.shape[0], name)


# -- Brownian correlation study ----------------------------------------------


@dataclass
class StrategyVariance:
    strategy: BrownianStrategy
    u: VarianceReport  # velocity at the monitored node
    tau: VarianceReport  # per-cell shear stress
    u_samples: np.ndarray = field(repr=False)
    tau_samples: np.ndarray = field(repr=False)

    @property
    def var_u(self):
        return float(self.u.variance)

    @property
    def var_tau(self):
        """Per-cell stress variance averaged over cells."""
        return float(np.mean(self.tau.variance))


def variance_comparison_study(cfg, strategies, repeats, t_end, node=None, threads=1):
    """Replicate a Hookean shear run ``repeats`` times per Brownian strategy.

    Replication ``r`` uses seed ``cfg.seed + r`` for every strategy.  The
    velocity is monitored at ``node`` (default: the mid-channel node).
    Results do not depend on ``threads``.
    """
    from .shear import run_shear

    if cfg.model != "hookean":
        raise ConfigError("the strategy comparison runs Hookean CONNFFESSIT")
    if repeats < 2:
        raise ConfigError("need at least two replications")
    node = cfg.n_cells // 2 if node is None else int(node)
    out = {}
    for strategy in strategies:
        strategy = BrownianStrategy.parse(strategy)

        def one(r, strategy=strategy):
            run = run_shear(cfg.with_(brownian=strategy, seed=cfg.seed + r), t_end,
                            record_every=10**9, with_free_energy=False)
            return run.u[-1, node], run.tau[-1]

        if threads and threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                results = list(pool.map(one, range(repeats)))
        else:
            results = [one(r) for r in range(repeats)]
        u = np.array([r[0] for r in results])
        tau = np.array([r[1] for r in results])
        out[strategy] = StrategyVariance(strategy, variance_report(u, "u"), variance_report(tau, "tau"), u, tau)
    return out


def _mean_cell_variance(x):
    # x: (..., R, cells); variance over replications, averaged over cells
    return np.mean(np.var(x, axis=-2, ddof=1), axis=-1)


def bootstrap_ratio(a, b, n_resamples=2000, confidence=0.95, seed=0):
    """Ratio ``Var(a) / Var(b)`` with one-sided percentile bounds from a
    paired bootstrap over replications.

    ``a`` and ``b`` are ``(R,)`` or ``(R, cells)``; for the latter the
    statistic is the cell-averaged variance.  Returns ``(ratio, low, high)``:
    the ratio is below ``high`` (above ``low``) at the given confidence.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigError("paired bootstrap needs samples of equal shape")
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    r = a.shape[0]
    idx = np.random.default_rng(seed).integers(0, r, size=(n_resamples, r))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = _mean_cell_variance(a[idx]) / _mean_cell_variance(b[idx])
        ratio = float(_mean_cell_variance(a) / _mean_cell_variance(b))
    # resamples of a single replication have zero variance: 0/0 is dropped, x/0 stays inf
    ratios = ratios[~np.isnan(ratios)]
    if ratios.size == 0:
        return ratio, float("nan"), float("nan")
    low, high = np.quantile(ratios, [1.0 - confidence, confidence])
    return ratio, float(low), float(high)


# -- reduced basis of control variates ---------------------------------------


def _as_lambdas(lambdas):
    lam = np.asarray(lambdas, dtype=float)
    if lam.ndim == 2:
        lam = lam[None]
    if lam.ndim != 3 or lam.shape[1] != lam.shape[2]:
        raise ConfigError("velocity gradients must be an array of (d, d) tensors")
    return lam


def homogeneous_samples(model, lambdas, params, t_end, m, seed, block, component=(0, 1)):
    """Samples of ``(X (x) F(X))_component`` at ``t_end`` for every gradient.

    All gradients share the start draw and increments of sample block
    ``block``; FENE redraws are keyed by (block, step, retry) only, so a
    sample index sees the same random inputs whatever the gradient.
    Returns ``(len(lambdas), m)``.
    """
    lam = _as_lambdas(lambdas)
    dim = lam.shape[-1]
    n_steps = int(round(t_end / params.dt))
    start = equilibrium_draw(model, keyed_generator(seed, step=0, cell=block, tag=TAG_RB), m, dim)
    x = np.broadcast_to(start, (len(lam), m, dim)).copy()
    for n in range(1, n_steps + 1):
        def redraw(retry, n=n):
            eta = keyed_normals(seed, (m, dim), step=n, cell=block, tag=TAG_RB, retry=retry)
            return np.broadcast_to(eta, x.shape)

        x, _ = em_step(x, model, lam, params.dt, params.weissenberg, redraw(0), redraw)
    i, j = component
    return x[..., i] * model.force(x)[..., j]


@dataclass
class RbBasis:
    """Greedy-selected control variates, stored as a seed schedule.

    ``reference_means[n]`` is the ``m_large``-sample mean of ``Z`` at
    ``parameters[n]``; online, ``Y^n = Z^n - reference_means[n]`` is
    regenerated on the online sample block.
    """

    parameters: np.ndarray  # (N, d, d)
    reference_means: np.ndarray  # (N,)
    selected: list  # indices into the trial set
    greedy_variances: list  # max post-projection variance at each selection
    m_large: int
    m_train: int
    seed: int
    t_end: float
    model: ForceModel
    params: object
    component: tuple = (0, 1)
    error_functional: str = "post-projection empirical variance"

    @property
    def size(self):
        return len(self.parameters)

    def to_manifest(self):
        p = self.params
        return {
            "parameters": self.parameters.tolist(),
            "reference_means": [float(v) for v in self.reference_means],
            "selected": [int(i) for i in self.selected],
            "greedy_variances": [float(v) for v in self.greedy_variances],
            "m_large": self.m_large,
            "m_train": self.m_train,
            "seed": self.seed,
            "blocks": {"large": BLOCK_LARGE, "training": BLOCK_TRAINING, "online_first": BLOCK_ONLINE},
            "t_end": self.t_end,
            "model": {"variant": self.model.variant, "b": self.model.b},
            "params": asdict(p),
            "component": list(self.component),
            "error_functional": self.error_functional,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_manifest(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_manifest(cls, doc):
        from .dumbbell import FlowParams

        return cls(
            parameters=np.array(doc["parameters"], dtype=float),
            reference_means=np.array(doc["reference_means"], dtype=float),
            selected=list(doc["selected"]),
            greedy_variances=list(doc["greedy_variances"]),
            m_large=int(doc["m_large"]),
            m_train=int(doc["m_train"]),
            seed=int(doc["seed"]),
            t_end=float(doc["t_end"]),
            model=ForceModel(doc["model"]["variant"], doc["model"]["b"]),
            params=FlowParams(**doc["params"]),
            component=tuple(doc["component"]),
            error_functional=doc.get("error_functional", "post-projection empirical variance"),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_manifest(json.load(fh))


def _residual_variance(z, controls):
    """Empirical variance of ``z`` after the best least-squares correction by
    the rows of ``controls`` (shape ``(n, M)``)."""
    zc = z - z.mean(axis=-1, keepdims=True)
    if controls is None or len(controls) == 0:
        return np.sum(zc * zc, axis=-1) / (z.shape[-1] - 1)
    c = controls - controls.mean(axis=-1, keepdims=True)
    coef = np.linalg.lstsq(c.T, zc.T, rcond=None)[0]
    res = zc - (c.T @ coef).T
    return np.sum(res * res, axis=-1) / (z.shape[-1] - 1)


def rb_offline(lambda_trial, n_basis, m_large, model, params, t_end=1.0, m_train=None, seed=0,
               component=(0, 1), rel_floor=1e-12):
    """Greedy selection of control-variate parameters over ``lambda_trial``.

    Every trial gradient is simulated once on the training block (``m_train``
    samples, default ``m_large // 100``).  Step ``n`` picks the unselected
    trial gradient whose training variance after projection on the current
    controls is largest (ties: lowest index), then computes its reference mean
    on the large block.  Selection stops early when the largest remaining
    variance is below ``rel_floor`` times the initial largest.
    """
    lam = _as_lambdas(lambda_trial)
    if len(lam) == 0:
        raise ConfigError("empty trial set")
    if n_basis < 1 or n_basis > len(lam):
        raise ConfigError(f"basis size must lie in [1, {len(lam)}], got {n_basis}")
    if m_train is None:
        m_train = max(2, m_large // 100)
    z_train = homogeneous_samples(model, lam, params, t_end, m_train, seed, BLOCK_TRAINING, component)
    selected, greedy_vars, means = [], [], []
    first = None
    for _ in range(n_basis):
        controls = z_train[selected] if selected else None
        v = _residual_variance(z_train, controls)
        v[selected] = -np.inf
        best = int(np.argmax(v))
        if first is None:
            first = v[best]
        elif not v[best] > rel_floor * first:
            break
        selected.append(best)
        greedy_vars.append(float(v[best]))
        big = homogeneous_samples(model, lam[best], params, t_end, m_large, seed, BLOCK_LARGE, component)[0]
        means.append(float(np.mean(big)))
    return RbBasis(lam[selected], np.array(means), selected, greedy_vars, int(m_large), int(m_train),
                   int(seed), float(t_end), model, params, tuple(component))


@dataclass
class RbOnlineResult:
    lam: np.ndarray
    estimate: float
    variance: float  # corrected empirical variance V_M
    plain_mean: float
    plain_variance: float
    alpha: np.ndarray
    report: VarianceReport
    ridge: bool = False

    @property
    def reduction(self):
        if self.variance <= 0:
            return float("inf")
        return self.plain_variance / self.variance


def rb_online(lam, basis, m_small=None, block=BLOCK_ONLINE):
    """Estimate ``E(Z^lam)`` with the basis as control variates.

    Samples of ``Z^lam`` and of every basis control are generated on the
    same sample block; ``alpha`` solves the empirical least-squares problem
    (ridge ``1e-10`` relative to the Gram diagonal if it is rank deficient).
    """
    if basis.size == 0:
        raise ConfigError("empty reduced basis")
    if block < BLOCK_ONLINE:
        raise ConfigError(f"online sample blocks start at {BLOCK_ONLINE}")
    m = basis.m_large // 100 if m_small is None else int(m_small)
    if m < 2:
        raise ConfigError("online sample count must be at least 2")
    lam = _as_lambdas(lam)[0]
    everything = np.concatenate([lam[None], basis.parameters])
    samples = homogeneous_samples(basis.model, everything, basis.params, basis.t_end, m, basis.seed, block,
                                  basis.component)
    z = samples[0]
    y = samples[1:] - basis.reference_means[:, None]
    zc = z - z.mean()
    yc = y - y.mean(axis=1, keepdims=True)
    gram = yc @ yc.T
    rhs = yc @ zc
    ridge = np.linalg.matrix_rank(gram) < len(gram)
    if ridge:
        warnings.warn("reduced-basis normal equations are rank deficient; using a ridge solve", RuntimeWarning)
        scale = max(float(np.mean(np.diag(gram))), np.finfo(float).tiny)
        alpha = np.linalg.solve(gram + RIDGE * scale * np.eye(len(gram)), rhs)
    else:
        alpha = np.linalg.solve(gram, rhs)
    corrected = z - alpha @ y
    report = variance_report(corrected, "corrected")
    return RbOnlineResult(lam, float(report.mean), float(report.variance), float(z.mean()),
                          float(np.var(z, ddof=1)), alpha, report, bool(ridge))
