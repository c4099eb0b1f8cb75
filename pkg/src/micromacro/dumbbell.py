"""Dumbbell kinetics: spring forces, Euler-Maruyama ensembles, Kramers stress.

All quantities are nondimensional.  A configuration ``x`` is an array whose
last axis holds the end-to-end vector components; leading axes are batch
axes (cells, replicas, ...).
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, StepFailure
from .rng import TAG_INIT, TAG_STEP, SHARED_CELL, BrownianStrategy, brownian_normals, keyed_generator

#: relative shrink of the FENE ball used by the rejection step
FENE_BALL_MARGIN = 1e-12
MAX_RETRIES = 100
#: default guard dt <= ratio * We for FENE runs
FENE_DT_RATIO = 0.1


@dataclass(frozen=True)
class FlowParams:
    reynolds: float = 1.0
    weissenberg: float = 1.0
    epsilon: float = 0.5
    dt: float = 1e-3

    def __post_init__(self):
        for name in ("reynolds", "weissenberg", "dt"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")

    def with_dt(self, dt):
        return replace(self, dt=dt)


@dataclass(frozen=True)
class ForceModel:
    """Entropic spring law.  ``variant`` is ``"hookean"`` or ``"fene"``."""

    variant: str = "hookean"
    b: float | None = None

    def __post_init__(self):
        variant = self.variant.lower()
        if variant not in ("hookean", "fene"):
            raise ConfigError(f"unknown force model {self.variant!r}")
        object.__setattr__(self, "variant", variant)
        if variant == "fene":
            if self.b is None or not self.b > 0:
                raise ConfigError("FENE force requires an extensibility b > 0")
        elif self.b is not None:
            raise ConfigError("the Hookean force takes no extensibility parameter")

    @classmethod
    def hookean(cls):
        return cls("hookean")

    @classmethod
    def fene(cls, b):
        return cls("fene", float(b))

    @property
    def is_fene(self):
        return self.variant == "fene"

    def _check(self, sq):
        if self.is_fene and np.any(sq >= self.b):
            raise DomainError(f"FENE configuration outside the ball |X| < sqrt(b) = {np.sqrt(self.b):.6g}")

    def force(self, x):
        x = np.asarray(x, dtype=float)
        if not self.is_fene:
            return x.copy()
        sq = np.sum(x * x, axis=-1, keepdims=True)
        self._check(sq)
        return x / (1.0 - sq / self.b)

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        sq = np.sum(x * x, axis=-1)
        if not self.is_fene:
            return 0.5 * sq
        self._check(sq)
        return -0.5 * self.b * np.log1p(-sq / self.b)

    def hessian(self, x):
        """Hessian of the potential, shape ``x.shape + (d,)``."""
        x = np.asarray(x, dtype=float)
        d = x.shape[-1]
        eye = np.eye(d)
        if not self.is_fene:
            return np.broadcast_to(eye, x.shape + (d,)).copy()
        sq = np.sum(x * x, axis=-1)[..., None, None]
        self._check(sq)
        g = 1.0 - sq / self.b
        return eye / g + 2.0 * x[..., :, None] * x[..., None, :] / (self.b * g * g)


def force(model, x):
    """Spring force ``F(x)``: ``x`` (Hookean) or ``x / (1 - |x|^2/b)`` (FENE)."""
    return model.force(x)


def potential(model, x):
    """Spring potential, whose gradient is :func:`force`."""
    return model.potential(x)


@dataclass
class DumbbellEnsemble:
    """K replicas of the configuration in each of ``cells`` spatial cells.

    ``step`` counts the Euler-Maruyama steps taken and addresses the random
    stream used for the next step.
    """

    configs: np.ndarray
    seed: int = 0
    step: int = 0
    strategy: BrownianStrategy = field(default=BrownianStrategy.IID)

    def __post_init__(self):
        self.configs = np.asarray(self.configs, dtype=float)
        if self.configs.ndim != 3:
            raise ConfigError("configs must have shape (cells, replicas, dim)")
        if self.dim not in (2, 3):
            raise ConfigError(f"configuration dimension must be 2 or 3, got {self.dim}")
        if self.replicas < 1 or self.cells < 1:
            raise ConfigError("an ensemble needs at least one cell and one replica")
        if not np.all(np.isfinite(self.configs)):
            raise DomainError("non-finite configuration in ensemble")
        self.strategy = BrownianStrategy.parse(self.strategy)

    @property
    def cells(self):
        return self.configs.shape[0]

    @property
    def replicas(self):
        return self.configs.shape[1]

    @property
    def dim(self):
        return self.configs.shape[2]

    def step_normals(self, retry=0):
        """Standard normals addressed by (seed, cell, replica, step)."""
        return brownian_normals(self.strategy, self.seed, self.step, self.cells, self.replicas, self.dim, retry=retry)


def equilibrium_draw(model, gen, n, dim=2):
    """``n`` exact equilibrium configurations from generator ``gen``.

    FENE radii use ``|X|^2/b ~ Beta(d/2, b/2 + 1)``.
    """
    if not model.is_fene:
        return gen.standard_normal((n, dim))
    direction = gen.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    s = gen.beta(dim / 2.0, model.b / 2.0 + 1.0, size=n)
    s = np.minimum(s, (1.0 - FENE_BALL_MARGIN) ** 2 - 1e-15)
    return direction * np.sqrt(model.b * s)[:, None]


def sample_equilibrium(model, n_cells, n_replicas, dim=2, seed=0, strategy=BrownianStrategy.IID,
                       shared_components=()):
    """Draw an ensemble from the exact equilibrium law ``Z^-1 exp(-Pi)``.

    Under the constant and alternating strategies all cells share the same
    draw (the non-shared components flipped on odd cells for the alternating
    one, which preserves the law).  Under the independent strategy,
    ``shared_components`` are still common to all cells for the Hookean law,
    whose components are independent; FENE draws stay fully per cell.
    """
    strategy = BrownianStrategy.parse(strategy)

    def draw(cell):
        return equilibrium_draw(model, keyed_generator(seed, step=0, cell=cell, tag=TAG_INIT), n_replicas, dim)

    shared = list(shared_components)
    if strategy is BrownianStrategy.IID:
        configs = np.stack([draw(c) for c in range(n_cells)])
        if shared and not model.is_fene:
            configs[:, :, shared] = configs[SHARED_CELL][:, shared]
    else:
        configs = np.broadcast_to(draw(SHARED_CELL), (n_cells, n_replicas, dim)).copy()
        if strategy is BrownianStrategy.ALTERNATING:
            flip = [i for i in range(dim) if i not in shared]
            configs[1::2, :, flip] *= -1.0
    return DumbbellEnsemble(configs, seed=seed, step=0, strategy=strategy)


def drift(model, x, kappa, we):
    """Deterministic drift ``kappa x - F(x) / (2 We)`` (batched)."""
    kappa = np.asarray(kappa, dtype=float)
    return np.matmul(x, np.swapaxes(kappa, -1, -2)) - model.force(x) / (2.0 * we)


def em_step(x, model, kappa, dt, we, normals, redraw=None, max_retries=MAX_RETRIES):
    """One Euler-Maruyama step on a batch of configurations.

    ``normals`` are standard normals shaped like ``x``.  For FENE, proposals
    leaving the ball of radius ``sqrt(b)(1 - 1e-12)`` are redrawn from
    ``redraw(retry)`` (full-shape normals, only rejected entries are used).
    Returns the new configurations and the normals actually used.
    """
    base = x + dt * drift(model, x, kappa, we)
    return em_finish(base, model, np.sqrt(dt / we), normals, redraw, max_retries)


def em_finish(base, model, scale, normals, redraw=None, max_retries=MAX_RETRIES):
    """Add ``scale * normals`` to the drifted state ``base``, redrawing FENE rejections.

    ``scale`` is ``sqrt(dt/We)``.  Besides proposals outside the ball, those in
    the shell ``1 - |X|^2/b < dt/(2 We)`` are rejected: from there the explicit
    drift overshoots past the opposite side of the ball and no redraw of the
    next increment can recover.  The equilibrium mass of the shell is of order
    ``(dt/2We)^(b/2+1)``.
    """
    new = base + scale * normals
    if not model.is_fene:
        return new, normals
    limit = model.b * min((1.0 - FENE_BALL_MARGIN) ** 2, 1.0 - 0.5 * scale * scale)
    bad = np.sum(new * new, axis=-1) >= limit
    if not bad.any():
        return new, normals
    normals = normals.copy()
    for retry in range(1, max_retries + 1):
        if redraw is None:
            break
        fresh = redraw(retry)
        normals[bad] = fresh[bad]
        new[bad] = base[bad] + scale * normals[bad]
        bad = bad & (np.sum(new * new, axis=-1) >= limit)
        if not bad.any():
            return new, normals
    where = tuple(int(i) for i in np.argwhere(bad)[0])
    raise StepFailure(f"FENE step rejected {max_retries} times at index {where} (cell..., replica)")


def check_fene_dt(model, params, max_dt_ratio=FENE_DT_RATIO):
    if model.is_fene and max_dt_ratio is not None and params.dt > max_dt_ratio * params.weissenberg:
        raise ConfigError(
            f"FENE runs require dt <= {max_dt_ratio} * We (dt={params.dt}, We={params.weissenberg})"
        )


def evolve_ensemble(ens, model, kappa, params, normals=None, max_dt_ratio=FENE_DT_RATIO):
    """Advance every replica by one Euler-Maruyama step under gradient ``kappa``.

    ``kappa`` is a ``(d, d)`` tensor or one tensor per cell.  ``normals``
    defaults to the ensemble's keyed stream for its current step.
    """
    check_fene_dt(model, params, max_dt_ratio)
    kappa = np.asarray(kappa, dtype=float)
    if not np.all(np.isfinite(kappa)):
        raise ConfigError("velocity gradient must be finite")
    if normals is None:
        normals = ens.step_normals()
    new, _ = em_step(
        ens.configs, model, kappa, params.dt, params.weissenberg, normals, redraw=ens.step_normals
    )
    return replace(ens, configs=new, step=ens.step + 1)


def _sorted_mean(values, axis):
    # sorting first makes the sum independent of replica order
    return np.sum(np.sort(values, axis=axis), axis=axis) / values.shape[axis]


def second_moment(ens, model=None):
    """Per-cell empirical ``E(X (x) F(X))`` (``F`` = identity if no model)."""
    x = ens.configs if isinstance(ens, DumbbellEnsemble) else np.asarray(ens, dtype=float)
    f = x if model is None else model.force(x)
    prod = x[..., :, None] * f[..., None, :]
    return _sorted_mean(prod, axis=-3)


def kramers_stress(ens, model, params):
    """Per-cell Kramers stress ``(eps/We)(mean X (x) F(X) - I)``, symmetrized.

    Accepts an ensemble or a raw ``(cells, K, d)`` array; returns
    ``(cells, d, d)``.
    """
    m = second_moment(ens, model)
    sym = 0.5 * (m + np.swapaxes(m, -1, -2))
    d = sym.shape[-1]
    return params.epsilon / params.weissenberg * (sym - np.eye(d))


def write_ensemble_csv(path, ens):
    """Snapshot with columns ``cell, replica, x0, x1[, x2]``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "replica"] + [f"x{i}" for i in range(ens.dim)])
        for c in range(ens.cells):
            for k in range(ens.replicas):
                w.writerow([c, k] + [format(v, ".17g") for v in ens.configs[c, k]])


def read_ensemble_csv(path, seed=0, step=0, strategy=BrownianStrategy.IID):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    dim = len(header) - 2
    cells = 1 + max(int(r[0]) for r in body)
    reps = 1 + max(int(r[1]) for r in body)
    configs = np.full((cells, reps, dim), np.nan)
    for r in body:
        configs[int(r[0]), int(r[1])] = [float(v) for v in r[2:]]
    return DumbbellEnsemble(configs, seed=seed, step=step, strategy=strategy)


__all__ = [
    "FlowParams",
    "ForceModel",
    "DumbbellEnsemble",
    "force",
    "potential",
    "drift",
    "em_step",
    "em_finish",
    "evolve_ensemble",
    "sample_equilibrium",
    "equilibrium_draw",
    "second_moment",
    "kramers_stress",
    "write_ensemble_csv",
    "read_ensemble_csv",
    "TAG_STEP",
]
