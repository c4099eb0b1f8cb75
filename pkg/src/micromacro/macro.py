"""Conformation-tensor models: Oldroyd-B, FENE-P and the corotational variant.

Tensors are numpy arrays of shape ``(..., d, d)``.  The conformation tensor
``A`` relates to the polymer stress by ``A = (We/eps) tau + I``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, IntegratorFailure

MODELS = ("oldroyd-b", "fene-p", "corotational")
EIG_FLOOR = 1e-14
MAX_HALVINGS = 20


def sym_part(kappa):
    kappa = np.asarray(kappa, dtype=float)
    return 0.5 * (kappa + np.swapaxes(kappa, -1, -2))


def skew_part(kappa):
    kappa = np.asarray(kappa, dtype=float)
    return 0.5 * (kappa - np.swapaxes(kappa, -1, -2))


def commutator(kappa):
    """``[kappa, kappa^T] = kappa kappa^T - kappa^T kappa``."""
    kappa = np.asarray(kappa, dtype=float)
    kt = np.swapaxes(kappa, -1, -2)
    return kappa @ kt - kt @ kappa


def shear_gradient(rate, dim=2):
    """Velocity gradient of simple shear ``u = (rate * y, 0)``."""
    k = np.zeros(np.shape(rate) + (dim, dim))
    k[..., 0, 1] = rate
    return k


def check_conformation(a, b=None):
    """Raise :class:`DomainError` unless ``a`` is SPD (and ``tr a < b``)."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DomainError("non-finite conformation tensor")
    if np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(a))):
        raise DomainError("conformation tensor is not symmetric")
    if np.min(np.linalg.eigvalsh(a)) <= 0.0:
        raise DomainError("conformation tensor is not positive definite")
    if b is not None and np.max(np.trace(a, axis1=-2, axis2=-1)) >= b:
        raise DomainError(f"FENE-P closure requires tr A < b = {b}")
    return a


def _upper_convected(a, kappa):
    c = np.asarray(kappa) @ a
    return c + np.swapaxes(c, -1, -2)


def oldroyd_b_rhs(a, kappa, we):
    """``kappa A + A kappa^T - (A - I)/We``."""
    a = np.asarray(a, dtype=float)
    return _upper_convected(a, kappa) - (a - np.eye(a.shape[-1])) / we


def fene_p_rhs(a, kappa, we, b):
    """``kappa A + A kappa^T - A/(We (1 - tr A/b)) + I/We``."""
    a = np.asarray(a, dtype=float)
    tr = np.trace(a, axis1=-2, axis2=-1)[..., None, None]
    if np.any(tr >= b):
        raise DomainError(f"FENE-P closure requires tr A < b = {b}")
    return _upper_convected(a, kappa) - a / (we * (1.0 - tr / b)) + np.eye(a.shape[-1]) / we


def corotational_rhs(a, kappa, we):
    """Corotational derivative version: ``W A + A W^T - (A - I)/We``."""
    return oldroyd_b_rhs(a, skew_part(kappa), we)


def stress_from_conformation(a, eps, we):
    a = np.asarray(a, dtype=float)
    return eps / we * (a - np.eye(a.shape[-1]))


def conformation_from_stress(tau, eps, we):
    tau = np.asarray(tau, dtype=float)
    return we / eps * tau + np.eye(tau.shape[-1])


def fene_p_stress(a, eps, we, b):
    a = np.asarray(a, dtype=float)
    tr = np.trace(a, axis1=-2, axis2=-1)[..., None, None]
    return eps / we * (a / (1.0 - tr / b) - np.eye(a.shape[-1]))


def _fene_p_trace_solve(beta, c, b, d):
    """Root ``s`` in (0, b) of ``s (1 + c/(1 - s/b)) = beta`` (Newton, bracketed)."""
    beta = np.asarray(beta, dtype=float)
    lo = np.zeros_like(beta)
    hi = np.full_like(beta, b)
    s = np.minimum(beta, 0.5 * b)
    for _ in range(200):
        g = 1.0 - s / b
        val = s + c * s / g - beta
        lo = np.where(val < 0, s, lo)
        hi = np.where(val > 0, s, hi)
        dval = 1.0 + c / (g * g)
        new = s - val / dval
        outside = (new <= lo) | (new >= hi)
        new = np.where(outside, 0.5 * (lo + hi), new)
        if np.all(np.abs(new - s) <= 1e-15 * np.maximum(1.0, np.abs(s))):
            return new
        s = new
    return s


def _raw_step(a, kappa, we, dt, model, b, scheme):
    d = a.shape[-1]
    eye = np.eye(d)
    if scheme == "em-moment":
        if model != "oldroyd-b":
            raise ConfigError("the em-moment scheme is defined for Oldroyd-B only")
        m = eye + dt * (np.asarray(kappa) - eye / (2.0 * we))
        new = m @ a @ np.swapaxes(m, -1, -2)
        new = 0.5 * (new + np.swapaxes(new, -1, -2))
        return new + dt / we * eye
    c = dt / we
    k = skew_part(kappa) if model == "corotational" else kappa
    rhs = a + dt * _upper_convected(a, k) + c * eye
    if model == "fene-p":
        beta = np.trace(rhs, axis1=-2, axis2=-1)
        s = _fene_p_trace_solve(beta, c, b, d)
        factor = 1.0 + c / (1.0 - s / b)
        return rhs / factor[..., None, None]
    return rhs / (1.0 + c)


def _admissible(a, b):
    if not np.all(np.isfinite(a)):
        return False
    if np.min(np.linalg.eigvalsh(a)) <= 0.0:
        return False
    return b is None or np.max(np.trace(a, axis1=-2, axis2=-1)) < b


def step_conformation(a, kappa, we, dt, model="oldroyd-b", b=None, scheme="semi-implicit"):
    """Advance ``A`` by ``dt`` with explicit convection and implicit relaxation.

    Works on batches.  If the result is not SPD the step is retried as
    ``2**k`` substeps, ``k <= 20``.
    """
    if model not in MODELS:
        raise ConfigError(f"unknown macroscopic model {model!r}")
    if model == "fene-p" and (b is None or b <= 0):
        raise ConfigError("FENE-P requires b > 0")
    bound = b if model == "fene-p" else None
    a = np.asarray(a, dtype=float)
    for halving in range(MAX_HALVINGS + 1):
        n_sub = 2**halving
        h = dt / n_sub
        cur = a
        ok = True
        for _ in range(n_sub):
            cur = _raw_step(cur, kappa, we, h, model, b, scheme)
            if not _admissible(cur, bound):
                ok = False
                break
        if ok:
            return cur
    raise IntegratorFailure(f"conformation lost positive definiteness after {MAX_HALVINGS} halvings")


@dataclass
class Trajectory:
    times: np.ndarray
    conformations: np.ndarray  # (n_times, ..., d, d)

    def __len__(self):
        return len(self.times)


def integrate_homogeneous(model, kappa_of_t, params, t_end, a0=None, b=None, dim=2,
                          scheme="semi-implicit", record_every=1):
    """Integrate the homogeneous constitutive ODE from ``a0`` up to ``t_end``.

    ``kappa_of_t`` is a constant tensor or a callable ``t -> kappa``; the
    gradient is sampled at the end of each step.  ``params`` supplies ``dt``
    and ``We``.
    """
    we, dt = params.weissenberg, params.dt
    if dt >= we:
        raise ConfigError(f"dt must be smaller than We to resolve relaxation (dt={dt}, We={we})")
    a = np.eye(dim) if a0 is None else np.array(a0, dtype=float)
    check_conformation(a, b if model == "fene-p" else None)
    kappa_fn = kappa_of_t if callable(kappa_of_t) else (lambda t, k=np.asarray(kappa_of_t, float): k)
    n_steps = int(round(t_end / dt))
    times, states = [0.0], [a.copy()]
    for n in range(1, n_steps + 1):
        t = n * dt
        a = step_conformation(a, kappa_fn(t), we, dt, model, b, scheme)
        if n % record_every == 0 or n == n_steps:
            times.append(t)
            states.append(a.copy())
    return Trajectory(np.array(times), np.array(states))


def steady_shear_oldroyd_b(we, rate):
    """Analytic steady Oldroyd-B conformation in simple shear (2D)."""
    wg = we * rate
    return np.array([[1.0 + 2.0 * wg * wg, wg], [wg, 1.0]])


def fene_p_equilibrium(b, dim=2):
    return b / (b + dim) * np.eye(dim)


@dataclass(frozen=True)
class FreeEnergyRecord:
    kinetic: float
    entropic: float
    total: float
    dissipation: float
    viscous_dissipation: float = 0.0


def _field(a_field, measures):
    a = np.asarray(a_field, dtype=float)
    if a.ndim == 2:
        a = a[None]
    m = np.ones(a.shape[0]) if measures is None else np.broadcast_to(np.asarray(measures, float), a.shape[:1])
    return a, m


def _eig(a):
    w, v = np.linalg.eigh(0.5 * (a + np.swapaxes(a, -1, -2)))
    if np.any(w <= 0.0):
        raise DomainError("free energy requires symmetric positive definite conformations")
    return np.maximum(w, EIG_FLOOR), v


def log_spd(a):
    """Matrix logarithm of SPD tensors via symmetric eigendecomposition."""
    w, v = _eig(np.asarray(a, dtype=float))
    return (v * np.log(w)[..., None, :]) @ np.swapaxes(v, -1, -2)


def oldroyd_b_free_energy(a_field, params, measures=None, u_l2_sq=0.0, grad_u_l2_sq=0.0):
    """Free energy ``(Re/2)|u|^2 + (eps/2We) sum m tr(A - ln A - I)`` and its dissipation."""
    a, m = _field(a_field, measures)
    w, _ = _eig(a)
    eps, we = params.epsilon, params.weissenberg
    entropic = eps / (2 * we) * float(np.sum(m * np.sum(w - np.log(w) - 1.0, axis=-1)))
    dissipation = eps / (2 * we * we) * float(np.sum(m * np.sum(w + 1.0 / w - 2.0, axis=-1)))
    kinetic = 0.5 * params.reynolds * float(u_l2_sq)
    return FreeEnergyRecord(kinetic, entropic, kinetic + entropic, dissipation,
                            (1.0 - eps) * float(grad_u_l2_sq))


def fene_p_free_energy(a_field, params, b, measures=None, u_l2_sq=0.0, grad_u_l2_sq=0.0):
    """FENE-P free energy, shifted so that it vanishes at ``A = b/(b+d) I``."""
    a, m = _field(a_field, measures)
    d = a.shape[-1]
    w, _ = _eig(a)
    tr = np.sum(w, axis=-1)
    if np.any(tr >= b):
        raise DomainError(f"FENE-P closure requires tr A < b = {b}")
    g = 1.0 - tr / b
    eps, we = params.epsilon, params.weissenberg
    density = -np.sum(np.log(w), axis=-1) - b * np.log(g) + (b + d) * np.log(b / (b + d))
    bracket = tr / (g * g) - 2.0 * d / g + np.sum(1.0 / w, axis=-1)
    entropic = eps / (2 * we) * float(np.sum(m * density))
    dissipation = eps / (2 * we * we) * float(np.sum(m * bracket))
    kinetic = 0.5 * params.reynolds * float(u_l2_sq)
    return FreeEnergyRecord(kinetic, entropic, kinetic + entropic, dissipation,
                            (1.0 - eps) * float(grad_u_l2_sq))


def energy_functional(a_field, params, measures=None, u_l2_sq=0.0):
    """The non-dissipative energy ``(Re/2)|u|^2 + (eps/2We) sum m tr A``."""
    a, m = _field(a_field, measures)
    if a.shape[0] == 0:
        return 0.5 * params.reynolds * float(u_l2_sq)
    tr = np.trace(a, axis1=-2, axis2=-1)
    return 0.5 * params.reynolds * float(u_l2_sq) + params.epsilon / (2 * params.weissenberg) * float(np.sum(m * tr))


def free_energy(model, a_field, params, b=None, measures=None, u_l2_sq=0.0, grad_u_l2_sq=0.0):
    if model == "fene-p":
        return fene_p_free_energy(a_field, params, b, measures, u_l2_sq, grad_u_l2_sq)
    return oldroyd_b_free_energy(a_field, params, measures, u_l2_sq, grad_u_l2_sq)
