"""Command-line entry point: ``micromacro <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version

import numpy as np

from . import fokker_planck as fp
from . import macro, pgd, shear, variance
from .config import SCHEMAS, GLOBAL_KEYS, parse_config
from .dumbbell import FlowParams, ForceModel
from .errors import ConfigError, NumericalError
from .io import OutputError, RunManifest, Table, emit_results

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _gradient(cfg):
    return np.array([[cfg["kxx"], cfg["kxy"]], [cfg["kyx"], cfg["kyy"]]])


def _flow(cfg, dt):
    return FlowParams(reynolds=cfg.values.get("re", 1.0), weissenberg=cfg["we"],
                      epsilon=cfg.values.get("eps", 0.5), dt=dt)


def _random_gradients(n, shear_range, half_width, seed):
    """Traceless shear-dominated gradients ``[[a, g], [c, -a]]``."""
    if len(shear_range) != 2 or shear_range[0] > shear_range[1]:
        raise ConfigError("shear_range must be 'low,high' with low <= high")
    rng = np.random.default_rng(seed)
    a = rng.uniform(-half_width, half_width, n)
    g = rng.uniform(shear_range[0], shear_range[1], n)
    c = rng.uniform(-half_width, half_width, n)
    return np.stack([np.stack([a, g], -1), np.stack([c, -a], -1)], -2)


# -- runners: each returns (tables, extra files written to the output dir) --


def run_shear_cmd(cfg):
    scheme_cfg = shear.SchemeConfig(
        params=_flow(cfg, cfg["dt"]),
        dy=cfg["dy"],
        replicas=cfg["k"],
        model=cfg["model"],
        b=cfg["b"],
        brownian=cfg["brownian"],
        seed=cfg.seed,
        boundary=(cfg["u_bottom"], cfg["u_top"]),
        macro_scheme=cfg["scheme"],
        q_cap=cfg["q_cap"],
    )
    run = shear.run_shear(scheme_cfg, cfg["t_end"], record_every=cfg["record_every"])
    velocity = Table("velocity", ["t", "y", "u"])
    stress = Table("stress", ["t", "cell", "tau", "tau_stderr"])
    energy = Table("free_energy", ["t", "kinetic", "entropic", "total", "dissipation"])
    for i, t in enumerate(run.times):
        for y, u in zip(run.y, run.u[i]):
            velocity.add(t, y, u)
        for c, tau in enumerate(run.tau[i]):
            err = run.tau_stderr[i, c] if run.tau_stderr is not None else ""
            stress.add(t, c, tau, err)
        rec = run.free_energy[i]
        if rec is not None:
            energy.add(t, rec.kinetic, rec.entropic, rec.total, rec.dissipation)
    return [velocity, stress, energy], []


def run_homogeneous_cmd(cfg):
    model = cfg["model"]
    if model == "fene-p" and cfg["b"] is None:
        raise ConfigError("model fene-p requires --b")
    params = _flow(cfg, cfg["dt"])
    a0 = None
    if cfg["a0"] is not None:
        if len(cfg["a0"]) != 3:
            raise ConfigError("a0 must be 'xx,xy,yy'")
        xx, xy, yy = cfg["a0"]
        a0 = np.array([[xx, xy], [xy, yy]])
    elif model == "fene-p":
        a0 = macro.fene_p_equilibrium(cfg["b"])
    traj = macro.integrate_homogeneous(model, _gradient(cfg), params, cfg["t_end"], a0=a0, b=cfg["b"],
                                       scheme=cfg["scheme"], record_every=cfg["record_every"])
    table = Table("trajectory", ["t", "A_xx", "A_xy", "A_yy", "free_energy", "dissipation"])
    fe_model = "fene-p" if model == "fene-p" else "oldroyd-b"
    for t, a in zip(traj.times, traj.conformations):
        rec = macro.free_energy(fe_model, a, params, cfg["b"])
        table.add(t, a[0, 0], a[0, 1], a[1, 1], rec.entropic, rec.dissipation)
    return [table], []


def run_fokker_planck_cmd(cfg):
    model = ForceModel.fene(cfg["b"]) if cfg["model"] == "fene" else ForceModel.hookean()
    if cfg["model"] == "fene" and cfg["b"] is None:
        raise ConfigError("model fene requires --b")
    kappa, we = _gradient(cfg), cfg["we"]
    grid = fp.make_grid(model, cfg["n"], kappa, we)
    op = fp.FokkerPlanckOperator(grid, model, kappa, we)
    psi_inf = fp.stationary_density(model, kappa, we, grid=grid)
    if len(cfg["init_mean"]) != 2:
        raise ConfigError("init_mean must be 'x,y'")
    psi0 = fp.gaussian_density(grid, cfg["init_mean"], cfg["init_var"] * np.eye(2))
    if model.is_fene:
        psi0 = fp.DensityGrid(grid, np.where(grid.mask, psi0.values, 0.0)).normalized()
    dt = cfg["dt"] if cfg["dt"] is not None else 0.9 * op.max_dt
    _, rows = fp.relax(psi0, op, dt, cfg["t_end"], psi_inf, every=cfg["every"])
    entropy = Table("entropy", ["t", "relative_entropy", "fisher_information", "l1_distance", "ck_bound"])
    for t, h, fisher, l1 in rows:
        entropy.add(t, h, fisher, l1, np.sqrt(2.0 * max(h, 0.0)))
    summary = Table("stationary", ["quantity", "value"])
    summary.add("E_XX", psi_inf.moment(lambda p: p[..., 0] ** 2))
    summary.add("E_XY", psi_inf.moment(lambda p: p[..., 0] * p[..., 1]))
    summary.add("E_YY", psi_inf.moment(lambda p: p[..., 1] ** 2))
    summary.add("dt", dt)
    return [entropy, summary], []


def _read_grid_csv(path, grid):
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read right-hand side {path}: {exc}") from exc
    if data.shape != (grid.nx, grid.ny):
        raise ConfigError(f"{path}: expected a {grid.nx} x {grid.ny} grid, got {data.shape}")
    return data


def run_pgd_cmd(cfg):
    grid = pgd.ProductGrid(cfg["nx"], cfg["ny"])
    kind = cfg["rhs"]
    if kind == "separable":
        f = pgd.separable_rhs(grid)
    elif kind == "constant":
        f = np.ones((grid.nx, grid.ny))
    elif kind == "smooth":
        f = grid.sample(lambda x, y: 1.0 / (1.0 + x + y))
    else:
        if not cfg["rhs_file"]:
            raise ConfigError("rhs = file requires rhs_file")
        f = _read_grid_csv(cfg["rhs_file"], grid)
    sol = pgd.pgd_solve(f, grid, cfg["tol"], cfg["max_terms"], cfg["als_tol"], cfg["als_max"])
    terms = Table("terms", ["term", "axis", "node", "coordinate", "value"])
    for k, (r, s) in enumerate(sol.terms, 1):
        for i, (x, v) in enumerate(zip(grid.x, r), 1):
            terms.add(k, "x", i, x, v)
        for j, (y, v) in enumerate(zip(grid.y, s), 1):
            terms.add(k, "y", j, y, v)
    history = Table("residual_history", ["iteration", "h_minus1_residual"])
    for n, value in enumerate(sol.residual_history):
        history.add(n, value)
    status = Table("status", ["key", "value"])
    status.add("converged", sol.converged)
    status.add("terms", len(sol.terms))
    status.add("flags", ";".join(sol.flags))
    return [terms, history, status], []


def _lambda_columns(lam):
    return [lam[0, 0], lam[0, 1], lam[1, 0], lam[1, 1]]


def run_rb_offline_cmd(cfg):
    model = ForceModel.fene(cfg["b"])
    params = FlowParams(weissenberg=cfg["we"], dt=cfg["dt"])
    trial = _random_gradients(cfg["n_trial"], cfg["shear_range"], cfg["offdiag_range"], cfg["lambda_seed"])
    basis = variance.rb_offline(trial, cfg["n_basis"], cfg["m_large"], model, params, cfg["t_end"],
                                m_train=cfg["m_train"], seed=cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    basis.save(os.path.join(cfg.out, "basis.json"))
    table = Table("trial", ["index", "kxx", "kxy", "kyx", "kyy", "selection_order", "greedy_variance"])
    order = {idx: n for n, idx in enumerate(basis.selected, 1)}
    for i, lam in enumerate(trial):
        n = order.get(i, "")
        gv = basis.greedy_variances[n - 1] if n != "" else ""
        table.add(i, *_lambda_columns(lam), n, gv)
    return [table], ["basis.json"]


def run_rb_online_cmd(cfg):
    if not cfg["basis"]:
        raise ConfigError("rb-online requires --basis (a manifest written by rb-offline)")
    try:
        basis = variance.RbBasis.load(cfg["basis"])
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read basis manifest {cfg['basis']}: {exc}") from exc
    if cfg["n_lambda"] > 0:
        lams = _random_gradients(cfg["n_lambda"], cfg["shear_range"], cfg["offdiag_range"], cfg["lambda_seed"])
    else:
        lams = _gradient(cfg)[None]
    table = Table("estimates", ["index", "kxx", "kxy", "kyx", "kyy", "estimate", "variance", "half_width",
                                "plain_estimate", "plain_variance", "reduction", "ridge"])
    for i, lam in enumerate(lams):
        res = variance.rb_online(lam, basis, cfg["m_small"], block=variance.BLOCK_ONLINE + cfg.seed + i)
        table.add(i, *_lambda_columns(lam), res.estimate, res.variance, float(res.report.half_width),
                  res.plain_mean, res.plain_variance, res.reduction, res.ridge)
    return [table], []


def run_variance_study_cmd(cfg):
    scheme_cfg = shear.SchemeConfig(params=_flow(cfg, cfg["dt"]), dy=cfg["dy"], replicas=cfg["k"],
                                    model="hookean", seed=cfg.seed, boundary=(0.0, cfg["u_top"]))
    res = variance.variance_comparison_study(scheme_cfg, cfg["strategies"], cfg["repeats"], cfg["t_end"],
                                             threads=cfg.threads)
    table = Table("variance", ["strategy", "quantity", "cell", "mean", "variance", "half_width", "samples"])
    for strategy, sv in res.items():
        table.add(strategy.value, "u_mid", "", float(sv.u.mean), float(sv.u.variance),
                  float(sv.u.half_width), sv.u.samples)
        for c in range(len(sv.tau.mean)):
            table.add(strategy.value, "tau", c, sv.tau.mean[c], sv.tau.variance[c], sv.tau.half_width[c],
                      sv.tau.samples)
    ratios = Table("ratios", ["numerator", "denominator", "quantity", "ratio", "low_95", "high_95"])
    names = list(res)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            for q, attr in (("u_mid", "u_samples"), ("tau", "tau_samples")):
                ratio, low, high = variance.bootstrap_ratio(getattr(res[a], attr), getattr(res[b], attr),
                                                            seed=cfg.seed)
                ratios.add(a.value, b.value, q, ratio, low, high)
    return [table, ratios], []


def run_convergence_study_cmd(cfg):
    base = shear.SchemeConfig(params=_flow(cfg, cfg["dt"]), dy=cfg["dy"], model="hookean", seed=cfg.seed,
                              boundary=(0.0, cfg["u_top"]))
    study = shear.convergence_study(base, cfg["dts"], cfg["dys"], cfg["ks"], cfg["t_end"], cfg["repeats"],
                                    threads=cfg.threads)
    rows = Table("convergence", ["parameter", "value", "error", "stderr"])
    for r in study.rows:
        rows.add(r.parameter, r.value, r.error, r.stderr)
    orders = Table("orders", ["parameter", "order"])
    for k, v in study.orders.items():
        orders.add(k, v)
    return [rows, orders], []


RUNNERS = {
    "shear": run_shear_cmd,
    "homogeneous": run_homogeneous_cmd,
    "fokker-planck": run_fokker_planck_cmd,
    "pgd": run_pgd_cmd,
    "rb-offline": run_rb_offline_cmd,
    "rb-online": run_rb_online_cmd,
    "variance-study": run_variance_study_cmd,
    "convergence-study": run_convergence_study_cmd,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    for key, spec in GLOBAL_KEYS.items():
        common.add_argument(f"--{key}", default=None, help=f"{spec.help} (default {spec.default})")
    common.add_argument("--config", default=None, help="flat key = value config file")
    parser = argparse.ArgumentParser(prog="micromacro", description="Micro-macro polymer flow solvers",
                                     parents=[common])
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, keys in SCHEMAS.items():
        p = sub.add_parser(name, parents=[common], help=f"run {name}")
        for key, spec in keys.items():
            extra = f" ({'|'.join(spec.choices)})" if spec.choices else ""
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           help=f"{spec.help}{extra}; default {spec.default}")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config") and v is not None}
    try:
        text = None
        if args.config:
            try:
                with open(args.config) as fh:
                    text = fh.read()
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        cfg = parse_config(args.subcommand, text, flags, source=args.config or "<config>")
        start = time.perf_counter()
        tables, extra = RUNNERS[args.subcommand](cfg)
        manifest = RunManifest(args.subcommand, cfg.echo(), _version(), time.perf_counter() - start, {})
        emit_results(tables, cfg.out, manifest, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OutputError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.subcommand}: wrote {cfg.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
