"""Flat ``key = value`` run configuration with per-subcommand schemas.

A config file holds one ``key = value`` pair per line; ``#`` starts a
comment.  Command-line flags override file values.  Unknown keys and
out-of-range values are rejected before anything runs.
"""

from dataclasses import dataclass, field

from .errors import ConfigError

CHOICES_BROWNIAN = ("constant", "iid", "alternating")


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | str | floats | ints | strs
    default: object = None
    check: object = None  # callable(value) -> error message or None
    help: str = ""
    choices: tuple = ()


def positive(v):
    return None if v > 0 else "must be positive"


def non_negative(v):
    return None if v >= 0 else "must be non-negative"


def open_unit(v):
    return None if 0 < v < 1 else "must lie in (0, 1)"


def all_positive(vs):
    return None if all(v > 0 for v in vs) else "entries must be positive"


def at_least(n):
    def check(v):
        return None if v >= n else f"must be at least {n}"

    return check


_FLOW = {
    "re": Key("float", 1.0, positive, "Reynolds number"),
    "we": Key("float", 1.0, positive, "Weissenberg number"),
    "eps": Key("float", 0.5, open_unit, "viscosity ratio epsilon in (0, 1)"),
}
_GRADIENT = {
    "kxx": Key("float", 0.0, None, "velocity gradient component"),
    "kxy": Key("float", 1.0, None, "velocity gradient component"),
    "kyx": Key("float", 0.0, None, "velocity gradient component"),
    "kyy": Key("float", 0.0, None, "velocity gradient component"),
}

SCHEMAS = {
    "shear": {
        **_FLOW,
        "re": Key("float", 0.1, positive, "Reynolds number"),
        "model": Key("str", "hookean", None, "dumbbell or conformation model",
                     ("hookean", "fene", "oldroyd-b", "fene-p")),
        "b": Key("float", None, positive, "FENE extensibility"),
        "dy": Key("float", 1.0 / 32, positive, "mesh size (must divide 1)"),
        "dt": Key("float", 1e-3, positive, "time step"),
        "k": Key("int", 1000, at_least(1), "dumbbells per cell"),
        "t_end": Key("float", 1.0, non_negative, "final time"),
        "brownian": Key("str", "iid", None, "spatial correlation of Brownian motions", CHOICES_BROWNIAN),
        "scheme": Key("str", "semi-implicit", None, "conformation update",
                      ("semi-implicit", "em-moment", "implicit")),
        "u_bottom": Key("float", 0.0, None, "velocity of the plate at y = 0"),
        "u_top": Key("float", 1.0, None, "velocity of the plate at y = 1"),
        "record_every": Key("int", 100, at_least(1), "steps between recorded outputs"),
        "q_cap": Key("float", None, positive, "optional cap on |Q| in standard deviations"),
    },
    "homogeneous": {
        **_FLOW,
        **_GRADIENT,
        "model": Key("str", "oldroyd-b", None, "constitutive model", ("oldroyd-b", "fene-p", "corotational")),
        "b": Key("float", None, positive, "FENE-P extensibility"),
        "dt": Key("float", 1e-3, positive, "time step"),
        "t_end": Key("float", 5.0, non_negative, "final time"),
        "a0": Key("floats", None, None, "initial A as xx,xy,yy (default equilibrium)"),
        "scheme": Key("str", "semi-implicit", None, "conformation update", ("semi-implicit", "em-moment")),
        "record_every": Key("int", 1, at_least(1), "steps between recorded outputs"),
    },
    "fokker-planck": {
        **_GRADIENT,
        "kxy": Key("float", 0.0, None, "velocity gradient component"),
        "model": Key("str", "hookean", None, "spring law", ("hookean", "fene")),
        "b": Key("float", None, positive, "FENE extensibility"),
        "we": Key("float", 1.0, positive, "Weissenberg number"),
        "n": Key("int", 200, at_least(8), "grid cells per direction"),
        "dt": Key("float", None, positive, "time step (default: stability limit)"),
        "t_end": Key("float", 2.0, non_negative, "final time"),
        "init_mean": Key("floats", (1.0, 0.0), None, "initial Gaussian mean x,y"),
        "init_var": Key("float", 0.5, positive, "initial Gaussian variance"),
        "every": Key("int", 10, at_least(1), "steps between recorded outputs"),
    },
    "pgd": {
        "nx": Key("int", 128, at_least(2), "interior nodes in x"),
        "ny": Key("int", 128, at_least(2), "interior nodes in y"),
        "rhs": Key("str", "separable", None, "right-hand side", ("separable", "constant", "smooth", "file")),
        "rhs_file": Key("str", None, None, "CSV grid (nx rows, ny columns) for rhs = file"),
        "tol": Key("float", 1e-8, positive, "H^-1 residual tolerance"),
        "max_terms": Key("int", 100, at_least(1), "maximum number of rank-one terms"),
        "als_tol": Key("float", 1e-10, positive, "alternating-solve tolerance"),
        "als_max": Key("int", 500, at_least(1), "maximum alternating sweeps"),
    },
    "rb-offline": {
        "b": Key("float", 9.0, positive, "FENE extensibility"),
        "we": Key("float", 1.0, positive, "Weissenberg number"),
        "dt": Key("float", 1e-2, positive, "time step"),
        "t_end": Key("float", 1.0, positive, "time at which the stress is estimated"),
        "n_trial": Key("int", 100, at_least(1), "size of the trial set"),
        "n_basis": Key("int", 20, at_least(1), "reduced basis size"),
        "m_large": Key("int", 10000, at_least(2), "offline sample count"),
        "m_train": Key("int", None, at_least(2), "training samples per trial gradient (default m_large/100)"),
        "shear_range": Key("floats", (0.5, 1.5), None, "range of the shear component"),
        "offdiag_range": Key("float", 0.2, non_negative, "half-width of the other components"),
        "lambda_seed": Key("int", 1, non_negative, "seed of the trial-set draw"),
    },
    "rb-online": {
        **_GRADIENT,
        "basis": Key("str", None, None, "basis manifest written by rb-offline"),
        "m_small": Key("int", None, at_least(2), "online sample count (default m_large/100)"),
        "n_lambda": Key("int", 0, non_negative, "random test gradients (0: use kxx..kyy)"),
        "shear_range": Key("floats", (0.5, 1.5), None, "range of the shear component"),
        "offdiag_range": Key("float", 0.2, non_negative, "half-width of the other components"),
        "lambda_seed": Key("int", 2, non_negative, "seed of the test-set draw"),
    },
    "variance-study": {
        **_FLOW,
        "re": Key("float", 0.1, positive, "Reynolds number"),
        "eps": Key("float", 0.9, open_unit, "viscosity ratio epsilon in (0, 1)"),
        "dy": Key("float", 1.0 / 16, positive, "mesh size"),
        "dt": Key("float", 1e-2, positive, "time step"),
        "k": Key("int", 100, at_least(1), "dumbbells per cell"),
        "t_end": Key("float", 2.0, positive, "final time"),
        "repeats": Key("int", 200, at_least(2), "replications per strategy"),
        "strategies": Key("strs", CHOICES_BROWNIAN, None, "strategies to compare", CHOICES_BROWNIAN),
        "u_top": Key("float", 1.0, None, "velocity of the plate at y = 1"),
    },
    "convergence-study": {
        **_FLOW,
        "re": Key("float", 1.0, positive, "Reynolds number"),
        "u_top": Key("float", 1.0, None, "velocity of the plate at y = 1"),
        "t_end": Key("float", 0.5, positive, "time at which errors are measured"),
        "dt": Key("float", 1e-2, positive, "time step for the dy and K sweeps"),
        "dy": Key("float", 1.0 / 8, positive, "mesh size for the dt and K sweeps"),
        "dts": Key("floats", (0.05, 0.025, 0.0125, 0.00625), all_positive, "time steps to sweep"),
        "dys": Key("floats", (0.25, 0.125, 0.0625, 0.03125), all_positive, "mesh sizes to sweep"),
        "ks": Key("ints", (100, 400, 1600, 6400), all_positive, "dumbbell counts to sweep"),
        "repeats": Key("int", 64, at_least(2), "replications per K"),
    },
}

#: keys accepted by every subcommand
GLOBAL_KEYS = {
    "seed": Key("int", 0, non_negative, "random seed"),
    "threads": Key("int", 1, at_least(1), "worker threads (results do not depend on it)"),
    "out": Key("str", "out", None, "output directory"),
}


def schema(subcommand):
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    return {**SCHEMAS[subcommand], **GLOBAL_KEYS}


def _convert(key, spec, raw, where):
    text = str(raw).strip()
    try:
        if spec.kind == "float":
            value = float(text)
        elif spec.kind == "int":
            value = int(text)
        elif spec.kind == "floats":
            value = tuple(float(v) for v in text.split(",") if v.strip())
        elif spec.kind == "ints":
            value = tuple(int(v) for v in text.split(",") if v.strip())
        elif spec.kind == "strs":
            value = tuple(v.strip() for v in text.split(",") if v.strip())
        else:
            value = text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {key} = {text!r} as {spec.kind}") from None
    if spec.choices:
        bad = [v for v in (value if isinstance(value, tuple) else (value,)) if v not in spec.choices]
        if bad:
            raise ConfigError(f"{where}: {key} = {text!r} is not one of {', '.join(spec.choices)}")
    if spec.check is not None:
        msg = spec.check(value)
        if msg:
            raise ConfigError(f"{where}: {key} = {text} {msg}{_range_hint(key)}")
    return value


def _range_hint(key):
    return " (epsilon in (0, 1))" if key == "eps" else ""


def read_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines into a dict of raw strings with line numbers."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        key = key.replace("-", "_")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, f"{source}:{lineno}")
    return out


def canonical(value):
    """Text form used in manifests; parsing it gives back the same value."""
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(canonical(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    subcommand: str
    values: dict = field(default_factory=dict)

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def threads(self):
        return self.values["threads"]

    @property
    def out(self):
        return self.values["out"]

    def __getitem__(self, key):
        return self.values[key]

    def echo(self):
        """Flat ``key = value`` echo, sorted by key."""
        return {k: canonical(v) for k, v in sorted(self.values.items()) if v is not None}

    def echo_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.echo().items())


def parse_config(subcommand, text=None, overrides=None, source="<config>"):
    """Build a validated :class:`RunConfig`.

    ``text`` is the content of a config file (or ``None``); ``overrides``
    maps keys to raw flag values and wins over the file.
    """
    keys = schema(subcommand)
    raw = read_config_text(text, source) if text else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key.replace("-", "_")] = (value, f"--{key.replace('_', '-')}")
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        where = raw[unknown[0]][1]
        raise ConfigError(f"{where}: unknown key {unknown[0]!r} for {subcommand}")
    values = {}
    for key, spec in keys.items():
        if key in raw:
            text_value, where = raw[key]
            values[key] = None if str(text_value).strip() == "" else _convert(key, spec, text_value, where)
        else:
            values[key] = spec.default
    return RunConfig(subcommand, values)
