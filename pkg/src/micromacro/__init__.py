"""Micro-macro simulation of dilute polymer flows.

Stochastic dumbbell ensembles, conformation-tensor models, the configuration
Fokker-Planck equation, 1D shear flow coupling, variance reduction and a
greedy tensor-product Poisson solver.
"""

from importlib.metadata import PackageNotFoundError, version

from .dumbbell import DumbbellEnsemble, FlowParams, ForceModel
from .errors import ConfigError, MicroMacroError, NumericalError
from .rng import BrownianStrategy

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0+unknown"

__all__ = [
    "BrownianStrategy",
    "ConfigError",
    "DumbbellEnsemble",
    "FlowParams",
    "ForceModel",
    "MicroMacroError",
    "NumericalError",
    "__version__",
]
