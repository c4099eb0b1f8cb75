"""Exception hierarchy.

Configuration problems map to CLI exit code 2, numerical failures to 3.
"""


class MicroMacroError(Exception):
    """Base class for all package errors."""


class ConfigError(MicroMacroError, ValueError):
    """Invalid parameters, unknown keys or violated preconditions."""


class OutOfRegimeError(ConfigError):
    """An operation was called outside the parameter regime it is valid for."""


class NumericalError(MicroMacroError, ArithmeticError):
    """A solver could not produce an admissible result."""


class DomainError(NumericalError, ValueError):
    """A state left the domain of definition (FENE ball, SPD cone, closure)."""


class StepFailure(NumericalError):
    """A stochastic step could not be accepted within the retry budget."""


class IntegratorFailure(NumericalError):
    """Timestep halving did not restore positive definiteness."""


class NoStationaryState(NumericalError):
    """The requested dynamics admit no normalizable stationary density."""


class SupportViolation(NumericalError):
    """A density has mass where the reference density vanishes."""


class DegenerateControl(NumericalError):
    """A control variate has zero empirical variance."""
