"""Exception hierarchy shared by the library and the CLI."""


class MolcapError(Exception):
    """Base class for every error raised by molcap."""


class DomainError(MolcapError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ModelError(MolcapError):
    """A model object violates its structural assumptions (e.g. f(s) < s)."""


class PreconditionError(MolcapError):
    """An operation was called outside the regime it is defined for."""


class InfeasibleReleaseError(MolcapError):
    """A release amount exceeds the molecules available in storage."""


class ConvergenceError(MolcapError):
    """An iterative solver stopped before meeting its tolerance.

    ``last_gap`` carries the last certificate value so callers can report it.
    """

    def __init__(self, message: str, last_gap: float | None = None):
        super().__init__(message)
        self.last_gap = last_gap


class NonErgodicError(ConvergenceError):
    """A policy-driven Markov chain did not settle to a stationary law."""


class CertificateError(MolcapError):
    """A domination certificate is unusable (negative taps or mass above one)."""


class ConstructionError(MolcapError):
    """A codebook cannot be made feasible for the given transmitter."""


class NonConcaveError(PreconditionError):
    """The production function is not concave."""


class InfeasibleInputError(PreconditionError):
    """The input release sequence violates the storage constraint."""


class ExcessMassError(PreconditionError):
    """A precoding filter has total mass above one."""
