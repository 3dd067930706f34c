"""Exception hierarchy shared across the package."""


class EitCsError(Exception):
    """Base class for all package-specific failures."""


class MeshError(EitCsError):
    """Invalid mesh input or infeasible mesh geometry."""


class ProtocolError(EitCsError):
    """Invalid injection/measurement pattern specification."""


class InputError(EitCsError):
    """Caller-supplied data violates a documented precondition."""


class NumericalError(EitCsError):
    """A linear solve or iteration failed numerically."""


class SolverBlowupError(NumericalError):
    """Nonfinite objective during the proximal-gradient iteration.

    Carries the partial trajectory in ``report`` for post-mortem use.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class MaskError(EitCsError):
    """Support mask inconsistent with the mesh or malformed on disk."""


class DataFormatError(EitCsError):
    """Array, manifest, or config file cannot be parsed."""
