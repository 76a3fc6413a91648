"""Exception types shared across the package."""


class ShelloptError(Exception):
    """Base class for all package errors."""


class MeshError(ShelloptError):
    """Invalid mesh topology or geometry (non-manifold edge, degenerate face, ...)."""


class ObjParseError(MeshError):
    """Malformed or unsupported Wavefront OBJ input."""


class DirichletError(MeshError):
    """Dirichlet vertex set violates the well-posedness requirements."""


class MaterialError(ShelloptError):
    """Thickness field outside its strictly feasible box/volume region."""


class BarrierDomainError(ShelloptError):
    """Barrier argument evaluated at or beyond a constraint boundary."""


class FactorizationError(ShelloptError):
    """SPD factorization failed.

    ``pivot`` is the 1-based index of the offending leading minor when the
    backend reports one, else None.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class SolverError(ShelloptError):
    """Linear or nonlinear solve broke down."""


class FollowerConvergenceError(SolverError):
    """Follower ascent failed to reach the gradient tolerance."""

    def __init__(self, message, sample_index=None):
        super().__init__(message)
        self.sample_index = sample_index


class ConfigError(ShelloptError):
    """Run configuration is malformed or violates a validation rule."""


class InputDataError(ShelloptError):
    """Input files (mesh, thickness table) are unreadable or inconsistent."""
