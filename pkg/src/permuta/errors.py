"""Exception types shared across the package."""


class PermutaError(Exception):
    """Base class for all package-specific errors."""


class TorusTooSmall(PermutaError):
    """Torus side does not exceed twice the extent of some base-permutation range."""


class InvalidFamily(PermutaError):
    """Rate family is malformed or fails a validation gate required by an engine."""


class NotRangeClosed(PermutaError):
    """Operation requires range closure and the family does not satisfy it."""


class NoCover(PermutaError):
    """No cyclic permutation of the range satisfies the requested word condition.

    Raised by the sigma selection rules.  Under the documented preconditions this
    can only happen on the a == b mixed-word boundary, where no cyclic cover exists.
    """


class NotSymmetric(PermutaError):
    """Duality operation requires q(sigma) = q(sigma inverse) and the family fails it."""


class BadInitial(PermutaError):
    """Initial state does not have the structure required by the operation."""


class TooLarge(PermutaError):
    """State space exceeds the supported size for exact computation."""


class SectorReducible(PermutaError):
    """Particle-number sector is not irreducible, so its stationary law is not unique."""


class PropertyViolation(PermutaError):
    """A runtime invariant that must never fail did fail (reported, never silenced)."""
