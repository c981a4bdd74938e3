"""Exception types shared across the package."""


class NonPositiveDepth(ValueError):
    """Point at or behind the camera plane (Z <= eps_z)."""


class NonPositiveInverseDepth(ValueError):
    """Inverse depth d <= 0 where a valid depth is required."""


class OutOfBounds(ValueError):
    """Continuous sample location outside the grid."""


class NegativeWeight(ValueError):
    """Edge weights must be >= 0."""


class NotPositiveDefinite(ArithmeticError):
    """Sparse system factorization failed; the matrix is not SPD."""


class FactorizationFailure(ArithmeticError):
    """Dense 6x6 factorization failed."""


class NonConvexWeights(ValueError):
    """Upsampling weights must be non-negative and sum to one."""


class DegenerateScene(RuntimeError):
    """Scene sampling could not place all objects with enough support."""


class EmptyMask(ValueError):
    """A metric was requested over an empty pixel set."""
