"""Exception types shared across the package."""


class PsmpmError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateTriangle(PsmpmError):
    """Triangle area is below the degeneracy tolerance."""


class MeshDegenerate(PsmpmError):
    """A mesh violates the triangulation invariants."""


class RefinementFailed(PsmpmError):
    """A split point of the six-way refinement fell outside its edge."""


class CollinearPoints(PsmpmError):
    """A point set required to span 2D is (numerically) collinear."""


class SingularControlTriangle(PsmpmError):
    """Control-triangle system is singular; triplets cannot be computed."""


class InteriorVertexConstrained(PsmpmError):
    """A Dirichlet constraint was placed on a non-boundary vertex."""


class UnsupportedBoundaryTangent(PsmpmError):
    """Only axis-aligned boundary tangents are supported."""


class OutsideDomain(PsmpmError):
    """Evaluation point lies outside the mesh."""


class ParticleOutsideMesh(PsmpmError):
    """Initial particle layout produced points outside the mesh."""


class SolverDiverged(PsmpmError):
    """Iterative linear solve stalled (typically an ill-conditioned mass matrix)."""


class NonPositiveJacobian(PsmpmError):
    """Deformation gradient determinant dropped to zero or below."""


class ParticleLeftDomain(PsmpmError):
    """A particle position update moved it off the mesh."""


class MismatchedSeries(PsmpmError):
    """Trajectory arrays disagree in particle or time-step count."""


class ParseError(PsmpmError):
    """Config or mesh file could not be parsed. Carries a line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(PsmpmError):
    """A parsed value is out of range or a key is unknown."""
