"""Exception hierarchy shared by all thinlayer modules."""


class ThinLayerError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class GeometryError(ThinLayerError):
    pass


class AdmissibilityError(GeometryError):
    """The pair (eps, alpha) cannot tile the layer with whole cells."""


class OutOfRangeError(AdmissibilityError):
    pass


class NonRepresentableError(AdmissibilityError):
    pass


class InvalidInclusionError(GeometryError):
    pass


class DisconnectedFluidError(GeometryError):
    pass


class EmptyFluidError(GeometryError):
    pass


# discrete / linear algebra
class GridMismatchError(ThinLayerError):
    pass


class DimensionMismatchError(ThinLayerError):
    pass


class NoConvergenceError(ThinLayerError):
    """Iterative solve stopped before reaching the tolerance.

    ``result`` carries the best iterate and the iteration report.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class IncompatibleRHSError(ThinLayerError):
    pass


# cell problems
class EmptyInclusionError(ThinLayerError):
    pass


class FormulaMismatchError(ThinLayerError):
    pass


class StructureViolationError(ThinLayerError):
    pass


class NonpositiveProfileError(ThinLayerError):
    pass


class DisconnectedSlabWarning(UserWarning):
    pass


# macro models
class SingularKError(ThinLayerError):
    pass


class NonphysicalNegativityError(ThinLayerError):
    pass


class CFLWarning(UserWarning):
    pass


# convergence harness
class InsufficientPointsError(ThinLayerError):
    pass


class NonpositiveValueError(ThinLayerError):
    pass


class SamplerRangeError(ThinLayerError):
    pass


# configuration
class ConfigParseError(ThinLayerError):
    pass


class ConfigValidationError(ThinLayerError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
