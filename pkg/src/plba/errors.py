"""Exception types raised across the package."""


class PLBAError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PLBAError, ValueError):
    pass


class BehindCameraError(PLBAError, ValueError):
    """A point lies at or behind the camera's minimum depth."""


class InvalidDepthError(PLBAError, ValueError):
    pass


class DegenerateLineError(PLBAError, ValueError):
    pass


class InvalidNoiseModelError(PLBAError, ValueError):
    pass


class EmptyProblemError(PLBAError, ValueError):
    pass


class GraphValidationError(PLBAError, ValueError):
    pass


class GaugeDeficiencyError(PLBAError):
    """The reduced pose system is singular.

    ``variables`` names the free keyframes that participate in the null space.
    """

    def __init__(self, message, variables=()):
        super().__init__(message)
        self.variables = list(variables)


class SingularLandmarkError(PLBAError):
    def __init__(self, message, landmarks=()):
        super().__init__(message)
        self.landmarks = list(landmarks)


class UnderconstrainedPoseError(GaugeDeficiencyError):
    """Reduced information matrix is not positive definite."""

    def __init__(self, message, variables=(), null_directions=None):
        super().__init__(message, variables)
        self.null_directions = null_directions


class CertificateInapplicableError(PLBAError):
    pass


class GenerationError(PLBAError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AlignmentDegenerateError(PLBAError, ValueError):
    pass


class TrajectoryParseError(PLBAError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ProblemFormatError(PLBAError, ValueError):
    pass
