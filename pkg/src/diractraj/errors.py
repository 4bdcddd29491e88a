"""Exception types raised by the numerical routines."""


class DiracTrajError(Exception):
    """Base class for all package errors."""


class PoleSingularity(DiracTrajError):
    """An operation needing cot/csc of alpha was called too close to a pole."""


class NodeSingularity(DiracTrajError):
    """The density vanishes (|psi| <= eps_node) where a velocity is needed."""


class NodeCrossing(DiracTrajError):
    """Phase unwrapping hit a node of the wavefunction."""

    def __init__(self, message, segment=None):
        super().__init__(message)
        self.segment = segment


class SecantSingularity(DiracTrajError):
    """Closed-form plane-wave path requested where cos(phi_plus) = 0."""


class ResolutionError(DiracTrajError):
    """Spectral content leaks into the Nyquist band of the grid."""


class GridMismatch(DiracTrajError):
    """Two fields do not live on the same grid."""


class JacobianCollapse(DiracTrajError):
    """The deformation Jacobian dropped below the collapse threshold."""


class StepTooLarge(DiracTrajError):
    """Time step exceeds the allowed fraction of the mass period."""


class InversionFailure(DiracTrajError):
    """The forward label map could not be inverted at some output point."""


class MajoranaConstraintViolation(UserWarning):
    """Coefficients handed to majorana_join are not charge-conjugation eigenspinors."""


class NormalizationWarning(UserWarning):
    """Initial state norm deviated from one and was rescaled."""


class ConfigInvalid(DiracTrajError):
    """Run configuration failed validation."""


class FileFormatError(DiracTrajError):
    """A snapshot or bundle file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
