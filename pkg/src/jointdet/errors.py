"""Exception hierarchy shared by every module.

Everything derives from :class:`JointDetError` so callers (and the CLI) can
catch one type. ``exit_code`` is what the CLI returns for the error.
"""


class JointDetError(Exception):
    exit_code = 2


class FormatError(JointDetError):
    """Bad magic, version, dtype code or header document."""


class LengthError(JointDetError):
    """Payload size disagrees with the header."""


class EmptyMatrixError(JointDetError):
    pass


class DataError(JointDetError):
    """Non-finite values or otherwise invalid numeric content."""


class DegenerateRowError(DataError):
    def __init__(self, message, index=None, label=None):
        super().__init__(message)
        self.index = index
        self.label = label


class ShapeError(JointDetError):
    pass


class ConflictError(JointDetError):
    pass


class NotFoundError(JointDetError):
    pass


class CorruptionError(JointDetError):
    """CRC mismatch on a pack blob."""


class CapacityError(JointDetError):
    pass


class TrainingError(JointDetError):
    def __init__(self, message, last_finite_step=None):
        super().__init__(message)
        self.last_finite_step = last_finite_step


class ResourceError(JointDetError):
    pass


class VerificationError(JointDetError):
    exit_code = 3
