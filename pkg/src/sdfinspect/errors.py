"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries one.
"""


class SdfInspectError(Exception):
    exit_code = 1


class ConfigError(SdfInspectError):
    exit_code = 2


class InvalidInputError(SdfInspectError, ValueError):
    exit_code = 3


class MeshFormatError(InvalidInputError):
    """Raised when a mesh file cannot be parsed; message carries line or byte offset."""


class CheckpointError(InvalidInputError):
    pass


class EmptyObservationError(InvalidInputError):
    pass


class SetupError(SdfInspectError):
    exit_code = 3


class TrainingError(SdfInspectError):
    """Non-finite loss or gradient during optimisation.

    ``state`` holds whatever the caller can salvage (the last finite
    parameters, usually).
    """

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class DegenerateFieldError(SdfInspectError):
    exit_code = 4
