"""
Error types shared by the PourGPS services.
"""


class GpsError(Exception):
    """Base class for every error raised by PourGPS."""


class NoSamplesError(GpsError, ValueError):
    def __init__(self, message='no samples'):
        super().__init__(message)


class DegenerateMarginalError(GpsError, ValueError):
    def __init__(self, message='degenerate marginal'):
        super().__init__(message)


class BackwardPassDivergedError(GpsError, RuntimeError):
    def __init__(self, message='backward pass diverged'):
        super().__init__(message)


class PolicyTrainingDivergedError(GpsError, RuntimeError):
    def __init__(self, message='policy training diverged'):
        super().__init__(message)


class InfeasiblePourError(GpsError, ValueError):
    def __init__(self, message='infeasible pour'):
        super().__init__(message)


class CheckpointError(GpsError):
    """Unreadable, truncated or version-mismatched checkpoint file."""


class ConfigError(GpsError, ValueError):
    """Invalid experiment configuration.

    ``field`` is ``section.key`` and ``line`` the 1-based line in the config
    file (None when the value came from a default or a CLI override).
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        location = ''
        if field:
            location = f'{field}'
            if line:
                location += f' (line {line})'
            location += ': '
        super().__init__(f'{location}{message}')


class GpsRunError(GpsError):
    """A module error raised inside run_gps, with the iteration context attached."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})
