"""Exception hierarchy shared by all pipeline stages.

Each class carries the process exit status the CLI reports when the error
aborts a run.
"""


class TunnelScanError(Exception):
    exit_code = 1


class InputError(TunnelScanError):
    """Input files are missing or unreadable."""

    exit_code = 3


class InvalidArgumentError(TunnelScanError, ValueError):
    exit_code = 10


class NonInvertibleDistortionError(TunnelScanError):
    exit_code = 11


class DegenerateGeometryError(TunnelScanError):
    """Viewing rays are (nearly) parallel; there is no usable stereo base."""

    exit_code = 12


class InsufficientMatchesError(TunnelScanError):
    exit_code = 13


class NonConvergenceError(TunnelScanError):
    exit_code = 14


class GaugeDeficiencyError(TunnelScanError):
    exit_code = 15


class InvalidDatasetError(TunnelScanError):
    exit_code = 16


class GeoreferenceError(TunnelScanError):
    exit_code = 17


class RankDeficiencyError(TunnelScanError):
    exit_code = 18


class OutOfRangeError(TunnelScanError):
    exit_code = 19


class NoOverlapError(TunnelScanError):
    exit_code = 20


class InvalidSceneError(TunnelScanError):
    exit_code = 21


class ConfigError(TunnelScanError):
    exit_code = 2
