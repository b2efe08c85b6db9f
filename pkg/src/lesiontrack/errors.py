"""Exception hierarchy; the CLI maps each family to an exit code."""


class LesionTrackError(Exception):
    exit_code = 1


class ConfigError(LesionTrackError):
    exit_code = 2


class DataError(LesionTrackError):
    exit_code = 3


class NumericError(LesionTrackError):
    exit_code = 4


class GeometryError(LesionTrackError, ValueError):
    exit_code = 3
