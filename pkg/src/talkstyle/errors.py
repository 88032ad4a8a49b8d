"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI reports for it.
"""


class TalkStyleError(Exception):
    exit_code = 1


class ConfigError(TalkStyleError, ValueError):
    exit_code = 2


class InputError(TalkStyleError, ValueError):
    exit_code = 3


class DimensionError(InputError):
    pass


class StateError(TalkStyleError, RuntimeError):
    exit_code = 3


class LoadError(TalkStyleError, IOError):
    exit_code = 3


class TrainingError(TalkStyleError, ArithmeticError):
    exit_code = 4


class MetricError(TalkStyleError, ArithmeticError):
    exit_code = 4
