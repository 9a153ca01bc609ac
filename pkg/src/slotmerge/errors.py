"""Exception types shared across the package.

Each class maps to one failure family; the CLI turns a subset of them into
stable exit codes (see ``slotmerge.cli.EXIT_CODES``).
"""


class SlotMergeError(Exception):
    """Base class for all package errors."""


class DimensionError(SlotMergeError, ValueError):
    pass


class ConfigError(SlotMergeError, ValueError):
    pass


class StateError(SlotMergeError, RuntimeError):
    pass


class UsageError(SlotMergeError, ValueError):
    pass


class DataError(SlotMergeError, ValueError):
    pass


class CalibrationError(SlotMergeError, RuntimeError):
    pass


class ScheduleError(SlotMergeError, RuntimeError):
    pass


class FormatError(SlotMergeError, ValueError):
    pass


class SpecError(SlotMergeError, ValueError):
    pass
