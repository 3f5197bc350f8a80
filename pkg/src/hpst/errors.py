"""Exception hierarchy.

Each family maps onto one CLI exit code: ``ConfigError`` -> 2 (usage),
``DataError`` -> 3, ``IncompatibleError`` -> 4. Anything else that
escapes is a bug.
"""


class HPSTError(Exception):
    pass


class ConfigError(HPSTError):
    """Unreadable config file: unknown key, bad value, bad syntax."""


class DataError(HPSTError):
    pass


class IncompatibleError(HPSTError):
    pass


class MalformedRecord(DataError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        self.reason = reason
        msg = f"malformed record at line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class VersionMismatch(DataError):
    pass


class DegenerateEvent(DataError):
    pass


class DegenerateInput(DataError):
    pass


class CorruptCheckpoint(DataError):
    pass


class NonFiniteLoss(DataError):
    def __init__(self, event_id, value):
        self.event_id = event_id
        super().__init__(f"non-finite loss {value!r} on event {event_id}")


class ConfigMismatch(IncompatibleError):
    pass


class RecordMismatch(IncompatibleError):
    pass


class ShapeMismatch(ValueError, HPSTError):
    pass


class NonFiniteError(FloatingPointError, HPSTError):
    """A primitive produced NaN or Inf."""


class NonFiniteGradient(NonFiniteError):
    pass


class NonFiniteCost(ValueError, HPSTError):
    pass


class LabelOutOfRange(ValueError, HPSTError):
    pass


class TooManyInstances(ValueError, HPSTError):
    pass
