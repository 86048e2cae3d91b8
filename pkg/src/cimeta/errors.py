"""Exception hierarchy.

Every error carries the module it came from, a category that maps onto a CLI
exit code, and a short remediation hint.
"""


class CimetaError(Exception):
    category = "error"
    exit_code = 1

    def __init__(self, message, *, module="cimeta", hint=None):
        super().__init__(message)
        self.module = module
        self.hint = hint

    def describe(self):
        text = f"[{self.module}] {self.category}: {self}"
        if self.hint:
            text += f"\n  hint: {self.hint}"
        return text


class ConfigError(CimetaError):
    category = "config error"
    exit_code = 2


class DataError(CimetaError):
    category = "data error"
    exit_code = 3


class PositivityError(DataError):
    """A positivity condition (treatment or participation) fails in the data."""

    category = "positivity failure"


class NumericalError(CimetaError):
    category = "numerical failure"
    exit_code = 4
