"""Exception hierarchy shared by all modules.

Each class carries an ``exit_code`` so the command line front-end can map
failures to distinct process exit statuses.
"""

from __future__ import annotations


class PureJumpError(Exception):
    exit_code = 10


class ValidationError(PureJumpError):
    """Input data violates a structural requirement."""

    exit_code = 4

    def __init__(self, message: str, location: str | None = None):
        self.detail = message
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


    def relocated(self, section: str) -> "ValidationError":
        """Same error with the location prefixed by a spec-file section name."""
        loc = f"{section}.{self.location}" if self.location else section
        if self.location and self.location.startswith(section):
            loc = self.location
        return type(self)(self.detail, loc)


class NegativeRate(ValidationError):
    exit_code = 11


class DiagonalRate(ValidationError):
    exit_code = 12


class BadGrid(ValidationError):
    exit_code = 13


class OutOfRange(PureJumpError, ValueError):
    exit_code = 14


class NonFiniteValue(PureJumpError, ArithmeticError):
    exit_code = 15


class NotAbsolutelyContinuous(ValidationError):
    exit_code = 16


class ParseError(PureJumpError):
    exit_code = 3


class IoError(PureJumpError, OSError):
    exit_code = 6
