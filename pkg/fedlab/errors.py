"""
Exception hierarchy shared by every fedlab module.
"""

from typing import Optional


class FedLabError(Exception):
    """Base class for all errors raised by fedlab"""


class InvalidInputError(FedLabError, ValueError):
    """An argument is outside the domain an operation accepts"""


class ShapeError(FedLabError, ValueError):
    """Array dimensions do not line up"""


class FormatError(FedLabError, ValueError):
    """A file does not follow the expected binary or text format"""


class InsufficientVictimsError(InvalidInputError):
    """A dataset holds fewer victim-class samples than a poisoning request needs

    Parameters
    ----------
    needed : int

    available : int

    """

    def __init__(self, needed: int, available: int):
        self.needed = needed
        self.available = available
        super().__init__(
            "need {} victim samples but only {} available (shortfall {})".format(
                needed, available, self.shortfall
            )
        )

    @property
    def shortfall(self) -> int:
        return self.needed - self.available


class ConfigError(FedLabError):
    """An experiment config failed validation

    Parameters
    ----------
    message : str

    field : str, default None
        dotted path of the offending field, e.g. ``federation.mcr``

    line : int, default None
        1-based line of the field in the source file

    source : str, default None
        path of the config file

    """

    def __init__(
        self,
        message: str,
        field: Optional[str] = None,
        line: Optional[int] = None,
        source: Optional[str] = None,
    ):
        self.message = message
        self.field = field
        self.line = line
        self.source = source
        super().__init__(str(self))

    def __str__(self):
        where = ""
        if self.source is not None:
            where = self.source
            if self.line is not None:
                where = "{}:{}".format(where, self.line)
            where += ": "
        elif self.line is not None:
            where = "line {}: ".format(self.line)
        field = "{}: ".format(self.field) if self.field else ""
        return "{}{}{}".format(where, field, self.message)


class ComparabilityError(FedLabError):
    """Configs in a comparison suite differ outside their defense block"""


class RoundAbortedError(FedLabError):
    """A defense produced no global model for a round"""
