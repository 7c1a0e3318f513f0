"""
Physical units for wall-clock measurements. Durations are pint quantities so
that records and manifests state their unit explicitly.
"""

import time as _time

from pint import UnitRegistry as _UnitRegistry

_u = _UnitRegistry()


def seconds(value: float):
    return value * _u.second


def to_ms(quantity) -> float:
    """Magnitude of a duration in milliseconds"""
    return float(quantity.to(_u.millisecond).magnitude)


class Stopwatch:
    """Monotonic wall-clock timer

    Example
    -------
    >>> watch = Stopwatch()
    >>> watch.elapsed.units
    <Unit('second')>
    """

    def __init__(self):
        self._start = _time.perf_counter()

    @property
    def elapsed(self):
        return seconds(_time.perf_counter() - self._start)

    @property
    def elapsed_ms(self) -> float:
        return to_ms(self.elapsed)
