"""Facility-scoped logging with per-facility thresholds.

Lines go to a stream or file as "<iso8601> <facility> <level> <message>".
A facility configured at ``off`` emits nothing, including alerts.
"""

from __future__ import annotations

import datetime
import sys
from typing import IO, Iterable, Optional

FACILITIES = ("config", "core", "io", "message", "processor")

# Severity order; "off" outranks everything so nothing can be emitted at it.
LEVELS = ("debug", "info", "notice", "warning", "error", "critical", "alert", "off")
_RANK = {name: i for i, name in enumerate(LEVELS)}

DEFAULT_LEVEL = "error"


class LogConfigError(ValueError):
    """Unknown facility or level in a --log specification."""


class LogManager:
    """Routes messages to one sink, filtering per facility."""

    def __init__(self, stream: Optional[IO[str]] = None, path: Optional[str] = None):
        self._levels = {fac: _RANK[DEFAULT_LEVEL] for fac in FACILITIES}
        self._file: Optional[IO[str]] = None
        if path is not None:
            self._file = open(path, "a", buffering=1)
            self._stream = self._file
        else:
            self._stream = stream if stream is not None else sys.stderr

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def configure(self, specs: Iterable[tuple[str, str]]) -> None:
        """Apply (facility, level) pairs in order; later pairs win."""
        for facility, level in specs:
            if level not in _RANK:
                raise LogConfigError(f"unknown log level {level!r}")
            if facility == "all":
                for fac in FACILITIES:
                    self._levels[fac] = _RANK[level]
            elif facility in self._levels:
                self._levels[facility] = _RANK[level]
            else:
                raise LogConfigError(f"unknown log facility {facility!r}")

    def enabled(self, facility: str, level: str) -> bool:
        rank = _RANK[level]
        return rank != _RANK["off"] and rank >= self._levels[facility]

    def log(self, facility: str, level: str, message: str) -> None:
        if not self.enabled(facility, level):
            return
        stamp = datetime.datetime.now().isoformat(timespec="milliseconds")
        self._stream.write(f"{stamp} {facility} {level} {message}\n")

    def logger(self, facility: str) -> "FacilityLog":
        return FacilityLog(self, facility)


class FacilityLog:
    """A LogManager bound to one facility."""

    def __init__(self, manager: LogManager, facility: str):
        self._manager = manager
        self.facility = facility

    def log(self, level: str, message: str) -> None:
        self._manager.log(self.facility, level, message)

    def debug(self, message: str) -> None:
        self.log("debug", message)

    def info(self, message: str) -> None:
        self.log("info", message)

    def notice(self, message: str) -> None:
        self.log("notice", message)

    def warning(self, message: str) -> None:
        self.log("warning", message)

    def error(self, message: str) -> None:
        self.log("error", message)

    def critical(self, message: str) -> None:
        self.log("critical", message)


class _NullLog:
    """Logger that drops everything; the default where no manager is wired."""

    def log(self, level: str, message: str) -> None:
        pass

    debug = info = notice = warning = error = critical = lambda self, message: None


NULL_LOG = _NullLog()
