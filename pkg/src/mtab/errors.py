"""Exception types shared across the engine.

Two error channels exist: misuse of the engine API (bad names, bad levels,
writes to machine-owned cells) raises one of these exceptions, while
data-shaped failures during evaluation become ErrorValue cells and never
raise.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base for all engine-raised failures.

    ``code`` is the spreadsheet error code the failure corresponds to
    (e.g. '#REF' for dangling references) or None for plain misuse.
    ``address`` optionally names the cell or field involved.
    """

    def __init__(self, message: str, *, code: str | None = None,
                 address: str | None = None) -> None:
        super().__init__(message)
        self.code = code
        self.address = address


class BadAddress(EngineError):
    """A table, row, field, or cell address does not resolve."""

    def __init__(self, message: str, *, address: str | None = None) -> None:
        super().__init__(message, code="#REF", address=address)


class ValidationError(EngineError):
    """A structural precondition was violated (duplicate names, level out
    of range, kind/options mismatch, machine-owned cell writes, ...)."""
