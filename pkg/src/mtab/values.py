"""Cell values: the tagged union stored in every cell, plus rendering rules.

A cell holds exactly one of:

* a number, represented as :class:`decimal.Decimal` (28 significant digits
  under the default context, well above the 15 the engine guarantees),
* text, represented as ``str``,
* a boolean,
* Empty, represented as ``None``,
* an :class:`ErrorValue` carrying one of the fixed error codes.

Numbers are stored at full precision; currency is a display format applied
at render time, never a storage type, so arithmetic does not accumulate
display rounding.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Union

PARSE = "#PARSE"
REF = "#REF"
TYPE = "#TYPE"
DIV0 = "#DIV0"
CYCLE = "#CYCLE"
NOMATCH = "#NOMATCH"
MULTI = "#MULTI"

ERROR_CODES = frozenset({PARSE, REF, TYPE, DIV0, CYCLE, NOMATCH, MULTI})


@dataclass(frozen=True)
class ErrorValue:
    """An error payload. Two errors are equal when their codes match; the
    detail string is diagnostic only and does not affect change detection."""

    code: str
    detail: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        if self.code not in ERROR_CODES:
            raise ValueError(f"unknown error code {self.code!r}")

    def __str__(self) -> str:
        return self.code


Value = Union[None, bool, Decimal, str, ErrorValue]


def is_error(v: Value) -> bool:
    return isinstance(v, ErrorValue)


def is_empty(v: Value) -> bool:
    return v is None


def is_number(v: Value) -> bool:
    # bool is excluded explicitly: True == 1 in Python but not in the engine.
    return isinstance(v, Decimal) and not isinstance(v, bool)


def is_text(v: Value) -> bool:
    return isinstance(v, str)


def is_bool(v: Value) -> bool:
    return isinstance(v, bool)


def values_equal(a: Value, b: Value) -> bool:
    """Exact Value equality: numbers compare numerically, text is
    case-sensitive, booleans never equal numbers, errors compare by code."""
    if isinstance(a, bool) or isinstance(b, bool):
        return isinstance(a, bool) and isinstance(b, bool) and a is b
    if isinstance(a, ErrorValue) or isinstance(b, ErrorValue):
        return (
            isinstance(a, ErrorValue)
            and isinstance(b, ErrorValue)
            and a.code == b.code
        )
    if a is None or b is None:
        return a is None and b is None
    if isinstance(a, Decimal) and isinstance(b, Decimal):
        return a == b
    if isinstance(a, str) and isinstance(b, str):
        return a == b
    return False


def value_key(v: Value):
    """Hashable key implementing the same equivalence as values_equal.
    Needed because hash(True) == hash(Decimal(1)) in Python."""
    if isinstance(v, bool):
        return ("b", v)
    if isinstance(v, ErrorValue):
        return ("e", v.code)
    if isinstance(v, Decimal):
        return ("n", v)
    if isinstance(v, str):
        return ("t", v)
    return ("empty",)


def canonical_number(d: Decimal) -> str:
    """Canonical text for a number: no exponent, no trailing zeros, '-0'
    collapsed to '0'. Stable under parse/format round-trips."""
    if d == 0:
        return "0"
    return format(d.normalize(), "f")


_NUMBER_RE = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\Z")


def parse_literal(text: str) -> Value:
    """Infer a Value from external text (CLI arguments, CSV cells):
    number if it reads as one, TRUE/FALSE as booleans, empty string as
    Empty, anything else as text."""
    if text == "":
        return None
    if _NUMBER_RE.match(text):
        return Decimal(text)
    upper = text.upper()
    if upper == "TRUE":
        return True
    if upper == "FALSE":
        return False
    return text


def render(v: Value, display_format: str | None = None) -> str:
    """Render a Value for humans. ``display_format`` applies to numbers
    only; other kinds always render canonically."""
    if v is None:
        return ""
    if isinstance(v, ErrorValue):
        return v.code
    if isinstance(v, bool):
        return "TRUE" if v else "FALSE"
    if isinstance(v, Decimal):
        if display_format:
            return _render_formatted(v, display_format)
        return canonical_number(v)
    return v


def _render_formatted(d: Decimal, display_format: str) -> str:
    if display_format == "currency-2dp":
        # format() on Decimal rounds half-even, matching engine rounding.
        s = format(d, ",.2f")
        return "-£" + s[1:] if s.startswith("-") else "£" + s
    m = re.fullmatch(r"fixed-(\d+)dp", display_format)
    if m:
        return format(d, f",.{int(m.group(1))}f")
    raise ValueError(f"unknown display format {display_format!r}")


def validate_display_format(display_format: str) -> None:
    _render_formatted(Decimal(0), display_format)
