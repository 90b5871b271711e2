"""The field-reference formula language: lexer, parser, canonical printer,
and reference extraction.

Formulas reference fields by name, never by position. ``Total`` is a local
field reference resolved against the origin cell's table; ``Sales!Total``
reaches into another table. Names that are not plain identifiers are
bracketed: ``[Sales Code]``, ``Sales![Sales Code]``. Positional spreadsheet
addresses (``A1``, ``R1C1``, ``B2:C3`` ranges) are parse errors by design,
as is the ``;`` argument separator.

Grammar (normative copy in docs/grammar.ebnf)::

    formula        = [ "=" ] expr
    expr           = comparison
    comparison     = additive [ cmp-op additive ]     (non-associative)
    cmp-op         = "=" | "<>" | "<" | "<=" | ">" | ">="
    additive       = multiplicative { ("+" | "-") multiplicative }
    multiplicative = unary { ("*" | "/") unary }
    unary          = "-" unary | power
    power          = atom [ "^" unary ]               (right-associative)
    atom           = NUMBER | STRING | TRUE | FALSE | call | reference
                   | "(" expr ")"
    call           = IDENT "(" expr { "," expr } ")"
    reference      = name [ "!" name ]
    name           = IDENT | "[" name-char { name-char } "]"

``IDENT`` is ``[A-Za-z_][A-Za-z0-9_]*``; ``name-char`` is any character
except ``]``. Strings are double-quoted, with ``""`` escaping a quote.
Function names are case-insensitive; field and table names are exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from decimal import Decimal
from typing import Iterator, Union

from .values import canonical_number

__all__ = [
    "Expr",
    "NumberLit",
    "TextLit",
    "BoolLit",
    "LocalRef",
    "CrossRef",
    "Unary",
    "Binary",
    "Call",
    "FormulaParseError",
    "FUNCTIONS",
    "AGGREGATES",
    "parse",
    "print_expr",
    "collect_refs",
]


@dataclass(frozen=True)
class NumberLit:
    value: Decimal

    def __post_init__(self) -> None:
        # Negative literals are spelled Unary('-', NumberLit(...)); allowing
        # a negative payload here would break print/parse round-tripping.
        if self.value < 0:
            raise ValueError("number literals are non-negative")


@dataclass(frozen=True)
class TextLit:
    value: str


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class LocalRef:
    name: str


@dataclass(frozen=True)
class CrossRef:
    table: str
    field: str


@dataclass(frozen=True)
class Unary:
    op: str  # only "-"
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # + - * / ^ = <> < <= > >=
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str  # canonical upper-case function name
    args: tuple["Expr", ...]


Expr = Union[NumberLit, TextLit, BoolLit, LocalRef, CrossRef, Unary, Binary, Call]

# name -> (min arity, max arity or None for variadic)
FUNCTIONS: dict[str, tuple[int, int | None]] = {
    "SUM": (1, None),
    "COUNT": (1, None),
    "AVG": (1, None),
    "MIN": (1, None),
    "MAX": (1, None),
    "IF": (3, 3),
    "ROUND": (2, 2),
}

AGGREGATES = frozenset({"SUM", "COUNT", "AVG", "MIN", "MAX"})


class FormulaParseError(Exception):
    """Raised for any input that is not a formula. ``pos`` is the 0-based
    offset into the original text; the message names what was expected."""

    code = "#PARSE"

    def __init__(self, message: str, pos: int) -> None:
        super().__init__(f"parse error at {pos}: {message}")
        self.pos = pos
        self.reason = message


_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_A1_RE = re.compile(r"[A-Za-z]{1,3}[0-9]+\Z")
_R1C1_RE = re.compile(r"[Rr][0-9]+[Cc][0-9]+\Z")
_NUM_RE = re.compile(r"([0-9]+(\.[0-9]*)?|\.[0-9]+)([eE][+-]?[0-9]+)?")

_CMP_OPS = ("=", "<>", "<", "<=", ">", ">=")


def _is_positional(name: str) -> bool:
    return bool(_A1_RE.match(name) or _R1C1_RE.match(name))


@dataclass(frozen=True)
class _Token:
    kind: str  # NUM STR NAME BNAME OP END
    text: str
    pos: int
    value: object = None


def _tokenize(text: str, start: int) -> Iterator[_Token]:
    i = start
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "0123456789" or (c == "." and i + 1 < n
                                 and text[i + 1] in "0123456789"):
            m = _NUM_RE.match(text, i)
            assert m is not None
            yield _Token("NUM", m.group(0), i, Decimal(m.group(0)))
            i = m.end()
            continue
        if c == '"':
            j = i + 1
            parts: list[str] = []
            while True:
                if j >= n:
                    raise FormulaParseError("unterminated string", i)
                if text[j] == '"':
                    if j + 1 < n and text[j + 1] == '"':
                        parts.append('"')
                        j += 2
                        continue
                    j += 1
                    break
                parts.append(text[j])
                j += 1
            yield _Token("STR", text[i:j], i, "".join(parts))
            i = j
            continue
        if c == "[":
            j = text.find("]", i + 1)
            if j < 0:
                raise FormulaParseError("unterminated bracketed name", i)
            name = text[i + 1 : j]
            if not name:
                raise FormulaParseError("empty bracketed name", i)
            yield _Token("BNAME", text[i : j + 1], i, name)
            i = j + 1
            continue
        m = _IDENT_RE.match(text, i)
        if m:
            yield _Token("NAME", m.group(0), i, m.group(0))
            i = m.end()
            continue
        if c in "<>":
            two = text[i : i + 2]
            if two in ("<=", ">=", "<>"):
                yield _Token("OP", two, i)
                i += 2
                continue
            yield _Token("OP", c, i)
            i += 1
            continue
        if c in "+-*/^=(),!":
            yield _Token("OP", c, i)
            i += 1
            continue
        if c in ":;":
            raise FormulaParseError(
                f"{c!r} is not part of the language; positional ranges and "
                "';' argument separators are not supported", i)
        raise FormulaParseError(f"unexpected character {c!r}", i)
    yield _Token("END", "", n)


class _Parser:
    def __init__(self, text: str, start: int) -> None:
        self.tokens = list(_tokenize(text, start))
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        if self.cur.kind == "OP" and self.cur.text == op:
            self.advance()
            return
        raise FormulaParseError(
            f"expected {op!r}, found {self.cur.text or 'end of input'!r}",
            self.cur.pos)

    def at_op(self, *ops: str) -> bool:
        return self.cur.kind == "OP" and self.cur.text in ops

    def parse(self) -> Expr:
        e = self.comparison()
        if self.cur.kind != "END":
            raise FormulaParseError(
                f"unexpected {self.cur.text!r} after expression", self.cur.pos)
        return e

    def comparison(self) -> Expr:
        left = self.additive()
        if self.at_op(*_CMP_OPS):
            op = self.advance().text
            right = self.additive()
            if self.at_op(*_CMP_OPS):
                raise FormulaParseError(
                    "comparisons are non-associative; parenthesize",
                    self.cur.pos)
            return Binary(op, left, right)
        return left

    def additive(self) -> Expr:
        e = self.multiplicative()
        while self.at_op("+", "-"):
            op = self.advance().text
            e = Binary(op, e, self.multiplicative())
        return e

    def multiplicative(self) -> Expr:
        e = self.unary()
        while self.at_op("*", "/"):
            op = self.advance().text
            e = Binary(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        if self.at_op("-"):
            self.advance()
            return Unary("-", self.unary())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.at_op("^"):
            self.advance()
            # exponent re-admits unary minus: 2^-3 is valid
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        tok = self.cur
        if tok.kind == "NUM":
            self.advance()
            return NumberLit(tok.value)  # type: ignore[arg-type]
        if tok.kind == "STR":
            self.advance()
            return TextLit(tok.value)  # type: ignore[arg-type]
        if tok.kind == "OP" and tok.text == "(":
            self.advance()
            e = self.comparison()
            self.expect_op(")")
            return e
        if tok.kind in ("NAME", "BNAME"):
            return self.reference_or_call()
        raise FormulaParseError(
            f"expected a value, reference, or '(', found "
            f"{tok.text or 'end of input'!r}", tok.pos)

    def reference_or_call(self) -> Expr:
        tok = self.advance()
        name: str = tok.value  # type: ignore[assignment]
        bare = tok.kind == "NAME"
        if self.at_op("!"):
            if bare and _is_positional(name):
                raise FormulaParseError(
                    f"{name!r} is a positional reference; tables are "
                    "referenced by name", tok.pos)
            self.advance()
            ftok = self.cur
            if ftok.kind not in ("NAME", "BNAME"):
                raise FormulaParseError(
                    f"expected a field name after '!', found "
                    f"{ftok.text or 'end of input'!r}", ftok.pos)
            self.advance()
            if ftok.kind == "NAME" and _is_positional(ftok.value):  # type: ignore[arg-type]
                raise FormulaParseError(
                    f"{ftok.value!r} is a positional reference; fields are "
                    "referenced by name", ftok.pos)
            return CrossRef(name, ftok.value)  # type: ignore[arg-type]
        if bare and self.at_op("("):
            fname = name.upper()
            if fname not in FUNCTIONS:
                raise FormulaParseError(f"unknown function {name!r}", tok.pos)
            self.advance()
            args: list[Expr] = []
            if not self.at_op(")"):
                args.append(self.comparison())
                while self.at_op(","):
                    self.advance()
                    args.append(self.comparison())
            self.expect_op(")")
            lo, hi = FUNCTIONS[fname]
            if len(args) < lo or (hi is not None and len(args) > hi):
                wants = str(lo) if hi == lo else (
                    f"at least {lo}" if hi is None else f"{lo}..{hi}")
                raise FormulaParseError(
                    f"{fname} takes {wants} argument(s), got {len(args)}",
                    tok.pos)
            return Call(fname, tuple(args))
        if bare:
            upper = name.upper()
            if upper == "TRUE":
                return BoolLit(True)
            if upper == "FALSE":
                return BoolLit(False)
            if _is_positional(name):
                raise FormulaParseError(
                    f"{name!r} is a positional reference; this language has "
                    "none, reference fields by name", tok.pos)
        return LocalRef(name)


def parse(text: str) -> Expr:
    """Parse formula text into an Expr. A leading '=' is accepted and
    stripped. Raises FormulaParseError with a position on any failure."""
    start = 0
    n = len(text)
    while start < n and text[start].isspace():
        start += 1
    if start < n and text[start] == "=":
        start += 1
    expr = _Parser(text, start).parse()
    return expr


# Printer precedence levels; higher binds tighter.
_PREC_CMP = 1
_PREC_ADD = 2
_PREC_MUL = 3
_PREC_UNARY = 4
_PREC_POW = 5
_PREC_ATOM = 7


def _print_name(name: str) -> str:
    if "]" in name:
        raise ValueError(f"name {name!r} contains ']' and cannot be printed")
    if (
        _IDENT_RE.fullmatch(name)
        and not _is_positional(name)
        and name.upper() not in ("TRUE", "FALSE")
    ):
        return name
    return f"[{name}]"


def _print(e: Expr, min_prec: int) -> str:
    if isinstance(e, NumberLit):
        return canonical_number(e.value)
    if isinstance(e, TextLit):
        return '"' + e.value.replace('"', '""') + '"'
    if isinstance(e, BoolLit):
        return "TRUE" if e.value else "FALSE"
    if isinstance(e, LocalRef):
        return _print_name(e.name)
    if isinstance(e, CrossRef):
        return f"{_print_name(e.table)}!{_print_name(e.field)}"
    if isinstance(e, Call):
        args = ", ".join(_print(a, _PREC_CMP) for a in e.args)
        return f"{e.name}({args})"
    if isinstance(e, Unary):
        s = "-" + _print(e.operand, _PREC_UNARY)
        return s if _PREC_UNARY >= min_prec else f"({s})"
    if isinstance(e, Binary):
        op = e.op
        if op in _CMP_OPS:
            prec, lmin, rmin = _PREC_CMP, _PREC_ADD, _PREC_ADD
        elif op in ("+", "-"):
            prec, lmin, rmin = _PREC_ADD, _PREC_ADD, _PREC_MUL
        elif op in ("*", "/"):
            prec, lmin, rmin = _PREC_MUL, _PREC_MUL, _PREC_UNARY
        else:  # ^
            prec, lmin, rmin = _PREC_POW, _PREC_POW + 1, _PREC_UNARY
        s = f"{_print(e.left, lmin)}{op}{_print(e.right, rmin)}"
        return s if prec >= min_prec else f"({s})"
    raise TypeError(f"not an Expr: {e!r}")


def print_expr(e: Expr) -> str:
    """Canonical text for an Expr: minimal parentheses, names bracketed only
    when required. parse(print_expr(e)) is structurally identical to e."""
    return _print(e, _PREC_CMP)


def collect_refs(e: Expr) -> list[Union[LocalRef, CrossRef]]:
    """Every LocalRef/CrossRef occurrence in e, left to right."""
    out: list[Union[LocalRef, CrossRef]] = []

    def walk(node: Expr) -> None:
        if isinstance(node, (LocalRef, CrossRef)):
            out.append(node)
        elif isinstance(node, Unary):
            walk(node.operand)
        elif isinstance(node, Binary):
            walk(node.left)
            walk(node.right)
        elif isinstance(node, Call):
            for a in node.args:
                walk(a)

    walk(e)
    return out
