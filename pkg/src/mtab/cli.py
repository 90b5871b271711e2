"""Batch and scripting interface over the engine.

Every mutating command loads the workbook, applies the engine operation,
recalculates, and saves, holding an advisory lock on the file throughout.
Values printed by ``get`` use canonical rendering (no locale separators,
no currency symbol) so scripts can parse them. Exit codes: 0 success,
1 usage error, 2 engine or data error.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import os
import sys
from pathlib import Path
from typing import Optional

from . import engine, storage
from .errors import EngineError
from .formula import FormulaParseError, print_expr
from .model import Field, Table, Workbook
from .values import is_error, parse_literal, render


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    p = _Parser(prog="mtab", description="structured-spreadsheet engine")
    sub = p.add_subparsers(dest="command", metavar="command")

    def cmd(name: str, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("file", help="workbook file (.mtab)")
        return sp

    sp = cmd("new", "create a workbook")
    sp.add_argument("--name", help="workbook name (default: file stem)")
    sp.add_argument("--table", help="initial table name")
    sp.add_argument("--levels", help="comma-separated level names")

    sp = cmd("info", "describe tables, fields, relations, cycles")
    sp.add_argument("--format", choices=["text", "json"], default="text")

    sp = cmd("field", "add a data or formula field")
    sp.add_argument("table")
    sp.add_argument("name")
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--formula", help="formula text (makes a formula field)")
    sp.add_argument("--display", help="display format, e.g. currency-2dp")

    sp = cmd("borrow", "add a borrowed field")
    sp.add_argument("table")
    sp.add_argument("name")
    sp.add_argument("--level", type=int, required=True)
    sp.add_argument("--from", dest="source", required=True,
                    metavar="TABLE!FIELD", help="source field")
    sp.add_argument("--display", help="display format")

    sp = cmd("link", "link a local field to a foreign key field")
    sp.add_argument("local", metavar="TABLE!FIELD")
    sp.add_argument("foreign", metavar="TABLE!FIELD")

    sp = cmd("set", "edit matching data cells")
    sp.add_argument("table")
    sp.add_argument("assign", metavar="FIELD=VALUE")
    sp.add_argument("--where", nargs="+", default=[], metavar="FIELD=VALUE")
    sp.add_argument("--all", action="store_true",
                    help="allow multiple matching rows")

    sp = cmd("add-row", "insert a row and print its id")
    sp.add_argument("table")
    sp.add_argument("--parent", nargs="+", default=[], metavar="FIELD=VALUE",
                    help="selectors identifying the parent row")
    sp.add_argument("--index", type=int)

    cmd("recalc", "full recomputation; prints the changed-cell count")

    sp = cmd("import", "import CSV records into a table")
    sp.add_argument("table")
    sp.add_argument("csv")
    sp.add_argument("--text-cols", default="",
                    help="comma-separated columns imported verbatim as text")

    sp = cmd("export", "export a table level as CSV")
    sp.add_argument("table")
    sp.add_argument("--level", type=int)
    sp.add_argument("--raw", action="store_true",
                    help="canonical values instead of display formats")
    sp.add_argument("--output", "-o", help="write here instead of stdout")

    sp = cmd("get", "print one cell value")
    sp.add_argument("table")
    sp.add_argument("field")
    sp.add_argument("--where", nargs="+", default=[], metavar="FIELD=VALUE")
    sp.add_argument("--format", choices=["text", "json"], default="text")

    sp = cmd("serve", "serve the workbook over HTTP")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8323)
    sp.add_argument("--ui", help="static directory for the browser editor")

    return p


@contextlib.contextmanager
def _locked(path: str):
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def _split_pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise _UsageError(f"expected FIELD=VALUE, got {text!r}")
    name, _, value = text.partition("=")
    return name, value


def _split_endpoint(text: str) -> tuple[str, str]:
    if "!" not in text:
        raise _UsageError(f"expected TABLE!FIELD, got {text!r}")
    table, _, field = text.partition("!")
    return table, field


def _selector_fields(t: Table, pairs: list[str]) -> list[tuple[Field, object]]:
    out = []
    for pair in pairs:
        name, text = _split_pair(pair)
        f = t.field(name)
        if f.kind == "formula":
            raise EngineError(
                f"selector {name!r} is a formula field; derived values are "
                "not stable selectors")
        out.append((f, parse_literal(text)))
    return out


def _match_rows(t: Table, selectors, level: int) -> list[str]:
    from .values import values_equal
    hits = []
    for row in t.rows_at_level(level):
        if all(values_equal(t.ancestor_value(row, f), v)
               for f, v in selectors):
            hits.append(row.id)
    return hits


def _unique_row(t: Table, selectors, level: int, what: str) -> str:
    hits = _match_rows(t, selectors, level)
    if not hits:
        raise EngineError(f"no row matches the {what} selectors",
                          code="#NOMATCH")
    if len(hits) > 1:
        raise EngineError(
            f"{len(hits)} rows match the {what} selectors; refine them",
            code="#MULTI")
    return hits[0]


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return _dispatch(args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except FormulaParseError as exc:
        print(f"#PARSE {exc}", file=sys.stderr)
        return 2
    except storage.DocumentError as exc:
        print(f"document error: {exc}", file=sys.stderr)
        return 2
    except EngineError as exc:
        code = exc.code or "error"
        at = f" at {exc.address}" if exc.address else ""
        print(f"{code}{at}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "new":
        return _cmd_new(args)
    if args.command == "serve":
        from . import service
        return service.serve(args.file, args.host, args.port, ui_dir=args.ui)
    if not Path(args.file).is_file():
        raise EngineError(f"no such workbook file: {args.file}")
    if args.command in ("info", "export", "get"):
        wb = storage.load(args.file)
        return {"info": _cmd_info, "export": _cmd_export,
                "get": _cmd_get}[args.command](args, wb)
    with _locked(args.file):
        wb = storage.load(args.file)
        handler = {
            "field": _cmd_field,
            "borrow": _cmd_borrow,
            "link": _cmd_link,
            "set": _cmd_set,
            "add-row": _cmd_add_row,
            "recalc": _cmd_recalc,
            "import": _cmd_import,
        }[args.command]
        rc = handler(args, wb)
        if rc == 0:
            storage.save(wb, args.file)
        return rc


def _cmd_new(args: argparse.Namespace) -> int:
    path = Path(args.file)
    if path.exists():
        raise EngineError(f"{args.file} already exists")
    wb = Workbook(args.name or path.stem)
    if args.table:
        if not args.levels:
            raise _UsageError("--table needs --levels")
        wb.add_table(args.table, [s.strip() for s in args.levels.split(",")])
    elif args.levels:
        raise _UsageError("--levels needs --table")
    with _locked(args.file):
        storage.save(wb, args.file)
    return 0


def _cmd_info(args: argparse.Namespace, wb: Workbook) -> int:
    cycles = engine.cyclic_fields(wb)
    if args.format == "json":
        doc = {
            "name": wb.name,
            "version": wb.version,
            "tables": [
                {
                    "name": t.name,
                    "levels": t.levels,
                    "rows": sum(1 for _ in t.walk()),
                    "fields": [
                        {"name": f.name, "level": f.level, "kind": f.kind,
                         **({"formula": print_expr(f.formula)}
                            if f.formula else {}),
                         **({"source": list(f.borrow_source)}
                            if f.borrow_source else {})}
                        for f in t.fields
                    ],
                }
                for t in wb.tables.values()
            ],
            "borrows": [[b.target_table, b.target_field, b.source_table,
                         b.source_field] for b in wb.relations.borrows],
            "links": [[l.local_table, l.local_field, l.foreign_table,
                       l.foreign_field] for l in wb.relations.links],
            "cycles": [list(k) for k in cycles],
        }
        print(storage.canonical_json(doc), end="")
        return 0
    print(f"workbook {wb.name}")
    for t in wb.tables.values():
        print(f"table {t.name}: levels {' > '.join(t.levels)}")
        for f in t.fields:
            extra = ""
            if f.kind == "formula":
                text = (print_expr(f.formula) if f.formula
                        else f"{f.formula_source!r} (#PARSE)")
                extra = f" = {text}"
            elif f.borrow_source:
                extra = f" <- {f.borrow_source[0]}!{f.borrow_source[1]}"
            print(f"  {f.name} ({f.kind}, level {f.level}){extra}")
    for b in wb.relations.borrows:
        print(f"borrow {b.target_table}!{b.target_field} <- "
              f"{b.source_table}!{b.source_field}")
    for l in wb.relations.links:
        print(f"link {l.local_table}!{l.local_field} -> "
              f"{l.foreign_table}!{l.foreign_field}")
    if cycles:
        print("cycles: " + ", ".join(f"{t}!{f}" for t, f in cycles))
    else:
        print("cycles: none")
    return 0


def _cmd_field(args: argparse.Namespace, wb: Workbook) -> int:
    kind = "formula" if args.formula is not None else "data"
    wb.add_field(args.table, args.name, args.level, kind,
                 formula=args.formula, display_format=args.display)
    wb.recalculate()
    return 0


def _cmd_borrow(args: argparse.Namespace, wb: Workbook) -> int:
    src = _split_endpoint(args.source)
    wb.add_field(args.table, args.name, args.level, "borrowed", source=src,
                 display_format=args.display)
    wb.recalculate()
    return 0


def _cmd_link(args: argparse.Namespace, wb: Workbook) -> int:
    wb.declare_link(_split_endpoint(args.local),
                    _split_endpoint(args.foreign))
    wb.recalculate()
    return 0


def _cmd_set(args: argparse.Namespace, wb: Workbook) -> int:
    t = wb.table(args.table)
    name, text = _split_pair(args.assign)
    target = t.field(name)
    selectors = _selector_fields(t, args.where)
    hits = _match_rows(t, selectors, target.level)
    if not hits:
        raise EngineError("no row matches the selectors", code="#NOMATCH")
    if len(hits) > 1 and not args.all:
        raise EngineError(
            f"{len(hits)} rows match; pass --all to edit every one",
            code="#MULTI")
    value = parse_literal(text)
    for rid in hits:
        wb.set_cell(args.table, rid, name, value)
    wb.recalculate()
    return 0


def _cmd_add_row(args: argparse.Namespace, wb: Workbook) -> int:
    t = wb.table(args.table)
    parent: Optional[str] = None
    if args.parent:
        selectors = _selector_fields(t, args.parent)
        level = max(f.level for f, _ in selectors)
        parent = _unique_row(t, selectors, level, "parent")
    rid = wb.insert_row(args.table, parent, args.index)
    wb.recalculate()
    print(rid)
    return 0


def _cmd_recalc(args: argparse.Namespace, wb: Workbook) -> int:
    result = wb.recalculate("all")
    print(f"{len(result.changed)} changed")
    return 0


def _cmd_import(args: argparse.Namespace, wb: Workbook) -> int:
    text_cols = tuple(s for s in args.text_cols.split(",") if s)
    count = storage.import_csv(wb, args.table, args.csv,
                               text_fields=text_cols)
    wb.recalculate()
    print(f"{count} rows inserted")
    return 0


def _cmd_export(args: argparse.Namespace, wb: Workbook) -> int:
    text = storage.export_csv(wb, args.table, level=args.level, raw=args.raw)
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_get(args: argparse.Namespace, wb: Workbook) -> int:
    t = wb.table(args.table)
    f = t.field(args.field)
    selectors = _selector_fields(t, args.where)
    rid = _unique_row(t, selectors, f.level, "row")
    value = wb.get_cell(args.table, rid, args.field)
    if args.format == "json":
        doc = {"table": args.table, "row": rid, "field": args.field,
               "value": None if is_error(value) else value,
               "rendered": render(value)}
        if is_error(value):
            doc["error"] = value.code
        print(storage.canonical_json(doc), end="")
        return 2 if is_error(value) else 0
    if is_error(value):
        print(f"{value.code} at {args.table}[{rid}].{args.field}",
              file=sys.stderr)
        return 2
    print(render(value))
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
