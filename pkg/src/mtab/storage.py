"""Workbook persistence (.mtab files) and CSV exchange.

The file format is UTF-8 text with a JSON-compatible structure rendered
canonically: sorted object keys, two-space indent, LF line endings, no
exponent notation in numbers, and a trailing newline, so files diff
cleanly under version control. Only inputs are persisted: data-field
cells, and the borrowed value of each borrowed row (so a file is readable
before its sources are reconciled; a load re-syncs them to source truth).
Computed cells are never serialized and are recomputed on load.
"""

from __future__ import annotations

import csv
import io
import json
from decimal import Decimal
from pathlib import Path
from typing import IO, Optional, Union

from .errors import EngineError, ValidationError
from .formula import print_expr
from .model import Field, Table, Workbook
from .values import Value, canonical_number, parse_literal, render, values_equal

FORMAT_MARKER = "mtab/1"
FILE_SUFFIX = ".mtab"


class DocumentError(EngineError):
    """A workbook document failed to parse or violated an invariant."""


# ---------------------------------------------------------------------------
# canonical rendering


def canonical_json(obj) -> str:
    out: list[str] = []
    _emit(obj, 0, out)
    out.append("\n")
    return "".join(out)


def compact_json(obj) -> str:
    """One-line rendering with the same Decimal handling, for wire use."""
    if isinstance(obj, dict):
        return ("{" + ",".join(
            f"{json.dumps(k, ensure_ascii=False)}:{compact_json(v)}"
            for k, v in obj.items()) + "}")
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(compact_json(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, Decimal):
        return canonical_number(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    raise TypeError(f"cannot serialize {obj!r}")


def _emit(o, indent: int, out: list[str]) -> None:
    pad = "  " * (indent + 1)
    if isinstance(o, dict):
        if not o:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted(o.items())
        for i, (k, v) in enumerate(items):
            out.append(pad)
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(": ")
            _emit(v, indent + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append("  " * indent + "}")
    elif isinstance(o, (list, tuple)):
        if not o:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(o):
            out.append(pad)
            _emit(v, indent + 1, out)
            out.append(",\n" if i < len(o) - 1 else "\n")
        out.append("  " * indent + "]")
    elif isinstance(o, bool):
        out.append("true" if o else "false")
    elif o is None:
        out.append("null")
    elif isinstance(o, Decimal):
        out.append(canonical_number(o))
    elif isinstance(o, int):
        out.append(str(o))
    elif isinstance(o, str):
        out.append(json.dumps(o, ensure_ascii=False))
    else:
        raise TypeError(f"cannot serialize {o!r}")


# ---------------------------------------------------------------------------
# save


def to_document(wb: Workbook) -> dict:
    return {
        "format": FORMAT_MARKER,
        "name": wb.name,
        "tables": [_table_doc(t) for t in wb.tables.values()],
        "links": [
            {"local": [l.local_table, l.local_field],
             "foreign": [l.foreign_table, l.foreign_field]}
            for l in wb.relations.links
        ],
    }


def _table_doc(t: Table) -> dict:
    return {
        "name": t.name,
        "levels": list(t.levels),
        "fields": [_field_doc(f) for f in t.fields],
        "rows": [_row_doc(t, rid) for rid in t.root_children],
    }


def _field_doc(f: Field) -> dict:
    doc: dict = {"name": f.name, "level": f.level, "kind": f.kind}
    if f.kind == "formula":
        # canonical text when the formula parses, verbatim source otherwise
        doc["formula"] = (print_expr(f.formula) if f.formula is not None
                          else f.formula_source)
    if f.kind == "borrowed" and f.borrow_source is not None:
        doc["source"] = list(f.borrow_source)
    if f.display_format is not None:
        doc["format"] = f.display_format
    return doc


def _row_doc(t: Table, row_id: str) -> dict:
    row = t.row(row_id)
    keep = {f.name for f in t.fields_at_level(row.level)
            if f.kind in ("data", "borrowed")}
    cells = {name: v for name, v in row.cells.items()
             if name in keep and v is not None}
    doc: dict = {}
    if cells:
        doc["cells"] = cells
    if row.children:
        doc["children"] = [_row_doc(t, c) for c in row.children]
    return doc


def dumps(wb: Workbook) -> str:
    return canonical_json(to_document(wb))


def save(wb: Workbook, destination: Union[str, Path, IO[bytes]]) -> int:
    """Write the canonical document; returns the byte count."""
    data = dumps(wb).encode("utf-8")
    if hasattr(destination, "write"):
        destination.write(data)  # type: ignore[union-attr]
    else:
        Path(destination).write_bytes(data)
    return len(data)


# ---------------------------------------------------------------------------
# load


def load(source: Union[str, Path, IO]) -> Workbook:
    """Parse, validate, register relations, synchronize borrows, and fully
    recalculate. The returned workbook carries the load-time sync repair
    and recalculation as ``last_load_result``."""
    if hasattr(source, "read"):
        raw = source.read()  # type: ignore[union-attr]
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
    else:
        raw = Path(source).read_text("utf-8")
    try:
        doc = json.loads(raw, parse_float=Decimal)
    except json.JSONDecodeError as exc:
        raise DocumentError(
            f"not a workbook document: {exc.msg} at line {exc.lineno} "
            f"column {exc.colno}") from None
    return from_document(doc)


def from_document(doc) -> Workbook:
    from . import engine, relations

    if not isinstance(doc, dict):
        raise DocumentError("document root must be an object")
    marker = doc.get("format")
    if marker != FORMAT_MARKER:
        raise DocumentError(f"unknown format marker {marker!r}, "
                            f"expected {FORMAT_MARKER!r}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise DocumentError("workbook name must be a non-empty string")
    tables = _expect(doc, "tables", list)

    wb = Workbook(name)
    borrows: list[tuple[str, str, str, str]] = []
    try:
        for tdoc in tables:
            _load_table(wb, tdoc, borrows)
        for target_t, target_f, src_t, src_f in borrows:
            relations.declare_borrow(wb, target_t, target_f, src_t, src_f,
                                     _bump=False, _sync=False)
        for ldoc in doc.get("links", []):
            local = _pair(ldoc, "local")
            foreign = _pair(ldoc, "foreign")
            relations.declare_link(wb, local[0], local[1], foreign[0],
                                   foreign[1], _bump=False)
    except EngineError as exc:
        if isinstance(exc, DocumentError):
            raise
        raise DocumentError(f"invalid document: {exc}") from exc

    wb.last_load_result = engine.recalculate(wb, "all")
    wb.version = 0
    return wb


def _expect(doc: dict, key: str, kind) -> object:
    v = doc.get(key)
    if not isinstance(v, kind):
        raise DocumentError(f"{key!r} must be a {kind.__name__}")
    return v


def _pair(doc, key: str) -> tuple[str, str]:
    if not isinstance(doc, dict):
        raise DocumentError("link entries must be objects")
    v = doc.get(key)
    if (not isinstance(v, list) or len(v) != 2
            or not all(isinstance(x, str) for x in v)):
        raise DocumentError(f"link {key!r} must be [table, field]")
    return v[0], v[1]


def _load_table(wb: Workbook, tdoc, borrows) -> None:
    if not isinstance(tdoc, dict):
        raise DocumentError("table entries must be objects")
    tname = tdoc.get("name")
    levels = _expect(tdoc, "levels", list)
    t = wb.add_table(tname, levels)
    for fdoc in _expect(tdoc, "fields", list):
        if not isinstance(fdoc, dict):
            raise DocumentError("field entries must be objects")
        fname = fdoc.get("name")
        level = fdoc.get("level")
        kind = fdoc.get("kind")
        fmt = fdoc.get("format")
        if kind == "data":
            wb.add_field(tname, fname, level, "data", display_format=fmt)
        elif kind == "formula":
            formula = fdoc.get("formula")
            if not isinstance(formula, str):
                raise DocumentError(
                    f"formula field {fname!r} needs formula text")
            wb.add_field(tname, fname, level, "formula", formula=formula,
                         display_format=fmt)
        elif kind == "borrowed":
            src = fdoc.get("source")
            if (not isinstance(src, list) or len(src) != 2
                    or not all(isinstance(x, str) for x in src)):
                raise DocumentError(
                    f"borrowed field {fname!r} needs source [table, field]")
            # attach bare; the borrow is declared once all tables exist
            _attach_borrowed(wb, t, fname, level, fmt)
            borrows.append((tname, fname, src[0], src[1]))
        else:
            raise DocumentError(f"unknown field kind {kind!r}")
    for rdoc in tdoc.get("rows", []):
        _load_row(wb, t, rdoc, None)


def _attach_borrowed(wb: Workbook, t: Table, fname, level,
                     fmt: Optional[str]) -> None:
    if not isinstance(fname, str) or t.has_field(fname):
        raise DocumentError(f"bad or duplicate field name {fname!r}")
    if not isinstance(level, int) or not 0 <= level < t.depth:
        raise DocumentError(f"field {fname!r} level {level!r} out of range")
    t._attach_field(Field(name=fname, level=level, kind="borrowed",
                          display_format=fmt))


def _load_row(wb: Workbook, t: Table, rdoc, parent: Optional[str]) -> None:
    if not isinstance(rdoc, dict):
        raise DocumentError(f"rows of table {t.name!r} must be objects")
    level = 0 if parent is None else t.row(parent).level + 1
    if level >= t.depth:
        raise DocumentError(
            f"row nesting exceeds the {t.depth} levels of table {t.name!r}")
    node = t._create_row(parent, None, wb.next_row_id())
    cells = rdoc.get("cells", {})
    if not isinstance(cells, dict):
        raise DocumentError("row cells must be an object")
    for fname, raw in cells.items():
        if not t.has_field(fname):
            raise DocumentError(
                f"row cell names unknown field {fname!r} in table {t.name!r}")
        f = t.field(fname)
        if f.level != level:
            raise DocumentError(
                f"cell {fname!r} stored on level {level} but the field is "
                f"bound to level {f.level} (table {t.name!r})")
        if f.kind == "formula":
            raise DocumentError(
                f"cell {fname!r} is computed and may not be serialized")
        node.cells[fname] = _decode_value(raw, fname)
    for child in rdoc.get("children", []):
        _load_row(wb, t, child, node.id)


def _decode_value(raw, fname: str) -> Value:
    if raw is None or isinstance(raw, (bool, str, Decimal)):
        return raw
    if isinstance(raw, int):
        return Decimal(raw)
    raise DocumentError(f"cell {fname!r} holds unsupported value {raw!r}")


# ---------------------------------------------------------------------------
# CSV exchange


def import_csv(wb: Workbook, table: str, source: Union[str, Path, IO[str]],
               text_fields: tuple[str, ...] = ()) -> int:
    """Import records into a hierarchy, grouping by equality at each level.

    The header maps columns to data fields by exact name. For each record
    the importer walks the levels; at each one it reuses the first child
    of the current parent whose mapped values all equal the record's, or
    creates it. Re-importing the same file is therefore a no-op. Returns
    the number of rows created across all levels.
    """
    t = wb.table(table)
    if any(f.kind == "borrowed" for f in t.fields):
        raise ValidationError(
            f"table {table!r} has borrowed levels and cannot be imported "
            "into")
    if hasattr(source, "read"):
        rows = list(csv.reader(source))  # type: ignore[arg-type]
    else:
        with open(source, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError("CSV needs a header row")
    header, records = rows[0], rows[1:]
    if len(set(header)) != len(header):
        raise ValidationError("CSV header repeats a column name")
    mapped: list[Field] = []
    for col in header:
        f = t.field(col)  # unknown header raises BadAddress
        if f.kind != "data":
            raise ValidationError(
                f"CSV column {col!r} maps to a {f.kind} field; only data "
                "fields are importable")
        mapped.append(f)
    for i, rec in enumerate(records):
        if len(rec) != len(header):
            raise ValidationError(
                f"record {i + 1} has {len(rec)} values, header has "
                f"{len(header)}")

    by_level: dict[int, list[tuple[int, Field]]] = {}
    for idx, f in enumerate(mapped):
        by_level.setdefault(f.level, []).append((idx, f))

    created = 0
    for rec in records:
        typed = [rec[i] if mapped[i].name in text_fields and rec[i] != ""
                 else parse_literal(rec[i]) for i in range(len(mapped))]
        parent: Optional[str] = None
        for level in range(t.depth):
            cols = by_level.get(level, [])
            siblings = (t.root_children if parent is None
                        else t.row(parent).children)
            match = None
            for rid in siblings:
                row = t.row(rid)
                if all(values_equal(row.cells.get(f.name), typed[idx])
                       for idx, f in cols):
                    match = rid
                    break
            if match is None:
                match = wb.insert_row(table, parent)
                created += 1
                for idx, f in cols:
                    wb.set_cell(table, match, f.name, typed[idx])
            elif level == t.depth - 1:
                for idx, f in cols:
                    wb.set_cell(table, match, f.name, typed[idx])
            parent = match
    return created


def export_csv(wb: Workbook, table: str, level: Optional[int] = None,
               raw: bool = False) -> str:
    """One record per row at the chosen level (default deepest), ancestor
    fields repeated, header outer-to-inner, RFC 4180 quoting with LF line
    endings. ``raw`` renders canonically instead of per display format."""
    if wb.pending_events:
        wb.recalculate()
    t = wb.table(table)
    if level is None:
        level = t.depth - 1
    if not 0 <= level < t.depth:
        raise ValidationError(f"level {level} out of range for {table!r}")
    fields = [f for lv in range(level + 1) for f in t.fields_at_level(lv)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f.name for f in fields])
    for row in t.rows_at_level(level):
        writer.writerow([
            render(t.ancestor_value(row, f),
                   None if raw else f.display_format)
            for f in fields])
    return buf.getvalue()
