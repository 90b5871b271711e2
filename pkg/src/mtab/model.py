"""The workbook document model.

A :class:`Workbook` owns named :class:`Table` objects. A table is a
hierarchy of levels; each level owns fields, and rows form a tree whose
depth equals the number of levels. A field is bound to exactly one level
and is one of three kinds:

* ``data``: user-writable cells,
* ``formula``: one formula for the whole field, cells machine-computed,
* ``borrowed``: machine-managed rows mirroring the distinct values of a
  field in another table (see :mod:`mtab.relations`).

Formula and borrowed cells are machine-owned: :meth:`Workbook.set_cell`
rejects writes to them. Row identity is a stable opaque id assigned by the
workbook; ids survive edits elsewhere in the tree but are not persisted.

Mutations append coarse invalidation events to ``pending_events`` which
:mod:`mtab.engine` folds into a dirty field set at recalculation time, and
every successful public mutation bumps ``version`` by exactly one.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from decimal import Decimal
from typing import Iterator, NamedTuple, Optional

from .errors import BadAddress, ValidationError
from .formula import Expr, FormulaParseError, parse as parse_formula
from .relations import RelationSet
from .values import Value, validate_display_format

FIELD_KINDS = ("data", "formula", "borrowed")


class CellAddress(NamedTuple):
    table: str
    row: str
    field: str

    def __str__(self) -> str:
        return f"{self.table}[{self.row}].{self.field}"


@dataclass
class Field:
    name: str
    level: int
    kind: str
    formula: Optional[Expr] = None
    formula_source: Optional[str] = None
    parse_error: Optional[str] = None
    borrow_source: Optional[tuple[str, str]] = None
    display_format: Optional[str] = None


@dataclass(slots=True)
class RowNode:
    id: str
    level: int
    parent: Optional[str]  # None means the virtual root
    children: list[str] = dc_field(default_factory=list)
    cells: dict[str, Value] = dc_field(default_factory=dict)


def _check_name(kind: str, name: str) -> None:
    if not isinstance(name, str) or not name:
        raise ValidationError(f"{kind} name must be a non-empty string")
    if "]" in name:
        raise ValidationError(f"{kind} name {name!r} may not contain ']'")


class Table:
    """A named hierarchy of levels with an ordered field list and a row
    tree. Level indices run 0..depth-1; level-0 rows hang off a virtual
    root."""

    def __init__(self, name: str, levels: list[str]) -> None:
        self.name = name
        self.levels = list(levels)
        self.fields: list[Field] = []
        self._by_name: dict[str, Field] = {}
        self._rows: dict[str, RowNode] = {}
        self.root_children: list[str] = []

    @property
    def depth(self) -> int:
        return len(self.levels)

    # -- fields ----------------------------------------------------------

    def has_field(self, name: str) -> bool:
        return name in self._by_name

    def field(self, name: str) -> Field:
        try:
            return self._by_name[name]
        except KeyError:
            raise BadAddress(f"no field {name!r} in table {self.name!r}",
                             address=f"{self.name}.{name}") from None

    def fields_at_level(self, level: int) -> list[Field]:
        return [f for f in self.fields if f.level == level]

    def _attach_field(self, f: Field) -> None:
        self.fields.append(f)
        self._by_name[f.name] = f

    def _detach_field(self, name: str) -> None:
        self.fields.remove(self._by_name.pop(name))

    # -- rows ------------------------------------------------------------

    def row(self, row_id: str) -> RowNode:
        try:
            return self._rows[row_id]
        except KeyError:
            raise BadAddress(f"no row {row_id!r} in table {self.name!r}",
                             address=f"{self.name}[{row_id}]") from None

    def has_row(self, row_id: str) -> bool:
        return row_id in self._rows

    def walk(self, start: Optional[str] = None) -> Iterator[RowNode]:
        """Depth-first pre-order traversal: the document order."""
        stack = list(reversed(
            self.root_children if start is None else [start]))
        while stack:
            node = self._rows[stack.pop()]
            yield node
            stack.extend(reversed(node.children))

    def rows_at_level(self, level: int) -> list[RowNode]:
        return [r for r in self.walk() if r.level == level]

    def ancestor_at(self, row: RowNode, level: int) -> Optional[RowNode]:
        """The ancestor-or-self of ``row`` at ``level``; None if ``level``
        is deeper than the row."""
        node = row
        while node.level > level:
            assert node.parent is not None
            node = self._rows[node.parent]
        return node if node.level == level else None

    def ancestor_value(self, row: RowNode, f: Field) -> Value:
        """Read field ``f`` from ``row`` or its ancestor at f's level.
        Returns Empty when the row is shallower than the field."""
        node = self.ancestor_at(row, f.level)
        if node is None:
            return None
        return node.cells.get(f.name)

    def descendants_at(self, row: RowNode, level: int) -> list[RowNode]:
        return [r for r in self.walk(row.id) if r.level == level]

    def subtree_ids(self, row_id: str) -> list[str]:
        return [r.id for r in self.walk(row_id)]

    def _create_row(self, parent: Optional[str], index: Optional[int],
                    row_id: str) -> RowNode:
        if parent is None:
            level = 0
            siblings = self.root_children
        else:
            parent_row = self.row(parent)
            level = parent_row.level + 1
            if level >= self.depth:
                raise ValidationError(
                    f"table {self.name!r} has no level below "
                    f"{self.levels[parent_row.level]!r}")
            siblings = parent_row.children
        node = RowNode(id=row_id, level=level, parent=parent)
        self._rows[row_id] = node
        if index is None:
            siblings.append(row_id)
        else:
            siblings.insert(index, row_id)
        return node

    def _remove_subtree(self, row_id: str) -> list[str]:
        removed = self.subtree_ids(row_id)
        node = self._rows[row_id]
        siblings = (self.root_children if node.parent is None
                    else self._rows[node.parent].children)
        siblings.remove(row_id)
        for rid in removed:
            del self._rows[rid]
        return removed


class Workbook:
    """A named, versioned collection of tables plus the relation set that
    ties them together. All mutating operations are expected to be
    externally serialized (single-writer); reads between mutations may run
    concurrently."""

    def __init__(self, name: str = "workbook") -> None:
        self.name = name
        self.tables: dict[str, Table] = {}
        self.version = 0
        self.relations = RelationSet()
        self.pending_events: list[tuple] = []
        self.last_load_result = None
        self._graph = None
        self._row_seq = 0

    # -- plumbing --------------------------------------------------------

    def table(self, name: str) -> Table:
        try:
            return self.tables[name]
        except KeyError:
            raise BadAddress(f"no table {name!r}", address=name) from None

    def next_row_id(self) -> str:
        self._row_seq += 1
        return f"r{self._row_seq}"

    def record_event(self, event: tuple) -> None:
        self.pending_events.append(event)

    def _bump(self) -> None:
        self.version += 1

    # -- structural operations --------------------------------------------

    def add_table(self, name: str, level_names: list[str]) -> Table:
        _check_name("table", name)
        if name in self.tables:
            raise ValidationError(f"table {name!r} already exists")
        if not level_names:
            raise ValidationError("a table needs at least one level")
        if len(set(level_names)) != len(level_names):
            raise ValidationError("level names must be distinct")
        for ln in level_names:
            if not ln or not isinstance(ln, str):
                raise ValidationError("level names must be non-empty strings")
        t = Table(name, list(level_names))
        self.tables[name] = t
        self.record_event(("schema",))
        self._bump()
        return t

    def add_field(self, table: str, name: str, level: int, kind: str,
                  formula: Optional[str] = None,
                  source: Optional[tuple[str, str]] = None,
                  display_format: Optional[str] = None) -> Field:
        t = self.table(table)
        _check_name("field", name)
        if t.has_field(name):
            raise ValidationError(
                f"field {name!r} already exists in table {table!r}")
        if not isinstance(level, int) or not 0 <= level < t.depth:
            raise ValidationError(
                f"level {level!r} out of range for table {table!r} "
                f"(depth {t.depth})")
        if kind not in FIELD_KINDS:
            raise ValidationError(f"unknown field kind {kind!r}")
        if kind != "formula" and formula is not None:
            raise ValidationError(f"{kind} field cannot carry a formula")
        if kind != "borrowed" and source is not None:
            raise ValidationError(f"{kind} field cannot carry a borrow source")
        if kind == "formula" and formula is None:
            raise ValidationError("formula field needs a formula")
        if kind == "borrowed" and source is None:
            raise ValidationError("borrowed field needs a borrow source")
        if display_format is not None:
            validate_display_format(display_format)

        f = Field(name=name, level=level, kind=kind,
                  display_format=display_format)
        if kind == "formula":
            assert formula is not None
            _assign_formula(f, formula)
        t._attach_field(f)
        if kind == "borrowed":
            from . import relations
            assert source is not None
            try:
                relations.declare_borrow(self, table, name, source[0],
                                         source[1], _bump=False)
            except Exception:
                t._detach_field(name)
                raise
        self.record_event(("schema",))
        self._bump()
        return f

    def set_formula(self, table: str, field_name: str, formula: str) -> None:
        f = self.table(table).field(field_name)
        if f.kind != "formula":
            raise ValidationError(
                f"field {field_name!r} is {f.kind}, not formula")
        _assign_formula(f, formula)
        self.record_event(("schema",))
        self._bump()

    # -- row operations ----------------------------------------------------

    def insert_row(self, table: str, parent: Optional[str] = None,
                   index: Optional[int] = None) -> str:
        t = self.table(table)
        level = 0 if parent is None else t.row(parent).level + 1
        if level < t.depth and any(
                f.kind == "borrowed" for f in t.fields_at_level(level)):
            raise ValidationError(
                f"level {t.levels[level]!r} of table {table!r} is borrowed "
                "and machine-managed; rows cannot be inserted by hand")
        node = t._create_row(parent, index, self.next_row_id())
        self.record_event(("rows", table))
        self._bump()
        return node.id

    def delete_row(self, table: str, row_id: str) -> int:
        t = self.table(table)
        row = t.row(row_id)
        if any(f.kind == "borrowed" for f in t.fields_at_level(row.level)):
            raise ValidationError(
                f"row {row_id!r} is on the borrowed level "
                f"{t.levels[row.level]!r} and is machine-managed")
        removed = t._remove_subtree(row_id)
        self.record_event(("rows", table))
        self._bump()
        return len(removed)

    # -- cell operations ---------------------------------------------------

    def set_cell(self, table: str, row_id: str, field_name: str,
                 value: Value) -> None:
        t = self.table(table)
        row = t.row(row_id)
        f = t.field(field_name)
        if f.kind != "data":
            raise ValidationError(
                f"cell {CellAddress(table, row_id, field_name)} is "
                f"machine-owned ({f.kind} field) and cannot be written")
        if f.level != row.level:
            raise BadAddress(
                f"field {field_name!r} is bound to level "
                f"{t.levels[f.level]!r}, not the row's level "
                f"{t.levels[row.level]!r}",
                address=str(CellAddress(table, row_id, field_name)))
        row.cells[field_name] = _check_literal(value)
        self.record_event(("cell", table, field_name))
        self._bump()

    def get_cell(self, table: str, row_id: str, field_name: str) -> Value:
        """Read a cell. If mutations are pending this recalculates first,
        so formula cells are never observed stale."""
        if self.pending_events:
            self.recalculate()
        return self.peek_cell(table, row_id, field_name)

    def peek_cell(self, table: str, row_id: str, field_name: str) -> Value:
        """Read a cell without triggering recalculation."""
        t = self.table(table)
        row = t.row(row_id)
        f = t.field(field_name)
        if f.level != row.level:
            raise BadAddress(
                f"field {field_name!r} is not bound to the row's level",
                address=str(CellAddress(table, row_id, field_name)))
        return row.cells.get(field_name)

    # -- delegates ---------------------------------------------------------

    def declare_borrow(self, target: tuple[str, str],
                       source: tuple[str, str]) -> RelationSet:
        from . import relations
        return relations.declare_borrow(
            self, target[0], target[1], source[0], source[1])

    def declare_link(self, local: tuple[str, str],
                     foreign: tuple[str, str]) -> RelationSet:
        from . import relations
        return relations.declare_link(
            self, local[0], local[1], foreign[0], foreign[1])

    def recalculate(self, scope: str = "dirty"):
        from . import engine
        return engine.recalculate(self, scope)

    def save(self, destination) -> int:
        from . import storage
        return storage.save(self, destination)


def _assign_formula(f: Field, text: str) -> None:
    f.formula_source = text
    try:
        f.formula = parse_formula(text)
        f.parse_error = None
    except FormulaParseError as exc:
        f.formula = None
        f.parse_error = str(exc)


def _check_literal(value) -> Value:
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, int):
        value = Decimal(value)
    if isinstance(value, Decimal):
        if not value.is_finite():
            raise ValidationError("cell numbers must be finite")
        return value
    raise ValidationError(
        f"{value!r} is not a literal cell value (number, text, boolean, "
        "or Empty)")


def check_integrity(wb: Workbook) -> None:
    """Full-walk structural audit used by tests: parent/child pointers are
    mutually consistent and no row stores a cell for another level's
    field."""
    for t in wb.tables.values():
        seen: set[str] = set()
        for rid in t.root_children:
            row = t.row(rid)
            assert row.parent is None and row.level == 0
        for row in t.walk():
            assert row.id not in seen, f"row {row.id} reached twice"
            seen.add(row.id)
            if row.parent is not None:
                parent = t.row(row.parent)
                assert row.id in parent.children
                assert row.level == parent.level + 1
            for child in row.children:
                assert t.row(child).parent == row.id
            level_fields = {f.name for f in t.fields_at_level(row.level)}
            for name in row.cells:
                assert name in level_fields, (
                    f"cell {name!r} stored on level {row.level} row")
        assert seen == set(t._rows), "unreachable rows present"
