"""Reference scoping: which cells a reference denotes, seen from an origin.

A local reference to a deeper field means "the cells beneath me in the
hierarchy"; to the same level, the origin row itself; to a shallower
field, the unique ancestor. A cross-table reference starts from every row
of the target field's level and is narrowed by one join constraint per
borrow and per link declared between the two tables; with no relations it
spans the whole foreign field.

Constraint values are read from a row *or its ancestor* at the constraint
field's level, so a link field at line level can constrain lookups from
either the line or anywhere beneath it. Empty key values match nothing.

Resolution is deterministic and never decides scalar-versus-set
expectations; the consuming context in :mod:`mtab.engine` does that.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

from .values import Value, values_equal

if TYPE_CHECKING:
    from .model import CellAddress, Workbook

__all__ = ["CellSet", "JoinConstraint", "resolve_local", "resolve_cross",
           "join_constraints"]


@dataclass(frozen=True)
class JoinConstraint:
    """Keep only target rows whose ``foreign_field`` value equals the
    origin row's ``local_field`` value."""

    local_field: str
    foreign_field: str
    source: str  # "borrow" or "link"


@dataclass
class CellSet:
    """An ordered set of same-table same-field cells, in document order."""

    table: str
    field: str
    row_ids: list[str]
    origin: "CellAddress"

    def __len__(self) -> int:
        return len(self.row_ids)

    def values(self, wb: "Workbook") -> list[Value]:
        t = wb.table(self.table)
        return [t.row(rid).cells.get(self.field) for rid in self.row_ids]


def resolve_local(wb: "Workbook", field_name: str,
                  origin: "CellAddress") -> CellSet:
    """Resolve a same-table reference from ``origin``.

    Deeper target: all descendant rows at the target level, document
    order. Same level: the origin row. Shallower: the single ancestor.
    Unknown fields raise BadAddress (#REF).
    """
    t = wb.table(origin.table)
    f = t.field(field_name)
    row = t.row(origin.row)
    if f.level > row.level:
        rows = [r.id for r in t.descendants_at(row, f.level)]
    elif f.level == row.level:
        rows = [row.id]
    else:
        anc = t.ancestor_at(row, f.level)
        assert anc is not None
        rows = [anc.id]
    return CellSet(origin.table, field_name, rows, origin)


def join_constraints(wb: "Workbook", origin_table: str,
                     target_table: str) -> list[JoinConstraint]:
    """One constraint per borrowed field in the origin table sourced from
    the target table, then one per link from origin to target, in
    declaration order. Empty when the tables are unrelated."""
    out: list[JoinConstraint] = []
    for b in wb.relations.borrows:
        if b.target_table == origin_table and b.source_table == target_table:
            out.append(JoinConstraint(b.target_field, b.source_field,
                                      "borrow"))
    for l in wb.relations.links:
        if l.local_table == origin_table and l.foreign_table == target_table:
            out.append(JoinConstraint(l.local_field, l.foreign_field, "link"))
    return out


def resolve_cross(wb: "Workbook", table_name: str, field_name: str,
                  origin: "CellAddress") -> CellSet:
    """Resolve a cross-table reference from ``origin``.

    Starts from all rows of the target table at the target field's level
    and applies every join constraint between the tables. An origin whose
    row is shallower than a constraint's local field, or whose key value
    is Empty, matches nothing.
    """
    target = wb.table(table_name)
    f = target.field(field_name)
    origin_table = wb.table(origin.table)
    origin_row = origin_table.row(origin.row)

    candidates = target.rows_at_level(f.level)
    for c in join_constraints(wb, origin.table, table_name):
        local_f = origin_table.field(c.local_field)
        want = origin_table.ancestor_value(origin_row, local_f)
        if want is None:
            candidates = []
            break
        foreign_f = target.field(c.foreign_field)
        kept = []
        for r in candidates:
            have = target.ancestor_value(r, foreign_f)
            if have is not None and values_equal(have, want):
                kept.append(r)
        candidates = kept
    return CellSet(table_name, field_name, [r.id for r in candidates], origin)
