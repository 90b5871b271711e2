"""Borrow and link relationships between tables.

*Borrowing* pulls the distinct values of a source field into another table
as machine-managed rows. Borrowed fields occupy contiguous levels 0..k of
the borrowing table and must all draw from one source table; nested
borrowed levels constrain each other, so the Year children under a sales
code are exactly the years in which that code actually appears. Rows stay
synchronized with the source: :func:`sync_borrows` inserts missing rows,
deletes rows whose value has disappeared (with their subtrees), and
preserves the ids and sibling data cells of rows that persist.

*Linking* declares that a local data field's values are keys into a
foreign field. Links narrow the scope of every cross-table reference
between the two tables to the matching rows, and supply the editor's
dropdown value lists.

Borrowed and linked data is referenced, never copied: borrowed cells are
repaired to source truth on every sync, and link lookups read the foreign
table directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import TYPE_CHECKING, Optional

from .errors import BadAddress, ValidationError
from .values import Value, value_key, values_equal

if TYPE_CHECKING:
    from .model import Table, Workbook


@dataclass(frozen=True)
class BorrowSpec:
    target_table: str
    target_field: str
    source_table: str
    source_field: str


@dataclass(frozen=True)
class LinkSpec:
    local_table: str
    local_field: str
    foreign_table: str
    foreign_field: str


@dataclass
class RelationSet:
    borrows: list[BorrowSpec] = dc_field(default_factory=list)
    links: list[LinkSpec] = dc_field(default_factory=list)

    def borrows_into(self, table: str) -> list[BorrowSpec]:
        return [b for b in self.borrows if b.target_table == table]

    def borrow_for(self, table: str, field: str) -> Optional[BorrowSpec]:
        for b in self.borrows:
            if b.target_table == table and b.target_field == field:
                return b
        return None

    def links_from(self, table: str) -> list[LinkSpec]:
        return [l for l in self.links if l.local_table == table]

    def links_on(self, table: str, field: str) -> list[LinkSpec]:
        return [l for l in self.links
                if l.local_table == table and l.local_field == field]


@dataclass
class SyncDiff:
    """Row churn produced by one synchronization pass. Deleted ids include
    every node of each removed subtree."""

    inserted: list[tuple[str, str]] = dc_field(default_factory=list)
    deleted: list[tuple[str, str]] = dc_field(default_factory=list)

    def __bool__(self) -> bool:
        return bool(self.inserted or self.deleted)

    def extend(self, other: "SyncDiff") -> None:
        self.inserted.extend(other.inserted)
        self.deleted.extend(other.deleted)


def declare_borrow(wb: "Workbook", target_table: str, target_field: str,
                   source_table: str, source_field: str, *,
                   _bump: bool = True, _sync: bool = True) -> RelationSet:
    """Register a borrow and synchronize immediately.

    The target must be a borrowed field without an existing borrow; the
    source must name an existing non-formula field. Enforces the
    contiguous-prefix rule (a borrow at level L needs borrowed levels
    0..L-1 from the same source table, one borrowed field per level) and
    rejects borrow dependencies that would cycle between tables.
    """
    t = wb.table(target_table)
    f = t.field(target_field)
    if f.kind != "borrowed":
        raise ValidationError(
            f"field {target_field!r} is {f.kind}, not borrowed")
    if wb.relations.borrow_for(target_table, target_field) is not None:
        raise ValidationError(
            f"field {target_table}.{target_field} already has a borrow")
    try:
        src_table = wb.table(source_table)
        src_field = src_table.field(source_field)
    except BadAddress as exc:
        raise BadAddress(
            f"borrow source {source_table}!{source_field} does not exist: "
            f"{exc}", address=f"{source_table}.{source_field}") from None
    if src_field.kind == "formula":
        raise ValidationError(
            "only plain fields can be borrowed, "
            f"{source_table}!{source_field} is a formula")

    level = f.level
    for other in t.fields_at_level(level):
        if other.kind == "borrowed" and other.name != target_field \
                and wb.relations.borrow_for(target_table, other.name):
            raise ValidationError(
                f"level {t.levels[level]!r} already has a borrowed field")
    for lv in range(level):
        specs = [b for b in wb.relations.borrows_into(target_table)
                 if t.field(b.target_field).level == lv]
        if not specs:
            raise ValidationError(
                f"borrow at level {level} requires a borrowed field at "
                f"every shallower level; level {lv} has none")
        if specs[0].source_table != source_table:
            raise ValidationError(
                "all borrowed levels of a table must draw from the same "
                f"source table ({specs[0].source_table!r} != "
                f"{source_table!r})")
    if _borrow_path_exists(wb, source_table, target_table):
        raise ValidationError(
            f"borrowing {source_table!r} into {target_table!r} would create "
            "a borrow cycle")

    wb.relations.borrows.append(BorrowSpec(
        target_table, target_field, source_table, source_field))
    f.borrow_source = (source_table, source_field)
    wb.record_event(("schema",))
    if _sync:
        sync_borrows(wb)
    if _bump:
        wb._bump()
    return wb.relations


def _borrow_path_exists(wb: "Workbook", start: str, goal: str) -> bool:
    # Edges run borrower <- source; walk source -> its sources.
    stack, seen = [start], set()
    while stack:
        node = stack.pop()
        if node == goal:
            return True
        if node in seen:
            continue
        seen.add(node)
        stack.extend(b.source_table for b in wb.relations.borrows
                     if b.target_table == node)
    return False


def declare_link(wb: "Workbook", local_table: str, local_field: str,
                 foreign_table: str, foreign_field: str, *,
                 _bump: bool = True) -> RelationSet:
    """Register a link. The local endpoint must be a data field; both
    endpoints must exist. Existing local values are not rewritten; values
    missing from the foreign key set simply report as unmatched."""
    lt = wb.table(local_table)
    lf = lt.field(local_field)
    wb.table(foreign_table).field(foreign_field)
    if lf.kind != "data":
        raise ValidationError(
            f"link local field {local_table}.{local_field} must be a data "
            f"field, not {lf.kind}")
    spec = LinkSpec(local_table, local_field, foreign_table, foreign_field)
    if spec in wb.relations.links:
        raise ValidationError("link already declared")
    wb.relations.links.append(spec)
    wb.record_event(("schema",))
    if _bump:
        wb._bump()
    return wb.relations


def valid_values(wb: "Workbook", link: LinkSpec) -> list[Value]:
    """Distinct non-Empty values of the link's foreign field, in document
    order. Drives dropdowns and unmatched flagging."""
    ft = wb.table(link.foreign_table)
    ff = ft.field(link.foreign_field)
    out: list[Value] = []
    seen = set()
    for row in ft.rows_at_level(ff.level):
        v = row.cells.get(ff.name)
        if v is None:
            continue
        k = value_key(v)
        if k not in seen:
            seen.add(k)
            out.append(v)
    return out


def is_unmatched(wb: "Workbook", table: str, row_id: str,
                 field_name: str) -> bool:
    """True when the cell sits on the local side of a link and holds a
    non-Empty value absent from some linked foreign key set. Computed on
    demand so it can never go stale against foreign edits."""
    links = wb.relations.links_on(table, field_name)
    if not links:
        return False
    v = wb.table(table).row(row_id).cells.get(field_name)
    if v is None:
        return False
    for link in links:
        keys = {value_key(x) for x in valid_values(wb, link)}
        if value_key(v) not in keys:
            return True
    return False


def sync_borrows(wb: "Workbook") -> SyncDiff:
    """Repair every borrowed table to match its source, to fixpoint.

    At each borrowed level, the required row set under a parent chain is
    the distinct values of the source field over source rows satisfying
    the ancestor borrow constraints, in first-appearance order of a
    depth-first source traversal. Missing rows are inserted, stale rows
    are deleted with their subtrees, surviving rows keep their ids and any
    user data in sibling fields. Structural repairs never fail.
    """
    total = SyncDiff()
    # Borrow dependencies are acyclic, so passes reach a fixpoint in at
    # most the depth of the source chain.
    for _ in range(max(1, len(wb.tables))):
        diff = _sync_pass(wb)
        total.extend(diff)
        if not diff:
            break
    return total


def _sync_pass(wb: "Workbook") -> SyncDiff:
    diff = SyncDiff()
    for t in wb.tables.values():
        specs = wb.relations.borrows_into(t.name)
        if not specs:
            continue
        by_level: dict[int, BorrowSpec] = {
            t.field(b.target_field).level: b for b in specs}
        max_level = max(by_level)
        src = wb.table(specs[0].source_table)
        src_fields = [src.field(by_level[lv].source_field)
                      for lv in range(max_level + 1)]
        changed = _reconcile_level(wb, t, src, by_level, src_fields,
                                   0, max_level, None, [], diff)
        if changed:
            wb.record_event(("rows", t.name))
    return diff


def _required_values(src: "Table", src_fields, level: int,
                     constraints: list) -> list[Value]:
    """Distinct non-Empty source values at ``level`` given ancestor
    constraints [(field, value), ...], first-appearance order."""
    scan_level = max(f.level for f in src_fields[: level + 1])
    out: list[Value] = []
    seen = set()
    for row in src.rows_at_level(scan_level):
        ok = True
        for f, want in constraints:
            have = src.ancestor_value(row, f)
            if have is None or not values_equal(have, want):
                ok = False
                break
        if not ok:
            continue
        v = src.ancestor_value(row, src_fields[level])
        if v is None:
            continue
        k = value_key(v)
        if k not in seen:
            seen.add(k)
            out.append(v)
    return out


def _reconcile_level(wb: "Workbook", t: "Table", src: "Table",
                     by_level: dict, src_fields, level: int, max_level: int,
                     parent_id: Optional[str], constraints: list,
                     diff: SyncDiff) -> bool:
    borrowed_name = by_level[level].target_field
    required = _required_values(src, src_fields, level, constraints)

    siblings = (t.root_children if parent_id is None
                else t.row(parent_id).children)
    existing: dict = {}
    stale: list[str] = []
    for rid in siblings:
        v = t.row(rid).cells.get(borrowed_name)
        k = value_key(v)
        if v is None or k in existing:
            stale.append(rid)  # duplicate or valueless borrowed row
        else:
            existing[k] = rid

    changed = False
    new_order: list[str] = []
    for v in required:
        rid = existing.pop(value_key(v), None)
        if rid is None:
            node = t._create_row(parent_id, None, wb.next_row_id())
            node.cells[borrowed_name] = v
            rid = node.id
            diff.inserted.append((t.name, rid))
            changed = True
        new_order.append(rid)

    for rid in list(existing.values()) + stale:
        for removed in t._remove_subtree(rid):
            diff.deleted.append((t.name, removed))
        changed = True

    if siblings != new_order:
        changed = True
    if parent_id is None:
        t.root_children[:] = new_order
    else:
        t.row(parent_id).children[:] = new_order

    if level < max_level:
        for rid in new_order:
            v = t.row(rid).cells.get(borrowed_name)
            child_constraints = constraints + [(src_fields[level], v)]
            if _reconcile_level(wb, t, src, by_level, src_fields, level + 1,
                                max_level, rid, child_constraints, diff):
                changed = True
    return changed
