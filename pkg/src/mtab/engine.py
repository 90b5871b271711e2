"""Formula evaluation and dependency-driven incremental recalculation.

Dependency granularity is the field: each formula field is a vertex with
edges to every field it references, to both endpoints of any join
constraint its cross-references traverse, and from borrowed fields to
their sources. Mutations leave coarse events on the workbook; a
recalculation pass first synchronizes borrows, folds the events into a
dirty field set through the reverse edges, then evaluates dirty fields in
topological order (rows in document order within a field). Fields on a
dependency cycle get #CYCLE in every cell without evaluation; everything
downstream consumes the error normally.

Evaluation context rules: an aggregate argument that is a bare reference
consumes the whole resolved cell set; every other position is scalar, so
a one-cell set coerces to its value, an empty set is #NOMATCH, and a
larger one is #MULTI. Empty coerces to 0 in scalar arithmetic but is
excluded from aggregates. Errors propagate left to right.
"""

from __future__ import annotations

import decimal
from dataclasses import dataclass, field as dc_field
from decimal import Decimal
from typing import Union

from .errors import BadAddress
from .formula import (AGGREGATES, Binary, BoolLit, Call, CrossRef, Expr,
                      LocalRef, NumberLit, TextLit, Unary, collect_refs)
from .model import CellAddress, Workbook
from .relations import sync_borrows
from .scope import CellSet, join_constraints, resolve_cross, resolve_local
from .values import (CYCLE, DIV0, MULTI, NOMATCH, PARSE, REF, TYPE,
                     ErrorValue, Value, is_error, is_number, is_text,
                     values_equal)

FieldKey = tuple[str, str]  # (table name, field name)


@dataclass
class DependencyGraph:
    deps: dict[FieldKey, list[FieldKey]]
    rdeps: dict[FieldKey, list[FieldKey]]
    formula_fields: list[FieldKey]
    order: list[list[FieldKey]]  # SCCs, dependencies before dependents
    cyclic: set[FieldKey]


@dataclass
class CalcResult:
    """Outcome of one recalculation: per-cell changes (each address at most
    once), the number of formula evaluations performed, and the borrowed
    rows the synchronization step inserted or deleted."""

    changed: list[tuple[CellAddress, Value, Value]] = dc_field(
        default_factory=list)
    evaluated_count: int = 0
    rows_inserted: list[tuple[str, str]] = dc_field(default_factory=list)
    rows_deleted: list[tuple[str, str]] = dc_field(default_factory=list)


# ---------------------------------------------------------------------------
# dependency graph


def rebuild_dependencies(wb: Workbook) -> DependencyGraph:
    """Derive the field-level graph from every formula and borrow. Cycles
    are recorded, not rejected."""
    deps: dict[FieldKey, list[FieldKey]] = {}
    formula_fields: list[FieldKey] = []

    def add_edge(frm: FieldKey, to: FieldKey) -> None:
        lst = deps.setdefault(frm, [])
        if to not in lst:
            lst.append(to)
        deps.setdefault(to, [])

    for t in wb.tables.values():
        for f in t.fields:
            key = (t.name, f.name)
            deps.setdefault(key, [])
            if f.kind == "formula":
                formula_fields.append(key)
                if f.formula is None:
                    continue
                for ref in collect_refs(f.formula):
                    if isinstance(ref, LocalRef):
                        add_edge(key, (t.name, ref.name))
                    else:
                        add_edge(key, (ref.table, ref.field))
                        if ref.table in wb.tables:
                            for c in join_constraints(wb, t.name, ref.table):
                                add_edge(key, (t.name, c.local_field))
                                add_edge(key, (ref.table, c.foreign_field))
            elif f.kind == "borrowed" and f.borrow_source is not None:
                add_edge(key, f.borrow_source)

    rdeps: dict[FieldKey, list[FieldKey]] = {k: [] for k in deps}
    for frm, tos in deps.items():
        for to in tos:
            rdeps[to].append(frm)

    sccs = _tarjan(list(deps), deps)
    cyclic: set[FieldKey] = set()
    for scc in sccs:
        if len(scc) > 1 or scc[0] in deps.get(scc[0], []):
            cyclic.update(scc)
    return DependencyGraph(deps=deps, rdeps=rdeps,
                           formula_fields=formula_fields,
                           order=sccs, cyclic=cyclic)


def _tarjan(vertices: list[FieldKey],
            deps: dict[FieldKey, list[FieldKey]]) -> list[list[FieldKey]]:
    """Iterative Tarjan; emits SCCs with dependencies before dependents."""
    index: dict[FieldKey, int] = {}
    low: dict[FieldKey, int] = {}
    onstack: set[FieldKey] = set()
    stack: list[FieldKey] = []
    sccs: list[list[FieldKey]] = []
    counter = 0

    for root in vertices:
        if root in index:
            continue
        work: list[tuple[FieldKey, int]] = [(root, 0)]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        onstack.add(root)
        while work:
            node, i = work[-1]
            targets = deps.get(node, [])
            if i < len(targets):
                work[-1] = (node, i + 1)
                w = targets[i]
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    onstack.add(w)
                    work.append((w, 0))
                elif w in onstack:
                    low[node] = min(low[node], index[w])
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                scc: list[FieldKey] = []
                while True:
                    w = stack.pop()
                    onstack.discard(w)
                    scc.append(w)
                    if w == node:
                        break
                sccs.append(scc)
    return sccs


# ---------------------------------------------------------------------------
# evaluation


def evaluate(wb: Workbook, expr: Expr, origin: CellAddress) -> Value:
    """Evaluate ``expr`` as seen from ``origin``. Never raises for
    data-shaped failures; they come back as ErrorValues."""
    return _eval(wb, expr, origin)


def _resolve(wb: Workbook, ref: Union[LocalRef, CrossRef],
             origin: CellAddress) -> Union[CellSet, ErrorValue]:
    try:
        if isinstance(ref, LocalRef):
            return resolve_local(wb, ref.name, origin)
        return resolve_cross(wb, ref.table, ref.field, origin)
    except BadAddress as exc:
        return ErrorValue(REF, str(exc))


def _eval(wb: Workbook, e: Expr, origin: CellAddress) -> Value:
    if isinstance(e, NumberLit):
        return e.value
    if isinstance(e, TextLit):
        return e.value
    if isinstance(e, BoolLit):
        return e.value
    if isinstance(e, (LocalRef, CrossRef)):
        cs = _resolve(wb, e, origin)
        if isinstance(cs, ErrorValue):
            return cs
        if len(cs) == 0:
            return ErrorValue(NOMATCH, f"no cell in scope for {cs.field!r}")
        if len(cs) > 1:
            return ErrorValue(
                MULTI, f"{len(cs)} cells in scope for {cs.field!r} where "
                "one was needed")
        return cs.values(wb)[0]
    if isinstance(e, Unary):
        v = _eval(wb, e.operand, origin)
        if is_error(v):
            return v
        n = _to_number(v)
        if is_error(n):
            return n
        return -n
    if isinstance(e, Binary):
        left = _eval(wb, e.left, origin)
        if is_error(left):
            return left
        right = _eval(wb, e.right, origin)
        if is_error(right):
            return right
        if e.op in ("=", "<>", "<", "<=", ">", ">="):
            return _compare(e.op, left, right)
        return _arith(e.op, left, right)
    if isinstance(e, Call):
        return _call(wb, e, origin)
    raise TypeError(f"not an Expr: {e!r}")


def _to_number(v: Value) -> Value:
    """Scalar numeric coercion: Empty is 0, text and booleans are #TYPE."""
    if v is None:
        return Decimal(0)
    if is_number(v):
        return v
    return ErrorValue(TYPE, f"expected a number, got {v!r}")


def _arith(op: str, left: Value, right: Value) -> Value:
    ln = _to_number(left)
    if is_error(ln):
        return ln
    rn = _to_number(right)
    if is_error(rn):
        return rn
    try:
        if op == "+":
            return ln + rn
        if op == "-":
            return ln - rn
        if op == "*":
            return ln * rn
        if op == "/":
            if rn == 0:
                return ErrorValue(DIV0, "division by zero")
            return ln / rn
        if op == "^":
            if ln == 0 and rn < 0:
                return ErrorValue(DIV0, "zero raised to a negative power")
            result = ln ** rn
            if not result.is_finite():
                return ErrorValue(TYPE, "numeric overflow")
            return result
    except decimal.DivisionByZero:
        return ErrorValue(DIV0, "division by zero")
    except (decimal.InvalidOperation, decimal.Overflow) as exc:
        return ErrorValue(TYPE, f"numeric domain error: {exc!r}")
    raise ValueError(f"unknown operator {op!r}")


def _compare(op: str, left: Value, right: Value) -> Value:
    # Empty coerces toward the other side: 0 against numbers, "" against
    # text; two Empties are equal; Empty against a boolean is #TYPE.
    if left is None and right is None:
        left = right = Decimal(0)
    elif left is None:
        if is_number(right):
            left = Decimal(0)
        elif is_text(right):
            left = ""
        else:
            return ErrorValue(TYPE, "cannot compare Empty with a boolean")
    elif right is None:
        if is_number(left):
            right = Decimal(0)
        elif is_text(left):
            right = ""
        else:
            return ErrorValue(TYPE, "cannot compare Empty with a boolean")

    if isinstance(left, bool) or isinstance(right, bool):
        if not (isinstance(left, bool) and isinstance(right, bool)):
            return ErrorValue(TYPE, "cannot compare a boolean with "
                                    f"{right!r}" if isinstance(left, bool)
                              else f"cannot compare {left!r} with a boolean")
        if op == "=":
            return left is right
        if op == "<>":
            return left is not right
        return ErrorValue(TYPE, "booleans are unordered")
    if is_number(left) and is_number(right) or (
            is_text(left) and is_text(right)):
        if op == "=":
            return left == right
        if op == "<>":
            return left != right
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        return left >= right
    return ErrorValue(TYPE,
                      f"cannot compare {type(left).__name__} with "
                      f"{type(right).__name__}")


def _call(wb: Workbook, e: Call, origin: CellAddress) -> Value:
    if e.name in AGGREGATES:
        flat: list[Value] = []
        for arg in e.args:
            if isinstance(arg, (LocalRef, CrossRef)):
                cs = _resolve(wb, arg, origin)
                if isinstance(cs, ErrorValue):
                    return cs
                flat.extend(cs.values(wb))
            else:
                flat.append(_eval(wb, arg, origin))
        for v in flat:
            if is_error(v):
                return v
        return _aggregate(e.name, flat)
    if e.name == "IF":
        cond = _eval(wb, e.args[0], origin)
        if is_error(cond):
            return cond
        if not isinstance(cond, bool):
            return ErrorValue(TYPE, "IF condition must be a boolean")
        # lazy: only the taken branch is evaluated
        return _eval(wb, e.args[1] if cond else e.args[2], origin)
    if e.name == "ROUND":
        x = _eval(wb, e.args[0], origin)
        if is_error(x):
            return x
        nd = _eval(wb, e.args[1], origin)
        if is_error(nd):
            return nd
        xn = _to_number(x)
        if is_error(xn):
            return xn
        nn = _to_number(nd)
        if is_error(nn):
            return nn
        if nn != nn.to_integral_value():
            return ErrorValue(TYPE, "ROUND digit count must be an integer")
        try:
            quantum = Decimal(1).scaleb(-int(nn))
            return xn.quantize(quantum, rounding=decimal.ROUND_HALF_EVEN)
        except (decimal.InvalidOperation, decimal.Overflow):
            return ErrorValue(TYPE, "ROUND out of range")
    raise ValueError(f"unknown function {e.name!r}")


def _aggregate(name: str, flat: list[Value]) -> Value:
    if name == "SUM":
        total = Decimal(0)
        for v in flat:
            if is_number(v):
                total += v
        return total
    if name == "COUNT":
        return Decimal(sum(1 for v in flat if v is not None))
    if name == "AVG":
        count = sum(1 for v in flat if v is not None)
        if count == 0:
            return ErrorValue(DIV0, "AVG over an empty set")
        total = Decimal(0)
        for v in flat:
            if is_number(v):
                total += v
        return total / Decimal(count)
    # MIN / MAX over non-Empty values; empty set yields Empty
    vals = [v for v in flat if v is not None]
    if not vals:
        return None
    best = vals[0]
    for v in vals[1:]:
        cmp = _compare("<" if name == "MIN" else ">", v, best)
        if is_error(cmp):
            return cmp
        if cmp is True:
            best = v
    return best


# ---------------------------------------------------------------------------
# recalculation


def recalculate(wb: Workbook, scope: str = "dirty") -> CalcResult:
    """Synchronize borrows, fold pending events into a dirty field set,
    and evaluate dirty formula fields in dependency order. With
    ``scope="all"`` every formula field is recomputed regardless of
    events."""
    result = CalcResult()
    diff = sync_borrows(wb)
    result.rows_inserted = diff.inserted
    result.rows_deleted = diff.deleted

    events = wb.pending_events
    schema = scope == "all" or any(ev[0] == "schema" for ev in events)
    if wb._graph is None or schema:
        wb._graph = rebuild_dependencies(wb)
    graph: DependencyGraph = wb._graph
    formula_set = set(graph.formula_fields)

    if schema:
        dirty = set(formula_set)
    else:
        seeds: set[FieldKey] = set()
        for ev in events:
            if ev[0] == "cell":
                seeds.add((ev[1], ev[2]))
            elif ev[0] == "rows":
                table = ev[1]
                for key in formula_set:
                    if key[0] == table:
                        seeds.add(key)
                for key, targets in graph.deps.items():
                    if key in formula_set and any(
                            dep[0] == table for dep in targets):
                        seeds.add(key)
        dirty = _closure(seeds, graph.rdeps) & formula_set

    for scc in graph.order:
        members = [k for k in scc if k in formula_set]
        if not members:
            continue
        if scc[0] in graph.cyclic:
            if not any(k in dirty for k in scc):
                continue
            for key in members:
                _fill_field(wb, key, ErrorValue(CYCLE, "field is on a "
                            "dependency cycle"), result)
        else:
            key = members[0]
            if key not in dirty:
                continue
            _evaluate_field(wb, key, result)

    wb.pending_events.clear()
    return result


def _closure(seeds: set[FieldKey],
             rdeps: dict[FieldKey, list[FieldKey]]) -> set[FieldKey]:
    out = set(seeds)
    frontier = list(seeds)
    while frontier:
        node = frontier.pop()
        for dep in rdeps.get(node, []):
            if dep not in out:
                out.add(dep)
                frontier.append(dep)
    return out


def _fill_field(wb: Workbook, key: FieldKey, value: ErrorValue,
                result: CalcResult) -> None:
    t = wb.table(key[0])
    f = t.field(key[1])
    for row in t.rows_at_level(f.level):
        old = row.cells.get(f.name)
        if not values_equal(old, value):
            result.changed.append(
                (CellAddress(key[0], row.id, key[1]), old, value))
        row.cells[f.name] = value


def _evaluate_field(wb: Workbook, key: FieldKey, result: CalcResult) -> None:
    t = wb.table(key[0])
    f = t.field(key[1])
    if f.formula is None:
        _fill_field(wb, key, ErrorValue(PARSE, f.parse_error or
                                        "formula failed to parse"), result)
        return
    for row in t.rows_at_level(f.level):
        addr = CellAddress(key[0], row.id, key[1])
        value = evaluate(wb, f.formula, addr)
        result.evaluated_count += 1
        old = row.cells.get(f.name)
        if not values_equal(old, value):
            result.changed.append((addr, old, value))
        row.cells[f.name] = value


def cyclic_fields(wb: Workbook) -> list[FieldKey]:
    """Fields currently on a dependency cycle, for diagnostics."""
    return sorted(rebuild_dependencies(wb).cyclic)
