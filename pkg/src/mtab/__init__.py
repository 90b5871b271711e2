"""mtab: a structured-spreadsheet engine.

Tables are hierarchies of levels; formulas are written once per field and
reference other fields by name, never by position. References are scoped
by the hierarchy and by borrow/link relations between tables, so adding
rows or key values never requires revisiting a formula.
"""

from .engine import (CalcResult, DependencyGraph, cyclic_fields, evaluate,
                     rebuild_dependencies, recalculate)
from .errors import BadAddress, EngineError, ValidationError
from .formula import (Binary, BoolLit, Call, CrossRef, Expr,
                      FormulaParseError, LocalRef, NumberLit, TextLit, Unary,
                      collect_refs, parse, print_expr)
from .model import (CellAddress, Field, RowNode, Table, Workbook,
                    check_integrity)
from .relations import (BorrowSpec, LinkSpec, RelationSet, SyncDiff,
                        declare_borrow, declare_link, is_unmatched,
                        sync_borrows, valid_values)
from .scope import CellSet, JoinConstraint, join_constraints, resolve_cross, resolve_local
from .storage import (DocumentError, dumps, export_csv, import_csv, load,
                      save, to_document)
from .values import (CYCLE, DIV0, MULTI, NOMATCH, PARSE, REF, TYPE,
                     ErrorValue, Value, canonical_number, parse_literal,
                     render, values_equal)

__version__ = "0.1.0"

__all__ = [
    "Workbook", "Table", "Field", "RowNode", "CellAddress",
    "check_integrity",
    "EngineError", "BadAddress", "ValidationError", "DocumentError",
    "Expr", "NumberLit", "TextLit", "BoolLit", "LocalRef", "CrossRef",
    "Unary", "Binary", "Call", "FormulaParseError",
    "parse", "print_expr", "collect_refs",
    "CellSet", "JoinConstraint", "resolve_local", "resolve_cross",
    "join_constraints",
    "RelationSet", "BorrowSpec", "LinkSpec", "SyncDiff",
    "declare_borrow", "declare_link", "sync_borrows", "valid_values",
    "is_unmatched",
    "CalcResult", "DependencyGraph", "evaluate", "recalculate",
    "rebuild_dependencies", "cyclic_fields",
    "load", "save", "dumps", "to_document", "import_csv", "export_csv",
    "ErrorValue", "Value", "values_equal", "render", "canonical_number",
    "parse_literal",
    "PARSE", "REF", "TYPE", "DIV0", "CYCLE", "NOMATCH", "MULTI",
]
