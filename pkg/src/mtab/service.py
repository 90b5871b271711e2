"""HTTP service exposing one workbook to the browser editor.

Endpoints:

* ``GET /api/workbook``: the full document plus computed values and the
  current version.
* ``GET /api/table/{name}``: one table (structure, rows with raw and
  rendered values, link dropdown lists).
* ``POST /api/edit``: one edit command; answers with the resulting change
  patch, 409 when ``expected_version`` is stale, 422 when the engine
  rejects the command.
* ``GET /api/updates``: a server-sent-event stream carrying every change
  patch in application order.

Mutations are serialized under one lock (optimistic concurrency via
``expected_version``); the file is saved after each successful edit.
Patches carry raw and display-rendered values so clients never
reimplement formatting, and every cell whose value or unmatched flag
changed appears in the patch.
"""

from __future__ import annotations

import json
import mimetypes
import threading
import queue
from decimal import Decimal
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional

from . import engine, relations, storage
from .errors import EngineError
from .formula import print_expr
from .model import Table, Workbook
from .values import Value, is_error, render


def _raw(v: Value):
    if is_error(v):
        return None
    return v


def _cell_payload(wb: Workbook, table: str, row_id: str, field) -> dict:
    t = wb.table(table)
    v = t.row(row_id).cells.get(field.name)
    doc: dict = {"raw": _raw(v), "display": render(v, field.display_format)}
    if is_error(v):
        doc["error"] = v.code
    if field.kind == "data" and relations.is_unmatched(wb, table, row_id,
                                                       field.name):
        doc["unmatched"] = True
    return doc


def _row_payload(wb: Workbook, t: Table, row_id: str) -> dict:
    row = t.row(row_id)
    cells = {f.name: _cell_payload(wb, t.name, row_id, f)
             for f in t.fields_at_level(row.level)}
    return {"id": row.id, "level": row.level, "cells": cells,
            "children": [_row_payload(wb, t, c) for c in row.children]}


def _field_payload(f) -> dict:
    doc: dict = {"name": f.name, "level": f.level, "kind": f.kind}
    if f.kind == "formula":
        doc["formula"] = (print_expr(f.formula) if f.formula is not None
                          else f.formula_source)
        if f.parse_error:
            doc["parse_error"] = f.parse_error
    if f.borrow_source:
        doc["source"] = list(f.borrow_source)
    if f.display_format:
        doc["format"] = f.display_format
    return doc


def _table_payload(wb: Workbook, t: Table) -> dict:
    valid = {}
    for link in wb.relations.links_from(t.name):
        valid[link.local_field] = [
            _raw(v) for v in relations.valid_values(wb, link)]
    return {
        "name": t.name,
        "levels": list(t.levels),
        "fields": [_field_payload(f) for f in t.fields],
        "rows": [_row_payload(wb, t, rid) for rid in t.root_children],
        "valid_values": valid,
    }


def _workbook_payload(wb: Workbook) -> dict:
    return {
        "name": wb.name,
        "version": wb.version,
        "tables": [_table_payload(wb, t) for t in wb.tables.values()],
    }


class WorkbookService:
    """Owns the live workbook, the mutation lock, and the patch fan-out."""

    def __init__(self, path: str) -> None:
        self.path = path
        self.wb = storage.load(path)
        self.lock = threading.RLock()
        self.subscribers: set[queue.Queue] = set()
        self._command_seq = 0

    # -- reads -------------------------------------------------------------

    def workbook_payload(self) -> dict:
        with self.lock:
            return _workbook_payload(self.wb)

    def table_payload(self, name: str) -> dict:
        with self.lock:
            return _table_payload(self.wb, self.wb.table(name))

    # -- subscription --------------------------------------------------------

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self.lock:
            self.subscribers.add(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.lock:
            self.subscribers.discard(q)

    def _publish(self, patch: dict) -> None:
        for q in list(self.subscribers):
            q.put(patch)

    # -- mutation ------------------------------------------------------------

    def apply_edit(self, cmd: dict) -> tuple[int, dict]:
        """Returns (http status, body). The body is the change patch on
        success."""
        if not isinstance(cmd, dict) or "command" not in cmd:
            return 422, {"error": {"code": "#PARSE",
                                   "message": "body must carry a command"}}
        with self.lock:
            wb = self.wb
            expected = cmd.get("expected_version")
            if expected != wb.version:
                return 409, {"error": "stale expected_version",
                             "expected": expected, "version": wb.version}
            self._command_seq += 1
            command_id = cmd.get("id", f"c{self._command_seq}")

            links_before = {
                (l.local_table, l.local_field):
                    [_raw(v) for v in relations.valid_values(wb, l)]
                for l in wb.relations.links}
            flags_before = self._unmatched_flags()
            orders_before = self._sibling_orders()

            try:
                direct = self._apply_command(cmd)
            except (EngineError, storage.DocumentError) as exc:
                return 422, {"error": {
                    "code": getattr(exc, "code", None) or "error",
                    "message": str(exc),
                    **({"address": exc.address} if getattr(
                        exc, "address", None) else {})}}
            except (KeyError, TypeError, ValueError) as exc:
                return 422, {"error": {"code": "error",
                                       "message": f"malformed command: {exc}"}}

            result = engine.recalculate(wb)
            storage.save(wb, self.path)
            patch = self._build_patch(command_id, direct, result,
                                      links_before, flags_before,
                                      orders_before)
            self._publish(patch)
            return 200, patch

    def _sibling_orders(self) -> dict:
        orders = {}
        for t in self.wb.tables.values():
            orders[(t.name, None)] = list(t.root_children)
            for row in t.walk():
                orders[(t.name, row.id)] = list(row.children)
        return orders

    def _unmatched_flags(self) -> set[tuple[str, str, str]]:
        flagged = set()
        wb = self.wb
        for link in wb.relations.links:
            t = wb.table(link.local_table)
            f = t.field(link.local_field)
            for row in t.rows_at_level(f.level):
                if relations.is_unmatched(wb, t.name, row.id, f.name):
                    flagged.add((t.name, row.id, f.name))
        return flagged

    def _apply_command(self, cmd: dict) -> dict:
        """Run one engine mutation; returns its direct effects for the
        patch."""
        wb = self.wb
        op = cmd["command"]
        direct: dict = {"inserted": [], "deleted": [], "fields": [],
                        "cells": []}
        if op == "set_cell":
            value = _decode_cell_value(cmd.get("value"))
            wb.set_cell(cmd["table"], cmd["row"], cmd["field"], value)
            direct["cells"].append((cmd["table"], cmd["row"], cmd["field"]))
        elif op == "insert_row":
            rid = wb.insert_row(cmd["table"], cmd.get("parent"),
                                cmd.get("index"))
            direct["inserted"].append((cmd["table"], rid))
        elif op == "delete_row":
            table, rid = cmd["table"], cmd["row"]
            ids = self.wb.table(table).subtree_ids(rid)
            wb.delete_row(table, rid)
            direct["deleted"].extend((table, x) for x in ids)
        elif op == "add_field":
            source = cmd.get("source")
            wb.add_field(cmd["table"], cmd["name"], cmd["level"],
                         cmd.get("kind", "data"),
                         formula=cmd.get("formula"),
                         source=tuple(source) if source else None,
                         display_format=cmd.get("format"))
            direct["fields"].append((cmd["table"], cmd["name"]))
        elif op == "set_formula":
            wb.set_formula(cmd["table"], cmd["field"], cmd["formula"])
        elif op == "declare_borrow":
            wb.declare_borrow(tuple(cmd["target"]), tuple(cmd["source"]))
        elif op == "declare_link":
            wb.declare_link(tuple(cmd["local"]), tuple(cmd["foreign"]))
        else:
            raise EngineError(f"unknown command {op!r}")
        return direct

    def _build_patch(self, command_id: str, direct: dict, result,
                     links_before: dict, flags_before: set,
                     orders_before: dict) -> dict:
        wb = self.wb
        inserted = direct["inserted"] + result.rows_inserted
        deleted = direct["deleted"] + result.rows_deleted
        inserted_docs = []
        for table, rid in inserted:
            t = wb.table(table)
            if not t.has_row(rid):
                continue  # created and removed within one sync pass
            row = t.row(rid)
            siblings = (t.root_children if row.parent is None
                        else t.row(row.parent).children)
            inserted_docs.append({
                "table": table, "id": rid, "level": row.level,
                "parent": row.parent, "index": siblings.index(rid),
                "cells": {f.name: _cell_payload(wb, table, rid, f)
                          for f in t.fields_at_level(row.level)},
            })

        cell_docs: dict[tuple[str, str, str], dict] = {}

        def add_cell(table: str, rid: str, fname: str) -> None:
            t = wb.table(table)
            if not t.has_row(rid):
                return
            key = (table, rid, fname)
            if key not in cell_docs:
                cell_docs[key] = {
                    "table": table, "row": rid, "field": fname,
                    **_cell_payload(wb, table, rid, t.field(fname))}

        for table, rid, fname in direct["cells"]:
            add_cell(table, rid, fname)
        for addr, _old, _new in result.changed:
            add_cell(addr.table, addr.row, addr.field)
        for table, rid, fname in flags_before ^ self._unmatched_flags():
            add_cell(table, rid, fname)

        valid_changed: dict = {}
        for link in wb.relations.links:
            key = (link.local_table, link.local_field)
            now = [_raw(v) for v in relations.valid_values(wb, link)]
            if links_before.get(key) != now:
                valid_changed.setdefault(link.local_table, {})[
                    link.local_field] = now

        return {
            "version": wb.version,
            "command_id": command_id,
            "structure": {
                "deleted_rows": [{"table": t, "id": r} for t, r in deleted],
                "inserted_rows": inserted_docs,
                "added_fields": [
                    {"table": t,
                     **_field_payload(wb.table(t).field(f))}
                    for t, f in direct["fields"]],
            },
            "cells": list(cell_docs.values()),
            "valid_values": valid_changed,
        }


def _decode_cell_value(raw) -> Value:
    if isinstance(raw, dict) and "text" in raw:
        from .values import parse_literal
        return parse_literal(str(raw["text"]))
    if isinstance(raw, float):
        # repr(float) is the shortest round-trip form, so short decimals
        # typed client-side arrive exactly
        return Decimal(repr(raw))
    if raw is None or isinstance(raw, (bool, int, str, Decimal)):
        return raw if not isinstance(raw, int) or isinstance(raw, bool) \
            else Decimal(raw)
    raise EngineError(f"unsupported cell value {raw!r}")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: WorkbookService
    ui_dir: Optional[Path] = None
    quiet = True

    def log_message(self, fmt: str, *args) -> None:
        if not self.quiet:
            super().log_message(fmt, *args)

    # -- helpers -----------------------------------------------------------

    def _send_json(self, status: int, body: dict) -> None:
        data = storage.compact_json(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(data)

    def _read_json(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length)
        return json.loads(raw.decode("utf-8"), parse_float=Decimal)

    # -- routes ------------------------------------------------------------

    def do_OPTIONS(self) -> None:  # CORS preflight
        self.send_response(204)
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:
        if self.path == "/api/workbook":
            self._send_json(200, self.service.workbook_payload())
            return
        if self.path.startswith("/api/table/"):
            name = _unquote(self.path[len("/api/table/"):])
            try:
                self._send_json(200, self.service.table_payload(name))
            except EngineError as exc:
                self._send_json(404, {"error": str(exc)})
            return
        if self.path == "/api/updates":
            self._stream_updates()
            return
        self._serve_static()

    def do_POST(self) -> None:
        if self.path != "/api/edit":
            self._send_json(404, {"error": "unknown endpoint"})
            return
        try:
            cmd = self._read_json()
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            self._send_json(422, {"error": {"code": "#PARSE",
                                            "message": str(exc)}})
            return
        status, body = self.service.apply_edit(cmd)
        self._send_json(status, body)

    def _stream_updates(self) -> None:
        q = self.service.subscribe()
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            while True:
                try:
                    patch = q.get(timeout=15)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                frame = (f"id: {patch['version']}\nevent: patch\n"
                         f"data: {storage.compact_json(patch)}\n\n")
                self.wfile.write(frame.encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.service.unsubscribe(q)

    def _serve_static(self) -> None:
        if self.ui_dir is None:
            self._send_json(404, {"error": "no UI bundled; use /api/*"})
            return
        rel = self.path.split("?", 1)[0].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) \
                or not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        data = target.read_bytes()
        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


def _unquote(text: str) -> str:
    from urllib.parse import unquote
    return unquote(text)


def make_server(path: str, host: str = "127.0.0.1", port: int = 0,
                ui_dir: Optional[str] = None
                ) -> tuple[ThreadingHTTPServer, WorkbookService]:
    service = WorkbookService(path)
    handler = type("Handler", (_Handler,), {
        "service": service,
        "ui_dir": Path(ui_dir) if ui_dir else None,
    })
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server, service


def serve(path: str, host: str = "127.0.0.1", port: int = 8323,
          ui_dir: Optional[str] = None) -> int:
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        if bundled.is_dir():
            ui_dir = str(bundled)
    server, _service = make_server(path, host, port, ui_dir)
    real_host, real_port = server.server_address[:2]
    print(f"serving {path} on http://{real_host}:{real_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0
