"""HTTP front end over the chat runtime.

Five JSON endpoints under ``/v1``:

* ``POST /v1/sessions`` with ``{system_message?, pose_condition?}`` opens a
  session and returns ``{"session_id"}``.
* ``POST /v1/sessions/{id}/turns`` with ``{"text"}`` generates one answer.
* ``GET /v1/sessions/{id}/motion?strategy=independent|past|joint`` decodes
  the session's accumulated motion under one composition strategy.
* ``GET /v1/sessions/{id}`` returns the full history.
* ``DELETE /v1/sessions/{id}`` removes the session.

Every failure is ``{"error": {"code", "message"}}``: unknown sessions are
404, a turn posted while one is generating is 409, an oversized context is
422, and malformed requests are 400. Response shapes are published in
:data:`SCHEMAS` and the test suite validates live responses against them.

``pose_condition`` takes either ``{"positions": [[x,y,z]...]}`` (one pose
or a pose sequence, rendered to features server-side) or
``{"rows": [[...]...]}`` (rows of a precomputed visual-feature file).

The server handles each request on its own thread; the runtime serializes
turns per session and never mutates the loaded weights.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

import numpy as np

from .runtime import ChatError, ChatRuntime, pose_condition_vector

_STATUS = {
    "bad_request": 400,
    "unknown_session": 404,
    "generation_in_progress": 409,
    "context_overflow": 422,
    "internal": 500,
}

_TURN_SCHEMA = {
    "type": "object",
    "properties": {
        "answer_kind": {"enum": ["motion", "text"]},
        "text": {"type": "string"},
        "motion_turn_index": {"type": "integer", "minimum": 0},
    },
    "required": ["answer_kind"],
    "additionalProperties": False,
}

SCHEMAS: dict[str, dict] = {
    "session_created": {
        "type": "object",
        "properties": {"session_id": {"type": "string", "minLength": 1}},
        "required": ["session_id"],
        "additionalProperties": False,
    },
    "turn": _TURN_SCHEMA,
    "motion": {
        "type": "object",
        "properties": {
            "fps": {"type": "number", "exclusiveMinimum": 0},
            "frames": {
                "type": "array",
                "items": {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 3,
                        "maxItems": 3,
                    },
                },
            },
            "seams": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        },
        "required": ["fps", "frames", "seams"],
        "additionalProperties": False,
    },
    "history": {
        "type": "object",
        "properties": {
            "session_id": {"type": "string"},
            "system_message": {"type": "string"},
            "turns": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "text": {"type": "string"},
                        "answer_kind": {"enum": ["motion", "text"]},
                        "answer_text": {"type": ["string", "null"]},
                        "motion_turn_index": {"type": ["integer", "null"]},
                    },
                    "required": ["text", "answer_kind", "answer_text", "motion_turn_index"],
                    "additionalProperties": False,
                },
            },
            "n_motion_turns": {"type": "integer", "minimum": 0},
        },
        "required": ["session_id", "system_message", "turns", "n_motion_turns"],
        "additionalProperties": False,
    },
    "deleted": {
        "type": "object",
        "properties": {"deleted": {"type": "string"}},
        "required": ["deleted"],
        "additionalProperties": False,
    },
    "error": {
        "type": "object",
        "properties": {
            "error": {
                "type": "object",
                "properties": {
                    "code": {"type": "string"},
                    "message": {"type": "string"},
                },
                "required": ["code", "message"],
                "additionalProperties": False,
            }
        },
        "required": ["error"],
        "additionalProperties": False,
    },
}


class RequestError(ValueError):
    """Malformed request body or parameters; maps to 400."""


def condition_from_json(obj) -> np.ndarray:
    """``pose_condition`` payload to a conditioning vector."""
    if not isinstance(obj, dict):
        raise RequestError("pose_condition must be an object")
    if "positions" in obj:
        try:
            positions = np.asarray(obj["positions"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise RequestError(f"bad positions array: {exc}") from exc
        if positions.ndim not in (2, 3) or positions.shape[-1] != 3:
            raise RequestError(
                f"positions must be (joints, 3) or (poses, joints, 3), got {positions.shape}"
            )
        return pose_condition_vector(positions)
    if "rows" in obj:
        try:
            rows = np.asarray(obj["rows"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise RequestError(f"bad feature rows: {exc}") from exc
        if rows.ndim != 2:
            raise RequestError(f"feature rows must be 2-D, got {rows.shape}")
        return rows.mean(axis=0)
    raise RequestError("pose_condition needs either 'positions' or 'rows'")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "ChatServer"

    # -- plumbing ------------------------------------------------------------

    def log_message(self, fmt: str, *args) -> None:
        if self.server.verbose:
            super().log_message(fmt, *args)

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _fail(self, status: int, code: str, message: str) -> None:
        self._reply(status, {"error": {"code": code, "message": message}})

    def _body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RequestError(f"request body is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise RequestError("request body must be a JSON object")
        return doc

    def _route(self, method: str) -> None:
        split = urlsplit(self.path)
        parts = [p for p in split.path.split("/") if p]
        try:
            handler = self._dispatch(method, parts, parse_qs(split.query))
        except RequestError as exc:
            self._fail(400, "bad_request", str(exc))
        except ChatError as exc:
            self._fail(_STATUS.get(exc.code, 500), exc.code, str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            self._fail(500, "internal", f"{type(exc).__name__}: {exc}")
        else:
            if handler is None:
                self._fail(404, "not_found", f"no route {method} {split.path}")

    def _dispatch(self, method: str, parts: list[str], query: dict) -> bool | None:
        if len(parts) < 2 or parts[0] != "v1" or parts[1] != "sessions":
            return None
        runtime = self.server.runtime
        if method == "POST" and len(parts) == 2:
            doc = self._body()
            condition = None
            if doc.get("pose_condition") is not None:
                condition = condition_from_json(doc["pose_condition"])
            message = doc.get("system_message")
            if message is not None and not isinstance(message, str):
                raise RequestError("system_message must be a string")
            session_id = runtime.create_session(
                system_message=message, pose_condition=condition
            )
            self._reply(200, {"session_id": session_id})
            return True
        if method == "POST" and len(parts) == 4 and parts[3] == "turns":
            doc = self._body()
            if not isinstance(doc.get("text"), str):
                raise RequestError("turn body needs a string 'text' field")
            record = runtime.post_turn(parts[2], doc["text"])
            payload: dict = {"answer_kind": record.answer_kind}
            if record.answer_kind == "text":
                payload["text"] = record.answer_text
            else:
                payload["motion_turn_index"] = record.motion_turn_index
            self._reply(200, payload)
            return True
        if method == "GET" and len(parts) == 4 and parts[3] == "motion":
            strategy = query.get("strategy", ["joint"])[0]
            view = runtime.get_motion(parts[2], strategy)
            self._reply(200, view.to_json())
            return True
        if method == "GET" and len(parts) == 3:
            self._reply(200, runtime.history(parts[2]))
            return True
        if method == "DELETE" and len(parts) == 3:
            runtime.delete_session(parts[2])
            self._reply(200, {"deleted": parts[2]})
            return True
        return None

    # -- verbs ---------------------------------------------------------------

    def do_GET(self) -> None:
        self._route("GET")

    def do_POST(self) -> None:
        self._route("POST")

    def do_DELETE(self) -> None:
        self._route("DELETE")


class ChatServer(ThreadingHTTPServer):
    """HTTP server bound to one runtime; threads die with the process."""

    daemon_threads = True

    def __init__(self, runtime: ChatRuntime, host: str, port: int, verbose: bool = False):
        self.runtime = runtime
        self.verbose = verbose
        super().__init__((host, port), _Handler)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve(
    runtime: ChatRuntime,
    host: str = "127.0.0.1",
    port: int = 0,
    verbose: bool = False,
) -> ChatServer:
    """Bind a server; ``port=0`` picks a free port. Caller runs the loop."""
    return ChatServer(runtime, host, port, verbose=verbose)


def serve_background(
    runtime: ChatRuntime, host: str = "127.0.0.1", port: int = 0
) -> tuple[ChatServer, threading.Thread]:
    """Server plus a running daemon thread; for tests and embedding."""
    server = serve(runtime, host, port)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread
