"""HTTP/JSON front end.

The routing table is a plain function from (method, path, query, body) to a
status code and JSON-serializable payload, so the full surface is testable
without sockets; a thin ThreadingHTTPServer handler adapts it to real HTTP.
uids and item ids travel as unsigned 64-bit integers, scores as IEEE-754
doubles encoded as JSON numbers.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .errors import (
    DimensionMismatch,
    EmptyLog,
    ModelServeError,
    RetrainInFlight,
    UnknownItem,
    UnknownModel,
    UnknownVersion,
)
from .serving import ModelEngine

log = logging.getLogger(__name__)

_UID_MAX = 2 ** 64


class ServiceApi:
    """Dispatches JSON requests to a registry of named model engines."""

    def __init__(self, engines: dict[str, ModelEngine]):
        self.engines = engines

    def _engine(self, name) -> ModelEngine:
        engine = self.engines.get(name)
        if engine is None:
            raise UnknownModel(f"no model named {name!r}")
        return engine

    def handle(self, method: str, path: str, query: dict, body: dict | None) -> tuple[int, dict]:
        try:
            return self._route(method, path, query, body or {})
        except UnknownModel as exc:
            return 404, {"error": "unknown_model", "message": str(exc)}
        except UnknownItem as exc:
            return 404, {"error": "unknown_item", "message": str(exc)}
        except UnknownVersion as exc:
            return 404, {"error": "unknown_version", "message": str(exc)}
        except RetrainInFlight as exc:
            return 409, {"error": "retrain_in_flight", "message": str(exc)}
        except (DimensionMismatch, EmptyLog, ValueError, TypeError, KeyError) as exc:
            return 400, {"error": "bad_request", "message": str(exc)}
        except ModelServeError as exc:
            return 500, {"error": "internal", "message": str(exc)}

    def _route(self, method, path, query, body) -> tuple[int, dict]:
        parts = [p for p in path.split("/") if p]
        if method == "POST" and parts == ["predict"]:
            return self._predict(body)
        if method == "POST" and parts == ["topk"]:
            return self._topk(body)
        if method == "POST" and parts == ["observe"]:
            return self._observe(body)
        if len(parts) == 3 and parts[0] == "models":
            name, action = parts[1], parts[2]
            if method == "GET" and action == "status":
                return 200, self._engine(name).status()
            if method == "POST" and action == "retrain":
                self._engine(name).trigger_retrain(reason="api")
                return 202, {"ok": True, "triggered": True}
            if method == "POST" and action == "rollback":
                version = _as_int(_single(query, "version"), "version")
                self._engine(name).rollback(version)
                return 200, {"ok": True, "version": version}
        return 404, {"error": "no_route", "message": f"{method} {path}"}

    def _predict(self, body) -> tuple[int, dict]:
        engine = self._engine(body.get("model"))
        uid = _as_uid(body.get("uid"))
        result = engine.predict(uid, _as_item(body.get("item")))
        return 200, {"item": body.get("item"), "score": result.score,
                     "version": result.version, "cached": result.cached}

    def _topk(self, body) -> tuple[int, dict]:
        engine = self._engine(body.get("model"))
        uid = _as_uid(body.get("uid"))
        items = body.get("items")
        if not isinstance(items, list) or not items:
            raise ValueError("items must be a non-empty list")
        k = _as_int(body.get("k", 1), "k")
        result = engine.topk(uid, [_as_item(it) for it in items], k)
        return 200, {"results": [{"item": it, "score": score} for it, score in result.results],
                     "skipped": result.skipped}

    def _observe(self, body) -> tuple[int, dict]:
        engine = self._engine(body.get("model"))
        uid = _as_uid(body.get("uid"))
        label = body.get("label")
        if not isinstance(label, (int, float)) or isinstance(label, bool):
            raise ValueError("label must be a number")
        exploratory = bool(body.get("exploratory", False))
        result = engine.observe(uid, _as_item(body.get("item")), float(label),
                                exploratory=exploratory)
        return 200, {"ok": True, "error": result.error, "version": result.version}


def _single(query: dict, key: str):
    value = query.get(key)
    if isinstance(value, list):
        if len(value) != 1:
            raise ValueError(f"query parameter {key!r} must appear exactly once")
        return value[0]
    if value is None:
        raise ValueError(f"missing query parameter {key!r}")
    return value


def _as_int(value, name: str) -> int:
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be an integer") from None
    return out


def _as_uid(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValueError("uid must be an unsigned 64-bit integer")
    if not 0 <= value < _UID_MAX:
        raise ValueError("uid out of unsigned 64-bit range")
    return value


def _as_item(item):
    """Item descriptors on the wire: an unsigned int id, or a list of
    numbers for computed-feature models."""
    if isinstance(item, bool):
        raise ValueError("item must be an id or a list of numbers")
    if isinstance(item, int):
        if not 0 <= item < _UID_MAX:
            raise ValueError("item id out of unsigned 64-bit range")
        return item
    if isinstance(item, list) and item and all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in item):
        return [float(x) for x in item]
    raise ValueError("item must be an id or a list of numbers")


class _Handler(BaseHTTPRequestHandler):
    api: ServiceApi = None  # set by serve_http
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _respond(self, status: int, payload: dict) -> None:
        blob = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(blob)))
        self.end_headers()
        self.wfile.write(blob)

    def _dispatch(self, method: str) -> None:
        url = urlsplit(self.path)
        query = parse_qs(url.query)
        body = None
        length = int(self.headers.get("Content-Length") or 0)
        if length:
            try:
                body = json.loads(self.rfile.read(length))
            except json.JSONDecodeError:
                self._respond(400, {"error": "bad_json", "message": "request body is not JSON"})
                return
        if body is not None and not isinstance(body, dict):
            self._respond(400, {"error": "bad_json", "message": "request body must be an object"})
            return
        status, payload = self.api.handle(method, url.path, query, body)
        self._respond(status, payload)

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")


class HttpService:
    """A ThreadingHTTPServer bound to a ServiceApi."""

    def __init__(self, api: ServiceApi, host: str = "127.0.0.1", port: int = 8080):
        handler = type("BoundHandler", (_Handler,), {"api": api})
        self.server = ThreadingHTTPServer((host, port), handler)
        self.server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        name="modelserve-http", daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
