"""Local HTTP bridge exposing pooled model tools to sandboxed action code.

The sandbox only speaks HTTP, so tool calls cross this one seam. Tools that
stand in for metered remote models report their consumption through a
``_usage`` key in the result; the bridge books it against the caller's tag
and strips the key before the result reaches the sandbox.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Mapping

from .gateway import Usage, UsageLedger

logger = logging.getLogger(__name__)

ToolFn = Callable[..., object]


class ToolBridge:
    def __init__(
        self,
        tools: Mapping[str, ToolFn],
        ledger: UsageLedger | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.tools = dict(tools)
        self.ledger = ledger
        self._host = host
        self._port = port
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        if self._server is None:
            raise RuntimeError("bridge is not running")
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ToolBridge":
        bridge = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):
                logger.debug("toolbridge: " + fmt, *args)

            def _reply(self, status: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/healthz":
                    self._reply(200, {"ok": True})
                else:
                    self._reply(404, {"error": f"no such path: {self.path}"})

            def do_POST(self):
                if not self.path.startswith("/tool/"):
                    self._reply(404, {"error": f"no such path: {self.path}"})
                    return
                name = self.path[len("/tool/") :]
                tool = bridge.tools.get(name)
                if tool is None:
                    self._reply(404, {"error": f"unknown tool: {name}"})
                    return
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    kwargs = json.loads(raw.decode("utf-8")) if raw.strip() else {}
                    if not isinstance(kwargs, dict):
                        raise ValueError("tool arguments must be a JSON object")
                except (json.JSONDecodeError, ValueError) as exc:
                    self._reply(400, {"error": str(exc)})
                    return
                try:
                    result = tool(**kwargs)
                except Exception as exc:
                    logger.warning("tool %s raised: %s", name, exc)
                    self._reply(500, {"error": f"{type(exc).__name__}: {exc}"})
                    return
                result = bridge._book_usage(
                    name, result, self.headers.get("X-Usage-Tag", "")
                )
                self._reply(200, {"result": result})

        self._server = ThreadingHTTPServer((self._host, self._port), Handler)
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="toolbridge", daemon=True
        )
        self._thread.start()
        return self

    def _book_usage(self, name: str, result: object, tag: str) -> object:
        if not isinstance(result, dict) or "_usage" not in result:
            return result
        usage = result.pop("_usage")
        if self.ledger is not None:
            self.ledger.record(
                tag=tag or f"tool:{name}",
                model=str(usage.get("model", name)),
                usage=Usage(
                    prompt_tokens=int(usage.get("prompt_tokens", 0)),
                    completion_tokens=int(usage.get("completion_tokens", 0)),
                ),
                latency=float(usage.get("latency", 0.0)),
            )
        return result

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None

    def __enter__(self) -> "ToolBridge":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


# ---------------------------------------------------------------------------
# stub tools for demos and tests
# ---------------------------------------------------------------------------
#
# Demo fixtures tag each image file with trailing ``key=value`` markers; the
# probes read the bytes, so they behave the same no matter where the sandbox
# staged its copy.


def _read_marker(image: str, key: str) -> str | None:
    data = Path(image).read_bytes()
    marker = key.encode("ascii") + b"="
    at = data.rfind(marker)
    if at < 0:
        return None
    return data[at + len(marker) :].split()[0].decode("ascii", "replace")


def color_probe(image: str) -> dict:
    """Free local stub vision model."""
    return {"color": _read_marker(image, "color") or "unknown"}


def vision_api_probe(image: str, prompt: str = "") -> dict:
    """Metered remote stub: same answer as color_probe plus a usage record."""
    return {
        "color": _read_marker(image, "color") or "unknown",
        "_usage": {
            "model": "stub-remote-vision",
            "prompt_tokens": 800,
            "completion_tokens": 40,
        },
    }


def object_count_probe(image: str) -> dict:
    value = _read_marker(image, "count")
    return {"count": int(value) if value and value.isdigit() else 0}


def echo(**kwargs) -> dict:
    return {"echo": kwargs}


def stub_tools() -> dict[str, ToolFn]:
    return {
        "color_probe": color_probe,
        "vision_api_probe": vision_api_probe,
        "object_count_probe": object_count_probe,
        "echo": echo,
    }
