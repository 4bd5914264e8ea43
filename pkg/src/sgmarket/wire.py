"""Line-delimited JSON RPC: framing, a blocking client, and a threaded server.

Transport contract: raw TCP, one message per line, each line the canonical
JSON of a request or response followed by a single LF. JSON string escaping
guarantees no raw LF/CR ever appears inside a payload, so LF is an
unambiguous frame boundary. One request is in flight per connection at a
time; callers open parallel connections for parallelism.
"""

from __future__ import annotations

import itertools
import json
import logging
import re
import socket
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Mapping

from .domain import ServiceError, canonical_json_bytes

log = logging.getLogger(__name__)

_METHOD_RE = re.compile(r"^[a-z_.]+$")

_RECV_CHUNK = 65536
_POLL_INTERVAL_S = 0.1
_MAX_LINE_BYTES = 4 * 1024 * 1024


class RpcErrorCode(IntEnum):
    MALFORMED = 1
    UNKNOWN_METHOD = 2
    INVALID_PARAMS = 3
    APPLICATION_ERROR = 4
    TIMEOUT = 5


class FramingError(Exception):
    """A byte line that is not a well-formed request or response."""

    code = RpcErrorCode.MALFORMED


class RpcError(Exception):
    """An RPC failure: remote error response, timeout, or framing trouble."""

    def __init__(self, code: int, message: str):
        super().__init__(f"rpc error {code}: {message}")
        self.code = code
        self.message = message

    def app_error_name(self) -> str | None:
        """The domain error name for APPLICATION_ERROR responses, if any."""
        if self.code != RpcErrorCode.APPLICATION_ERROR:
            return None
        name, sep, _ = self.message.partition(":")
        return name if sep and name.isidentifier() else None


class InvalidParams(ServiceError):
    """Raised by handlers when request params are structurally wrong."""

    name = "InvalidParams"


@dataclass(frozen=True)
class RpcRequest:
    id: str
    method: str
    params: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.id, "method": self.method, "params": self.params}


@dataclass(frozen=True)
class RpcResponse:
    """Carries ``result`` when ``error`` is None, the error otherwise;
    a null result is still a result."""

    id: str
    result: Any = None
    error: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        if self.error is not None:
            return {"id": self.id, "error": self.error}
        return {"id": self.id, "result": self.result}


def ok_response(request_id: str, result: Any) -> RpcResponse:
    return RpcResponse(id=request_id, result=result, error=None)


def error_response(request_id: str, code: int, message: str) -> RpcResponse:
    return RpcResponse(
        id=request_id, result=None, error={"code": int(code), "message": message}
    )


def encode_message(msg: RpcRequest | RpcResponse) -> bytes:
    """One canonical-JSON line terminated by a single LF."""
    return canonical_json_bytes(msg.to_dict()) + b"\n"


def decode_message(line: bytes) -> RpcRequest | RpcResponse:
    """Inverse of :func:`encode_message`; raises :class:`FramingError` on
    anything that is not a well-formed request or response."""
    try:
        data = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"not JSON: {exc}") from None
    if not isinstance(data, dict):
        raise FramingError("message must be a JSON object")
    if "method" in data:
        if set(data) != {"id", "method", "params"}:
            raise FramingError("request must have exactly id, method, params")
        rid, method, params = data["id"], data["method"], data["params"]
        if not isinstance(rid, str) or not rid:
            raise FramingError("request id must be a non-empty string")
        if not isinstance(method, str) or not _METHOD_RE.match(method):
            raise FramingError(f"bad method name {method!r}")
        if not isinstance(params, dict):
            raise FramingError("params must be a JSON object")
        return RpcRequest(id=rid, method=method, params=params)
    if "result" in data or "error" in data:
        if "result" in data and "error" in data:
            raise FramingError("response has both result and error")
        if set(data) - {"id", "result", "error"}:
            raise FramingError("response has unknown fields")
        rid = data.get("id")
        if not isinstance(rid, str):
            raise FramingError("response id must be a string")
        if "error" in data:
            err = data["error"]
            if (
                not isinstance(err, dict)
                or set(err) != {"code", "message"}
                or not isinstance(err["code"], int)
                or isinstance(err["code"], bool)
                or not isinstance(err["message"], str)
            ):
                raise FramingError("error must be {code: int, message: str}")
            return error_response(rid, err["code"], err["message"])
        return ok_response(rid, data["result"])
    raise FramingError("neither request nor response")


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host or not port.isdigit():
        raise ValueError(f"bad address {address!r}, expected host:port")
    return host, int(port)


_request_ids = itertools.count(1)


def _read_line(sock: socket.socket, deadline: float) -> bytes:
    """Read one LF-terminated line (terminator stripped) before ``deadline``."""
    buf = bytearray()
    while True:
        newline = buf.find(b"\n")
        if newline >= 0:
            return bytes(buf[:newline])
        if len(buf) > _MAX_LINE_BYTES:
            raise RpcError(RpcErrorCode.MALFORMED, "response line too long")
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise RpcError(RpcErrorCode.TIMEOUT, "timed out waiting for response")
        sock.settimeout(remaining)
        try:
            chunk = sock.recv(_RECV_CHUNK)
        except socket.timeout:
            raise RpcError(RpcErrorCode.TIMEOUT, "timed out waiting for response") from None
        except OSError as exc:
            raise RpcError(RpcErrorCode.TIMEOUT, f"connection lost: {exc}") from None
        if not chunk:
            raise RpcError(RpcErrorCode.TIMEOUT, "connection closed before response")
        buf.extend(chunk)


def rpc_call(
    address: str,
    method: str,
    params: Mapping[str, Any] | None = None,
    timeout_ms: int = 2000,
) -> Any:
    """Send one request, wait for the matching response, return its result.

    Remote errors surface as :class:`RpcError`. Connection failures and
    silence past the deadline both map to TIMEOUT semantics.
    """
    if timeout_ms <= 0:
        raise ValueError("timeout_ms must be > 0")
    host, port = parse_address(address)
    deadline = time.monotonic() + timeout_ms / 1000.0
    request = RpcRequest(
        id=str(next(_request_ids)), method=method, params=dict(params or {})
    )
    try:
        sock = socket.create_connection((host, port), timeout=timeout_ms / 1000.0)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    except OSError as exc:
        raise RpcError(RpcErrorCode.TIMEOUT, f"cannot connect to {address}: {exc}") from None
    try:
        sock.sendall(encode_message(request))
        line = _read_line(sock, deadline)
    finally:
        try:
            sock.close()
        except OSError:
            pass
    try:
        response = decode_message(line)
    except FramingError as exc:
        raise RpcError(RpcErrorCode.MALFORMED, f"bad response frame: {exc}") from None
    if not isinstance(response, RpcResponse) or response.id != request.id:
        raise RpcError(RpcErrorCode.MALFORMED, "response does not match request")
    if response.error is not None:
        raise RpcError(response.error["code"], response.error["message"])
    return response.result


Handler = Callable[[dict[str, Any]], Any]


class Server:
    """Threaded RPC server: one thread per connection, sequential requests
    per connection, orderly shutdown that completes in-flight requests."""

    def __init__(self, bind: str, handlers: Mapping[str, Handler]):
        host, port = parse_address(bind)
        self._handlers = dict(handlers)
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        self.host, self.port = self._listener.getsockname()[:2]
        self._shutdown = threading.Event()
        self._conn_threads: set[threading.Thread] = set()
        self._conns: set[socket.socket] = set()
        self._conn_lock = threading.Lock()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"rpc-accept-{self.port}", daemon=True
        )
        self._accept_thread.start()

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    def _accept_loop(self) -> None:
        self._listener.settimeout(_POLL_INTERVAL_S)
        while not self._shutdown.is_set():
            try:
                conn, peer = self._listener.accept()
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            except socket.timeout:
                continue
            except OSError:
                break
            thread = threading.Thread(
                target=self._serve_connection,
                args=(conn, peer),
                name=f"rpc-conn-{peer[1]}",
                daemon=True,
            )
            with self._conn_lock:
                self._conn_threads.add(thread)
            thread.start()

    def _serve_connection(self, conn: socket.socket, peer: tuple) -> None:
        conn.settimeout(_POLL_INTERVAL_S)
        with self._conn_lock:
            self._conns.add(conn)
        buf = bytearray()
        try:
            while not self._shutdown.is_set():
                newline = buf.find(b"\n")
                if newline >= 0:
                    line = bytes(buf[:newline])
                    del buf[: newline + 1]
                    response = self._handle_line(line)
                    conn.sendall(encode_message(response))
                    continue
                try:
                    chunk = conn.recv(_RECV_CHUNK)
                except socket.timeout:
                    continue
                except OSError:
                    break
                if not chunk:
                    break
                buf.extend(chunk)
        except OSError:
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass
            with self._conn_lock:
                self._conns.discard(conn)
                self._conn_threads.discard(threading.current_thread())

    def _handle_line(self, line: bytes) -> RpcResponse:
        try:
            message = decode_message(line)
        except FramingError as exc:
            return error_response("", RpcErrorCode.MALFORMED, str(exc))
        if not isinstance(message, RpcRequest):
            return error_response(
                message.id, RpcErrorCode.MALFORMED, "expected a request"
            )
        handler = self._handlers.get(message.method)
        if handler is None:
            return error_response(
                message.id,
                RpcErrorCode.UNKNOWN_METHOD,
                f"unknown method {message.method!r}",
            )
        try:
            result = handler(message.params)
        except InvalidParams as exc:
            return error_response(
                message.id, RpcErrorCode.INVALID_PARAMS, f"{exc.name}: {exc.detail}"
            )
        except ServiceError as exc:
            return error_response(
                message.id, RpcErrorCode.APPLICATION_ERROR, f"{exc.name}: {exc.detail}"
            )
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("handler %s crashed", message.method)
            return error_response(
                message.id, RpcErrorCode.APPLICATION_ERROR, f"InternalError: {exc!r}"
            )
        return ok_response(message.id, result)

    def shutdown(self) -> None:
        """Stop accepting, finish in-flight requests, close all connections."""
        self._shutdown.set()
        try:
            # Wake the blocked accept immediately rather than waiting out its
            # poll interval.
            with socket.create_connection((self.host, self.port), timeout=1.0):
                pass
        except OSError:
            pass
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conn_lock:
            for conn in list(self._conns):
                try:
                    conn.shutdown(socket.SHUT_RD)  # wakes idle recv; writes still ok
                except OSError:
                    pass
        self._accept_thread.join(timeout=5.0)
        with self._conn_lock:
            threads = list(self._conn_threads)
        for thread in threads:
            thread.join(timeout=5.0)


def serve(bind: str, handlers: Mapping[str, Handler]) -> Server:
    """Start a server on ``bind`` (``host:port``, port 0 for ephemeral)."""
    return Server(bind, handlers)
