"""Framed request/response protocol shared by every node role.

Request frame:  version u8 | opcode u8 | body
Response frame: version u8 | status u8 (0 ok, 1 error) | body

Error bodies carry the exception class name, a message and an opaque
detail blob, so a ``WrongRound`` raised by a mixer surfaces as a
``WrongRound`` at the caller.  The same frames travel over TCP (u32
length-prefixed) and over the in-process simulated network.
"""
from __future__ import annotations

import asyncio
import enum
import logging
import struct
from abc import ABC, abstractmethod
from typing import Awaitable, Callable, NamedTuple

from . import errors
from .errors import MalformedSerialization, RemoteError, RpcTimeout, ZephyrError
from .wire import VERSION, Reader, Writer

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 0.5
MAX_FRAME = 64 * 1024 * 1024


class Endpoint(NamedTuple):
    host: str
    port: int

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, _, port = text.rpartition(":")
        return cls(host, int(port))

    def write(self, w: Writer) -> Writer:
        return w.text(self.host).u16(self.port)

    @classmethod
    def read(cls, r: Reader) -> "Endpoint":
        return cls(r.text("host"), r.u16("port"))


class Op(enum.IntEnum):
    PING = 0x01
    STORE = 0x02
    FIND_NODE = 0x03
    FIND_VALUE = 0x04

    PUBLISH_KEY = 0x10
    FETCH_BUNDLE = 0x11

    BEGIN_AUTH = 0x20
    COMPLETE_AUTH = 0x21
    GET_PARAMS = 0x22
    ROTATE_MASTER = 0x23

    APPEND = 0x30
    FETCH_ALL = 0x31
    PURGE = 0x32

    SUBMIT = 0x40
    FORWARD = 0x41
    CLOSE_ROUND = 0x42
    ROTATE_KEYS = 0x43
    METRICS = 0x44

    OPEN_ROUND = 0x50
    HEARTBEAT = 0x51
    REPORT_DONE = 0x52
    HANDBACK = 0x53
    STATUS = 0x54


Handler = Callable[[Reader, Endpoint], Awaitable[bytes]]
FrameHandler = Callable[[bytes, Endpoint], Awaitable[bytes]]


def encode_request(op: int, body: bytes) -> bytes:
    return bytes([VERSION, op]) + body


def encode_ok(body: bytes) -> bytes:
    return bytes([VERSION, 0]) + body


def encode_error(exc: BaseException) -> bytes:
    detail = b""
    if isinstance(exc, errors.WrongRound):
        detail = struct.pack("<Q", exc.current_round)
    elif isinstance(exc, errors.IncompleteBundle):
        detail = b"".join(m.to_bytes(20, "little") for m in exc.missing)
    elif isinstance(exc, errors.MalformedSerialization):
        detail = struct.pack("<I", exc.offset)
    elif isinstance(exc, RemoteError):
        return encode_error_parts(exc.kind, str(exc), b"")
    return encode_error_parts(type(exc).__name__, str(exc), detail)


def encode_error_parts(kind: str, message: str, detail: bytes) -> bytes:
    return bytes([VERSION, 1]) + Writer().text(kind).text(message[:1000]).blob(detail).getvalue()


def decode_response(frame: bytes) -> bytes:
    r = Reader(frame)
    r.version()
    status = r.u8("status")
    if status == 0:
        return frame[r.offset:]
    kind = r.text("error kind")
    message = r.text("error message")
    detail = r.blob("error detail")
    raise _rebuild_error(kind, message, detail)


def _rebuild_error(kind: str, message: str, detail: bytes) -> Exception:
    if kind == "WrongRound" and len(detail) == 8:
        return errors.WrongRound(message, struct.unpack("<Q", detail)[0])
    if kind == "IncompleteBundle":
        ids = [int.from_bytes(detail[i:i + 20], "little") for i in range(0, len(detail), 20)]
        return errors.IncompleteBundle(ids)
    if kind == "MalformedSerialization" and len(detail) == 4:
        return errors.MalformedSerialization(message, struct.unpack("<I", detail)[0])
    cls = getattr(errors, kind, None)
    if isinstance(cls, type) and issubclass(cls, ZephyrError):
        try:
            return cls(message)
        except TypeError:
            pass
    return RemoteError(kind, message)


class Transport(ABC):
    @abstractmethod
    async def request(self, src: Endpoint, dst: Endpoint, payload: bytes, timeout: float) -> bytes:
        """Deliver one frame and wait for the reply; raises RpcTimeout."""

    @abstractmethod
    async def listen(self, endpoint: Endpoint, handler: FrameHandler) -> None: ...

    @abstractmethod
    async def unlisten(self, endpoint: Endpoint) -> None: ...


class Node:
    """Base for every daemon: opcode dispatch, RPC calls, owned tasks."""

    role = "node"

    def __init__(self, endpoint: Endpoint, transport: Transport, rng, tracer=None):
        self.endpoint = Endpoint(*endpoint)
        self.transport = transport
        self.rng = rng
        self.tracer = tracer
        self.handlers: dict[int, Handler] = {}
        self.tasks: set[asyncio.Task] = set()
        self.messages_processed = 0
        self.running = False

    def trace(self, event: str, **fields) -> None:
        if self.tracer is not None:
            self.tracer(self, event, fields)

    def on(self, op: Op, handler: Handler) -> None:
        self.handlers[int(op)] = handler

    async def start(self) -> None:
        self.running = True
        await self.transport.listen(self.endpoint, self._dispatch)

    async def stop(self) -> None:
        self.running = False
        await self.transport.unlisten(self.endpoint)
        current = asyncio.current_task()
        pending = [t for t in self.tasks if t is not current]
        for t in pending:
            t.cancel()
        for t in pending:
            try:
                await t
            except (asyncio.CancelledError, Exception):
                pass
        self.tasks.clear()

    def spawn(self, coro) -> asyncio.Task:
        task = asyncio.get_running_loop().create_task(coro)
        self.tasks.add(task)
        task.add_done_callback(self._task_done)
        return task

    def _task_done(self, task: asyncio.Task) -> None:
        self.tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            log.error("%s %s: background task failed: %r", self.role, self.endpoint, task.exception())
            self.trace("task-failed", error=repr(task.exception()))

    async def _dispatch(self, frame: bytes, src: Endpoint) -> bytes:
        self.messages_processed += 1
        try:
            r = Reader(frame)
            r.version()
            op = r.u8("opcode")
            handler = self.handlers.get(op)
            if handler is None:
                raise MalformedSerialization(f"unsupported opcode {op:#x}", 1)
            return encode_ok(await handler(r, src))
        except ZephyrError as exc:
            return encode_error(exc)
        except asyncio.CancelledError:
            raise
        except Exception as exc:  # never let a handler bug take the node down
            log.exception("%s %s: handler crashed", self.role, self.endpoint)
            return encode_error_parts("InternalError", repr(exc), b"")

    async def call(self, dst: Endpoint, op: Op, body: bytes = b"", timeout: float | None = None) -> bytes:
        frame = encode_request(op, body)
        reply = await self.transport.request(
            self.endpoint, Endpoint(*dst), frame, DEFAULT_TIMEOUT if timeout is None else timeout
        )
        return decode_response(reply)

    def state_size(self) -> int:
        """Rough count of bytes retained by this node (reported as memory)."""
        return 0


class Client:
    """Endpoint-less caller used by user-side code (no listener)."""

    def __init__(self, transport: Transport, name: str = "client", port: int = 1):
        self.transport = transport
        self.endpoint = Endpoint(name, port)

    async def call(self, dst: Endpoint, op: Op, body: bytes = b"", timeout: float | None = None) -> bytes:
        reply = await self.transport.request(
            self.endpoint, Endpoint(*dst), encode_request(op, body),
            DEFAULT_TIMEOUT if timeout is None else timeout,
        )
        return decode_response(reply)


class TcpTransport(Transport):
    """Live transport: one TCP connection per request, u32 LE frame prefix."""

    def __init__(self) -> None:
        self._servers: dict[Endpoint, asyncio.AbstractServer] = {}

    async def request(self, src: Endpoint, dst: Endpoint, payload: bytes, timeout: float) -> bytes:
        async def exchange() -> bytes:
            reader, writer = await asyncio.open_connection(dst.host, dst.port)
            try:
                writer.write(struct.pack("<I", len(payload)) + payload)
                await writer.drain()
                return await _read_frame(reader)
            finally:
                writer.close()

        try:
            return await asyncio.wait_for(exchange(), timeout)
        except (asyncio.TimeoutError, OSError, asyncio.IncompleteReadError) as exc:
            raise RpcTimeout(f"{dst}: {exc!r}") from None

    async def listen(self, endpoint: Endpoint, handler: FrameHandler) -> None:
        async def on_conn(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            try:
                frame = await _read_frame(reader)
                peer = writer.get_extra_info("peername") or ("?", 1)
                reply = await handler(frame, Endpoint(str(peer[0]), int(peer[1]) or 1))
                writer.write(struct.pack("<I", len(reply)) + reply)
                await writer.drain()
            except (asyncio.IncompleteReadError, ConnectionError, MalformedSerialization):
                pass
            finally:
                writer.close()

        self._servers[endpoint] = await asyncio.start_server(on_conn, endpoint.host, endpoint.port)

    async def unlisten(self, endpoint: Endpoint) -> None:
        server = self._servers.pop(endpoint, None)
        if server is not None:
            server.close()
            await server.wait_closed()


async def _read_frame(reader: asyncio.StreamReader) -> bytes:
    (n,) = struct.unpack("<I", await reader.readexactly(4))
    if n > MAX_FRAME:
        raise MalformedSerialization(f"frame of {n} bytes exceeds limit", 0)
    return await reader.readexactly(n)
