"""Persistent agent sessions over line-delimited JSON on TCP.

Message handling is synchronous and transport agnostic: a ``Connection`` only
needs ``send`` and ``close``. The asyncio server feeds each connection's lines
through ``handle_agent_message`` one at a time, off the event loop.
"""
from __future__ import annotations

import asyncio
import logging
import secrets
import socket
import threading
from dataclasses import dataclass
from enum import Enum

from cloudcraft.control_plane.protocol import MAX_LINE_BYTES, AgentMessage, MessageKind, ProtocolError
from cloudcraft.domain import Clock, SystemClock
from cloudcraft.errors import CloudCraftError, Conflict
from cloudcraft.fulfillment import AgentUnreachable, Fulfillment, UnknownPrinter

log = logging.getLogger(__name__)


class SessionConflict(Conflict):
    pass


class OutOfOrder(Conflict):
    pass


class BadPrinterCredential(CloudCraftError):
    status = 401


class SessionState(str, Enum):
    CONNECTED = "Connected"
    DEGRADED = "Degraded"
    DISCONNECTED = "Disconnected"


@dataclass
class AgentSession:
    printer_id: str
    session_token: str
    state: SessionState
    last_message_at: float
    # Cumulative controller energy between jobs, as last reported; not billed.
    idle_wh: float = 0.0


class Connection:
    """One agent link. Subclasses deliver bytes; this base records them."""

    def __init__(self, peer: str = "-"):
        self.peer = peer
        self.session: AgentSession | None = None
        self.last_sequence = 0
        self.out_sequence = 0
        # Set when the gateway has decided to hang up after its next reply.
        self.closing = False
        self.closed = False
        self.sent: list[AgentMessage] = []

    def send(self, msg: AgentMessage) -> None:
        self.sent.append(msg)

    def close(self) -> None:
        self.closed = True


class _StreamConnection(Connection):
    def __init__(self, writer: asyncio.StreamWriter, loop: asyncio.AbstractEventLoop):
        peer = writer.get_extra_info("peername")
        super().__init__(str(peer))
        self.writer, self.loop = writer, loop

    def send(self, msg: AgentMessage) -> None:
        if self.closed:
            raise AgentUnreachable(f"connection to {self.peer} is closed")
        try:
            self.loop.call_soon_threadsafe(self.writer.write, msg.encode())
        except RuntimeError as exc:
            raise AgentUnreachable(str(exc)) from None

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            try:
                self.loop.call_soon_threadsafe(self.writer.close)
            except RuntimeError:
                pass


_PROGRESS = {MessageKind.PHASE_STARTED, MessageKind.PHASE_COMPLETED, MessageKind.METER_SAMPLE}


class CloudGateway:
    def __init__(self, fulfillment: Fulfillment, clock: Clock | None = None, *, agent_ttl_s: float = 60.0):
        if agent_ttl_s <= 0:
            raise ValueError("agent_ttl_s must be positive")
        self.fulfillment = fulfillment
        self.clock = clock or SystemClock()
        self.agent_ttl_s = agent_ttl_s
        self._lock = threading.Lock()
        self._live: dict[str, Connection] = {}
        self._server: asyncio.base_events.Server | None = None
        self._sweeper: asyncio.Task | None = None

    # Sessions ----------------------------------------------------------------

    def session(self, printer_id: str) -> AgentSession | None:
        conn = self._live.get(printer_id)
        return conn.session if conn else None

    def sessions(self) -> list[AgentSession]:
        return [c.session for c in list(self._live.values()) if c.session]

    def send_job(self, printer_id: str, assignment: dict) -> None:
        """Deliver a JobAssign; raises ``AgentUnreachable`` without a live session."""
        with self._lock:
            conn = self._live.get(printer_id)
            if conn is None or conn.closing or conn.closed or conn.session.state is SessionState.DISCONNECTED:
                raise AgentUnreachable(f"no live session for {printer_id}")
            conn.out_sequence += 1
            msg = AgentMessage(MessageKind.JOB_ASSIGN, conn.out_sequence, printer_id, dict(assignment))
        conn.send(msg)
        log.info("assigned %s to %s", assignment.get("job_id"), printer_id)

    def _reject(self, conn: Connection, exc: CloudCraftError, *, close: bool = False, **extra) -> AgentMessage:
        with self._lock:
            conn.out_sequence += 1
            seq = conn.out_sequence
        if close:
            conn.closing = True
        printer = conn.session.printer_id if conn.session else ""
        return AgentMessage(MessageKind.REJECT, seq, printer, {"error": exc.code, "message": str(exc), **extra})

    def _register(self, conn: Connection, msg: AgentMessage) -> None:
        if conn.session is not None:
            raise ProtocolError("already registered on this connection")
        printer_id = msg.printer_id
        try:
            self.fulfillment.printer_status(printer_id)
        except UnknownPrinter:
            raise UnknownPrinter(f"unknown printer {printer_id!r}") from None
        if not self.fulfillment.verify_printer(printer_id, str(msg.body.get("credential", ""))):
            raise BadPrinterCredential(f"bad credential for {printer_id}")
        with self._lock:
            other = self._live.get(printer_id)
            if other is not None and other is not conn and not (other.closing or other.closed):
                raise SessionConflict(f"{printer_id} already has a live session")
            conn.session = AgentSession(printer_id, secrets.token_urlsafe(16), SessionState.CONNECTED, self.clock.now())
            self._live[printer_id] = conn
        log.info("agent %s connected from %s", printer_id, conn.peer)
        self.fulfillment.printer_connected(printer_id)

    def handle_agent_message(self, conn: Connection, msg: AgentMessage) -> AgentMessage | None:
        """Apply one inbound message; returns a Reject reply when it is refused."""
        if conn.session is None and msg.kind is not MessageKind.REGISTER:
            return self._reject(conn, ProtocolError("first message must be Register"), close=True)
        expected = conn.last_sequence + 1
        if msg.sequence != expected:
            exc = OutOfOrder(f"sequence {msg.sequence}, expected {expected}")
            return self._reject(conn, exc, close=conn.session is None, expected=expected, got=msg.sequence)
        if conn.session is not None and msg.printer_id != conn.session.printer_id:
            return self._reject(conn, ProtocolError("printer_id does not match the session"))

        if msg.kind is MessageKind.REGISTER:
            try:
                self._register(conn, msg)
            except CloudCraftError as exc:
                log.warning("refused Register for %s: %s", msg.printer_id, exc)
                return self._reject(conn, exc, close=True)
            conn.last_sequence = msg.sequence
            return None

        conn.last_sequence = msg.sequence
        session = conn.session
        session.last_message_at = self.clock.now()
        if session.state is SessionState.DEGRADED:
            session.state = SessionState.CONNECTED
        body, printer_id = msg.body, session.printer_id
        try:
            if msg.kind is MessageKind.HEARTBEAT:
                idle = body.get("idle_wh")
                if isinstance(idle, (int, float)) and not isinstance(idle, bool):
                    session.idle_wh = float(idle)
            elif msg.kind is MessageKind.JOB_ACCEPT:
                self.fulfillment.accept_job(body["job_id"], printer_id)
            elif msg.kind in _PROGRESS:
                self.fulfillment.record_progress(body["job_id"], msg.kind.value, body, printer_id)
            elif msg.kind is MessageKind.JOB_COMPLETE:
                self.fulfillment.complete_job(body["job_id"], body, printer_id)
            elif msg.kind is MessageKind.JOB_ERROR:
                self.fulfillment.fail_job(body["job_id"], str(body.get("reason", "agent reported an error")), printer_id)
            else:
                raise ProtocolError(f"{msg.kind.value} is not an agent-to-gateway message")
        except KeyError as exc:
            return self._reject(conn, ProtocolError(f"{msg.kind.value} body lacks {exc}"), sequence=msg.sequence)
        except CloudCraftError as exc:
            log.warning("%s from %s refused: %s", msg.kind.value, printer_id, exc)
            return self._reject(conn, exc, sequence=msg.sequence)
        return None

    def connection_lost(self, conn: Connection, reason: str = "agent disconnected") -> None:
        conn.close()
        with self._lock:
            if conn.session is None or self._live.get(conn.session.printer_id) is not conn:
                return
            del self._live[conn.session.printer_id]
            conn.session.state = SessionState.DISCONNECTED
        log.warning("agent %s lost: %s", conn.session.printer_id, reason)
        self.fulfillment.printer_disconnected(conn.session.printer_id, reason)

    def sweep(self) -> None:
        """Degrade sessions silent for two heartbeat intervals; drop those past the TTL."""
        now = self.clock.now()
        for conn in list(self._live.values()):
            session = conn.session
            silent = now - session.last_message_at
            if silent > self.agent_ttl_s:
                self.connection_lost(conn, f"silent for {silent:.1f}s")
            elif silent > self.agent_ttl_s * 2 / 3 and session.state is SessionState.CONNECTED:
                session.state = SessionState.DEGRADED
                log.info("agent %s degraded after %.1fs of silence", session.printer_id, silent)

    # Network -----------------------------------------------------------------

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = _StreamConnection(writer, asyncio.get_running_loop())
        reason = "agent disconnected"
        try:
            while not conn.closing:
                try:
                    line = await reader.readline()
                except (ValueError, asyncio.LimitOverrunError):
                    conn.send(self._reject(conn, ProtocolError("line too long"), close=True))
                    break
                if not line:
                    break
                if not line.strip():
                    continue
                try:
                    msg = AgentMessage.decode(line)
                except ProtocolError as exc:
                    conn.send(self._reject(conn, exc, close=conn.session is None))
                    continue
                reply = await asyncio.to_thread(self.handle_agent_message, conn, msg)
                if reply is not None:
                    conn.send(reply)
            # Let any reply scheduled from a worker thread reach the transport.
            await asyncio.sleep(0)
            await writer.drain()
        except (ConnectionError, OSError) as exc:
            reason = f"connection error: {exc}"
        finally:
            await asyncio.to_thread(self.connection_lost, conn, reason)
            try:
                writer.close()
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self, host: str = "127.0.0.1", port: int = 0, *, sock: socket.socket | None = None):
        if sock is not None:
            self._server = await asyncio.start_server(self._serve, sock=sock, limit=MAX_LINE_BYTES)
        else:
            self._server = await asyncio.start_server(self._serve, host, port, limit=MAX_LINE_BYTES)
        self._sweeper = asyncio.create_task(self._sweep_forever())
        return self._server

    @property
    def address(self) -> tuple[str, int]:
        return self._server.sockets[0].getsockname()[:2]

    async def _sweep_forever(self) -> None:
        interval = max(self.agent_ttl_s / 6, 0.05)
        while True:
            await asyncio.sleep(interval)
            await asyncio.to_thread(self.sweep)

    async def stop(self) -> None:
        if self._sweeper is not None:
            self._sweeper.cancel()
        if self._server is not None:
            self._server.close()
            for conn in list(self._live.values()):
                conn.close()
            await self._server.wait_closed()
