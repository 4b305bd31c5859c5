"""TCP runtime: one reader thread per client connection, barrier-synchronous rounds."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from pathlib import Path
from typing import Dict, Optional, Tuple

from . import wire
from .protocol import FedClient, FedServer
from .wire import FrameParser, MessageType, ProtocolError

log = logging.getLogger(__name__)

Address = Tuple[str, int]


class FederationError(RuntimeError):
    """The run was aborted; no partial aggregation was applied."""


def parse_address(text: str) -> Address:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1", int(port))


def _reader(conn: socket.socket, idx: int, out: "queue.Queue"):
    parser = FrameParser()
    try:
        while True:
            chunk = conn.recv(1 << 16)
            if not chunk:
                parser.close()
                out.put((idx, None))
                return
            for frame in parser.feed(chunk):
                out.put((idx, frame))
    except Exception as exc:  # surfaced to the coordinator thread
        out.put((idx, exc))


def server_run(listen: Address, server: FedServer, accept_timeout: float = 60.0,
               round_timeout: Optional[float] = None, port_file=None) -> FedServer:
    """Serve one complete run. Raises :class:`FederationError` on any client failure."""
    lsock = socket.create_server(listen)
    lsock.settimeout(accept_timeout)
    port = lsock.getsockname()[1]
    if port_file is not None:
        tmp = Path(str(port_file) + ".tmp")
        tmp.write_text(str(port))
        tmp.replace(port_file)
    log.info("listening on %s:%d for %d clients", listen[0], port, server.expected)
    conns: Dict[int, socket.socket] = {}
    inbox: "queue.Queue" = queue.Queue()
    try:
        for idx in range(server.expected):
            try:
                conn, _ = lsock.accept()
            except socket.timeout:
                raise FederationError(f"only {idx} of {server.expected} clients connected") from None
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conns[idx] = conn
            threading.Thread(target=_reader, args=(conn, idx, inbox), daemon=True).start()

        cid_of: Dict[int, int] = {}
        conn_of: Dict[int, socket.socket] = {}

        def next_frame():
            try:
                idx, item = inbox.get(timeout=round_timeout)
            except queue.Empty:
                raise FederationError("timed out waiting for clients") from None
            if item is None or isinstance(item, Exception):
                who = cid_of.get(idx, f"connection {idx}")
                raise FederationError(f"client {who} failed: {item or 'disconnected'}")
            return idx, item

        while not server.ready:
            idx, frame = next_frame()
            if frame.type != MessageType.HELLO:
                raise FederationError(f"expected HELLO, got {frame.type.name}")
            cid = server.handle_frame(frame)
            cid_of[idx] = cid
            conn_of[cid] = conns[idx]
        server.begin()

        for _ in range(server.rounds):
            for cid in server.client_ids:
                conn_of[cid].sendall(server.global_frame(cid))
            while not server.round_complete:
                idx, frame = next_frame()
                server.handle_frame(frame, cid_of[idx])
            server.finish_round()

        for cid in server.client_ids:
            conn_of[cid].sendall(server.shutdown_frame(cid))
    except (ProtocolError, wire.DecodeError, wire.FramingError, OSError) as exc:
        raise FederationError(str(exc)) from exc
    finally:
        for conn in conns.values():
            try:
                conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            conn.close()
        lsock.close()
    return server


def connect(addr: Address, timeout: float = 60.0) -> socket.socket:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection(addr, timeout=timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(None)
            return sock
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def client_run(addr: Address, client: FedClient, connect_timeout: float = 60.0) -> FedClient:
    """Register, then serve GLOBAL messages until SHUTDOWN."""
    sock = connect(addr, connect_timeout)
    parser = FrameParser()
    try:
        sock.sendall(client.hello_frame())
        while not client.done:
            chunk = sock.recv(1 << 16)
            if not chunk:
                raise ProtocolError(f"server closed the connection before SHUTDOWN (round {client.round})")
            for frame in parser.feed(chunk):
                for reply in client.handle(frame):
                    sock.sendall(reply)
                if client.done:
                    break
    finally:
        sock.close()
    return client
