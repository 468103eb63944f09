"""Transports between the server and its clients.

Each client has one ordered, bidirectional server channel carrying framed
messages. Every frame crossing a server channel is appended to ``capture``:
that is exactly the byte stream an honest-but-curious server observes.

Key material for clients travels on a separate peer channel that never
touches the server. Both kinds of channel are plain (in-process or loopback
TCP); a deployment would wrap the sockets in TLS.
"""
from __future__ import annotations

import logging
import socket
import threading
from typing import Sequence

from fedmf.protocol.wire import FrameError, read_frame

logger = logging.getLogger(__name__)

DOWN = "down"  # server -> client
UP = "up"  # client -> server


class TransportError(RuntimeError):
    pass


class Transport:
    name = "abstract"

    def __init__(self, capture: bool = False):
        self.record = capture
        self.capture: list[tuple[str, int, bytes]] = []
        self.peer_capture: list[tuple[int, int, bytes]] = []
        self.bytes_down = 0
        self.bytes_up = 0
        self.clients: Sequence = ()

    def _log(self, direction: str, user_id: int, frame: bytes):
        if direction == DOWN:
            self.bytes_down += len(frame)
        else:
            self.bytes_up += len(frame)
        if self.record:
            self.capture.append((direction, user_id, frame))

    def attach(self, clients: Sequence) -> None:
        self.clients = clients

    def peer_send(self, sender: int, receiver: int, frame: bytes) -> None:
        """Client-to-client delivery (key distribution); bypasses the server."""
        if self.record:
            self.peer_capture.append((sender, receiver, frame))
        reply = self.clients[receiver].handle(frame)
        if reply is not None:
            raise TransportError("peer messages expect no reply")

    def upload(self, user_id: int, frame: bytes) -> bytes:
        """Client-initiated frame to the server."""
        raise NotImplementedError

    def exchange(self, user_id: int, frame: bytes) -> bytes:
        """Send a request to a client and wait for its reply."""
        raise NotImplementedError

    def notify(self, user_id: int, frame: bytes) -> None:
        """Send a frame that expects no reply."""
        raise NotImplementedError

    def close(self) -> None:
        pass


class MemoryTransport(Transport):
    """Synchronous in-process delivery; client code runs on the caller's thread."""

    name = "memory"

    def upload(self, user_id: int, frame: bytes) -> bytes:
        self._log(UP, user_id, frame)
        return frame

    def exchange(self, user_id: int, frame: bytes) -> bytes:
        self._log(DOWN, user_id, frame)
        reply = self.clients[user_id].handle(frame)
        if reply is None:
            raise TransportError(f"client {user_id} sent no reply")
        self._log(UP, user_id, reply)
        return reply

    def notify(self, user_id: int, frame: bytes) -> None:
        self._log(DOWN, user_id, frame)
        if self.clients[user_id].handle(frame) is not None:
            raise TransportError(f"client {user_id} replied to a notification")


class TcpTransport(Transport):
    """Loopback TCP, one connection and one worker thread per client."""

    name = "tcp"

    def __init__(self, capture: bool = False, host: str = "127.0.0.1", timeout: float = 600.0):
        super().__init__(capture)
        self.host = host
        self.timeout = timeout
        self._server_socks: list[socket.socket] = []
        self._server_files = []
        self._client_socks: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self.errors: dict[int, BaseException] = {}

    def attach(self, clients: Sequence) -> None:
        super().attach(clients)
        with socket.create_server((self.host, 0)) as listener:
            addr = listener.getsockname()
            for client in clients:
                cs = socket.create_connection(addr, timeout=self.timeout)
                ss, _ = listener.accept()
                ss.settimeout(self.timeout)
                for s in (cs, ss):
                    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._client_socks.append(cs)
                self._server_socks.append(ss)
                self._server_files.append(ss.makefile("rb"))
                th = threading.Thread(target=self._serve_client, args=(client, cs),
                                      name=f"fedmf-client-{client.user_id}", daemon=True)
                self._threads.append(th)
                th.start()

    def _serve_client(self, client, sock: socket.socket) -> None:
        stream = sock.makefile("rb")
        try:
            while not client.done:
                frame = read_frame(stream)
                if frame is None:
                    break
                reply = client.handle(frame)
                if reply is not None:
                    sock.sendall(reply)
        except BaseException as exc:  # reported to the server side on read
            self.errors[client.user_id] = exc
            logger.exception("client %d failed", client.user_id)
        finally:
            stream.close()
            try:
                sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def _recv(self, user_id: int) -> bytes:
        try:
            frame = read_frame(self._server_files[user_id])
        except (FrameError, OSError) as exc:
            raise TransportError(f"client {user_id}: {exc}") from self.errors.get(user_id, exc)
        if frame is None:
            cause = self.errors.get(user_id)
            raise TransportError(f"client {user_id} closed the connection") from cause
        return frame

    def upload(self, user_id: int, frame: bytes) -> bytes:
        # Written on the client's end of its socket, read back on the server's.
        self._client_socks[user_id].sendall(frame)
        received = self._recv(user_id)
        self._log(UP, user_id, received)
        return received

    def exchange(self, user_id: int, frame: bytes) -> bytes:
        self._log(DOWN, user_id, frame)
        self._server_socks[user_id].sendall(frame)
        reply = self._recv(user_id)
        self._log(UP, user_id, reply)
        return reply

    def notify(self, user_id: int, frame: bytes) -> None:
        self._log(DOWN, user_id, frame)
        self._server_socks[user_id].sendall(frame)

    def close(self) -> None:
        for s in self._server_socks:
            try:
                s.shutdown(socket.SHUT_WR)
            except OSError:
                pass
        for th in self._threads:
            th.join(timeout=self.timeout)
        for f in self._server_files:
            f.close()
        for s in self._server_socks + self._client_socks:
            s.close()


def make_transport(name: str, capture: bool = False) -> Transport:
    if name == "memory":
        return MemoryTransport(capture)
    if name == "tcp":
        return TcpTransport(capture)
    raise ValueError(f"unknown transport {name!r}")
