"""Carriers for protocol frames: in-process simulation, TCP, and transcript replay.

All carriers move encoded frames, so every run exercises the wire format.
The host side wraps a carrier in a ``HostEndpoint`` that numbers outgoing
frames, checks incoming sequence numbers and optionally records a transcript
(one frame JSON per line).
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
from collections import deque

import numpy as np

from .errors import InputError, ProtocolError
from .host import HostSettings, HostState
from .protocol import HEADER, HOST, MAX_FRAME, Abort, SequenceTracker, decode, encode, site_name
from .site import SiteState

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 300.0


def session_timeout() -> float:
    return float(os.environ.get("DCWB_TIMEOUT", DEFAULT_TIMEOUT))


def frame_text(data: bytes) -> str:
    return data[HEADER.size :].decode("utf-8")


# ---------------------------------------------------------------------------
# Site side
# ---------------------------------------------------------------------------


class SiteNode:
    """A SiteState behind the wire format: frames in, frames out."""

    def __init__(self, state: SiteState):
        self.state = state
        self.name = site_name(state.site_id)
        self.tracker = SequenceTracker(self.name)

    def _frame(self, msg) -> bytes:
        return encode(self.tracker.wrap(HOST, msg))

    def hello_frame(self) -> bytes:
        return self._frame(self.state.hello())

    def deliver(self, data: bytes) -> list[bytes]:
        try:
            msg = self.tracker.accept(decode(data))
        except ProtocolError as exc:
            self.state.phase = "dead"
            return [self._frame(Abort(str(exc), exc.exit_code, self.state.site_id))]
        return [self._frame(r) for r in self.state.handle(msg)]

    @property
    def finished(self) -> bool:
        return self.state.phase in ("done", "dead")


# ---------------------------------------------------------------------------
# Host side
# ---------------------------------------------------------------------------


class HostEndpoint:
    """Message-level interface used by ``HostState`` on top of a byte carrier."""

    def __init__(self, carrier, record: bool = True):
        self.carrier = carrier
        self.tracker = SequenceTracker(HOST)
        self.transcript: list[str] | None = [] if record else None

    def _log(self, data: bytes):
        if self.transcript is not None:
            self.transcript.append(frame_text(data))

    def _accept(self, sid: int, data: bytes):
        self._log(data)
        env = decode(data)
        if env.sender != site_name(sid):
            raise ProtocolError(f"frame from {env.sender} on the channel of site {sid}")
        return self.tracker.accept(env)

    def open(self) -> dict:
        hellos = self.carrier.connect()
        return {sid: self._accept(sid, data) for sid, data in sorted(hellos.items())}

    def send(self, sid: int, msg) -> None:
        data = encode(self.tracker.wrap(site_name(sid), msg))
        self._log(data)
        self.carrier.send_bytes(sid, data)

    def recv(self, sid: int):
        return self._accept(sid, self.carrier.recv_bytes(sid))

    def close(self):
        self.carrier.close()

    def write_transcript(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.transcript or []:
                fh.write(line + "\n")


class SimulatedCarrier:
    """Deterministic in-process cluster: a frame sent to a site is processed at
    once and its replies are queued for the host to collect."""

    def __init__(self, nodes: list[SiteNode]):
        self.nodes = {n.state.site_id: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise InputError("duplicate site ids")
        self.queues = {sid: deque() for sid in self.nodes}

    def connect(self) -> dict[int, bytes]:
        return {sid: self.nodes[sid].hello_frame() for sid in sorted(self.nodes)}

    def send_bytes(self, sid: int, data: bytes) -> None:
        if sid not in self.nodes:
            raise ProtocolError(f"no site {sid}")
        self.queues[sid].extend(self.nodes[sid].deliver(data))

    def inject(self, sid: int, data: bytes) -> None:
        """Deliver a raw frame bypassing the host's numbering (fault injection)."""
        self.send_bytes(sid, data)

    def recv_bytes(self, sid: int) -> bytes:
        if not self.queues[sid]:
            raise ProtocolError(f"site {sid} has no pending reply")
        return self.queues[sid].popleft()

    def close(self):
        pass


# ---------------------------------------------------------------------------
# TCP
# ---------------------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame" if buf else "connection closed")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    head = _recv_exact(sock, HEADER.size)
    (length,) = HEADER.unpack(head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    return head + _recv_exact(sock, length)


def parse_address(text: str, default_port: int | None = None) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        if default_port is None:
            raise InputError(f"address {text!r} lacks a port")
        return text, default_port
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise InputError(f"bad port in address {text!r}") from None


def serve_site(node: SiteNode, listener: socket.socket, timeout: float | None = None) -> None:
    """Accept one host connection on ``listener`` and run the session to completion."""
    timeout = session_timeout() if timeout is None else timeout
    listener.settimeout(timeout)
    try:
        conn, _ = listener.accept()
    finally:
        listener.close()
    with conn:
        conn.settimeout(timeout)
        conn.sendall(node.hello_frame())
        while not node.finished:
            try:
                data = read_frame(conn)
            except (ProtocolError, OSError):
                log.warning("site %d: host closed the connection", node.state.site_id)
                return
            for reply in node.deliver(data):
                conn.sendall(reply)


def listen(address: str = "127.0.0.1:0") -> socket.socket:
    host, port = parse_address(address, int(os.environ.get("DCWB_PORT", 0)))
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(1)
    return sock


class TcpCarrier:
    """One TCP connection per site; the greeting identifies the site."""

    def __init__(self, addresses: list[str], timeout: float | None = None):
        self.addresses = list(addresses)
        self.timeout = session_timeout() if timeout is None else timeout
        self.socks: dict[int, socket.socket] = {}

    def connect(self) -> dict[int, bytes]:
        out = {}
        for addr in self.addresses:
            sock = socket.create_connection(parse_address(addr), timeout=self.timeout)
            sock.settimeout(self.timeout)
            data = read_frame(sock)
            env = decode(data)
            sid = env.message.site_id if isinstance(env.message, Abort) else getattr(env.message, "site_id", None)
            if sid is None or env.sender != site_name(sid):
                raise ProtocolError(f"{addr}: greeting does not identify a site")
            if sid in self.socks:
                raise ProtocolError(f"duplicate site id {sid} at {addr}")
            self.socks[sid] = sock
            out[sid] = data
        return out

    def send_bytes(self, sid: int, data: bytes) -> None:
        try:
            self.socks[sid].sendall(data)
        except OSError as exc:
            raise ProtocolError(f"site {sid}: connection lost ({exc})") from None

    def recv_bytes(self, sid: int) -> bytes:
        try:
            return read_frame(self.socks[sid])
        except (OSError, socket.timeout) as exc:
            raise ProtocolError(f"site {sid}: connection lost ({exc})") from None

    def close(self):
        for s in self.socks.values():
            s.close()
        self.socks = {}


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------


class ReplayCarrier:
    """Plays recorded site frames back to a host and checks that the host
    sends exactly the recorded frames."""

    def __init__(self, lines: list[str]):
        self.inbound: dict[int, deque] = {}
        self.outbound: dict[int, deque] = {}
        for line in lines:
            if not line.strip():
                continue
            doc = json.loads(line)
            if doc["sender"] == HOST:
                sid = int(doc["receiver"].split(":")[1])
                self.outbound.setdefault(sid, deque()).append(line)
            else:
                sid = int(doc["sender"].split(":")[1])
                self.inbound.setdefault(sid, deque()).append(line)

    @classmethod
    def from_file(cls, path) -> "ReplayCarrier":
        with open(path, encoding="utf-8") as fh:
            return cls(fh.read().splitlines())

    @staticmethod
    def _bytes(line: str) -> bytes:
        raw = line.encode("utf-8")
        return HEADER.pack(len(raw)) + raw

    def connect(self) -> dict[int, bytes]:
        return {sid: self.recv_bytes(sid) for sid in sorted(self.inbound)}

    def send_bytes(self, sid: int, data: bytes) -> None:
        queue = self.outbound.get(sid)
        if not queue:
            raise ProtocolError(f"replay: unexpected frame to site {sid}")
        want = queue.popleft()
        if frame_text(data) != want:
            raise ProtocolError(f"replay: host frame to site {sid} diverges from the transcript")

    def recv_bytes(self, sid: int) -> bytes:
        queue = self.inbound.get(sid)
        if not queue:
            raise ProtocolError(f"replay: transcript exhausted for site {sid}")
        return self._bytes(queue.popleft())

    def close(self):
        pass


# ---------------------------------------------------------------------------
# Cluster helpers
# ---------------------------------------------------------------------------


def partition_site_id(part, k: int) -> int:
    if part.site_column is not None and part.n_rows:
        ids = np.unique(part.site_ids())
        if len(ids) == 1:
            return int(ids[0])
    return k + 1


def spawn_simulated_cluster(partitions, privacy_level: int = 5, record: bool = True):
    """Host endpoint over an in-process cluster with one site per partition."""
    if not partitions:
        raise InputError("at least one partition is required")
    nodes = []
    for k, part in enumerate(partitions):
        if part.n_rows == 0:
            raise InputError(f"partition {k + 1} is empty")
        nodes.append(SiteNode(SiteState(partition_site_id(part, k), part, privacy_level)))
    carrier = SimulatedCarrier(nodes)
    return HostEndpoint(carrier, record), nodes


def spawn_loopback_cluster(partitions, privacy_level: int = 5, record: bool = True):
    """Host endpoint over TCP loopback, one site server thread per partition."""
    if not partitions:
        raise InputError("at least one partition is required")
    threads, addresses, nodes = [], [], []
    for k, part in enumerate(partitions):
        if part.n_rows == 0:
            raise InputError(f"partition {k + 1} is empty")
        node = SiteNode(SiteState(partition_site_id(part, k), part, privacy_level))
        sock = listen("127.0.0.1:0")
        addresses.append("127.0.0.1:%d" % sock.getsockname()[1])
        t = threading.Thread(target=serve_site, args=(node, sock), daemon=True)
        t.start()
        threads.append(t)
        nodes.append(node)
    endpoint = HostEndpoint(TcpCarrier(addresses), record)
    endpoint.threads = threads
    return endpoint, nodes


def fit_distributed(partitions, specs, settings: HostSettings, carrier: str = "simulated", site_level: int | None = None):
    """Run a full distributed fit over local partitions.

    ``carrier`` is ``simulated`` or ``tcp`` (loopback site servers). Returns
    ``(model, ledger, transcript_lines)``.
    """
    level = settings.privacy_level if site_level is None else site_level
    if carrier == "simulated":
        endpoint, _ = spawn_simulated_cluster(partitions, level)
    elif carrier == "tcp":
        endpoint, _ = spawn_loopback_cluster(partitions, level)
    else:
        raise InputError(f"unknown carrier {carrier!r}")
    host = HostState(endpoint, specs, settings)
    try:
        model = host.run()
    finally:
        endpoint.close()
        for t in getattr(endpoint, "threads", []):
            t.join(timeout=5)
    return model, host.ledger, list(endpoint.transcript or [])
