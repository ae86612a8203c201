"""
Live mode over real sockets.

Key packets travel as UDP datagrams sent on a fixed schedule; Bob stamps
each datagram with the monotonic clock as soon as ``recvfrom`` returns
and only parses after the burst has ended.  Control messages (hello,
burst report, announcement) go over a TCP connection as length-prefixed
canonical JSON.

Session flow::

    Alice -> Bob   hello {session_id, n, send_gap}
    Bob   -> Alice ready
    Alice -> Bob   n UDP datagrams
    Alice -> Bob   burst_done {slipped}
    Bob   -> Alice announce {announcement}

Indices Alice sent late (schedule slip) are struck from the announcement
so both sides leave them out of the key.
"""

from __future__ import annotations

import json
import logging
import select
import socket
import struct
import time
from dataclasses import dataclass, field
from typing import Sequence

from arqkey.errors import ProtocolViolation, ReceiveTimeout, SocketError
from arqkey.protocol import (
    BobConfig,
    IndexAnnouncement,
    KeyMaterial,
    KeyPacket,
    ReceivedPacket,
    accept_datagrams,
    bob_process_burst,
    derive_key,
    payload_store,
)

log = logging.getLogger(__name__)

MAX_MESSAGE = 16 * 1024 * 1024
MIN_SEND_GAP = 1e-3
END_IDLE_FACTOR = 5.0
_LEN = struct.Struct(">I")
_SPIN = 5e-4


@dataclass
class SendReport:
    intended: list[float] = field(default_factory=list)
    actual: list[float] = field(default_factory=list)
    slipped: list[int] = field(default_factory=list)

    @property
    def max_slip(self) -> float:
        return max((a - i for a, i in zip(self.actual, self.intended)), default=0.0)


def send_burst_udp(
    packets: Sequence[KeyPacket],
    dest: tuple[str, int],
    send_gap: float,
    sock: socket.socket | None = None,
) -> SendReport:
    """
    Send ``packets`` at ``send_gap`` intervals and log the schedule error.

    A packet leaving more than ``send_gap / 4`` after its slot is listed
    in ``SendReport.slipped`` but still sent.

    Raises
    ------
    SocketError
        On any socket failure (including ICMP port-unreachable on loopback).
    """
    if send_gap < MIN_SEND_GAP:
        raise ValueError(f"send_gap must be at least {MIN_SEND_GAP} s")
    own = sock is None
    try:
        if own:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.connect(dest)
        report = SendReport()
        start = time.perf_counter() + send_gap
        for k, packet in enumerate(packets):
            target = start + k * send_gap
            while True:
                remaining = target - time.perf_counter()
                if remaining <= 0:
                    break
                if remaining > _SPIN:
                    time.sleep(remaining - _SPIN)
            now = time.perf_counter()
            sock.send(packet.encode())
            report.intended.append(target)
            report.actual.append(now)
            if now - target > send_gap / 4:
                report.slipped.append(packet.index)
        return report
    except OSError as exc:
        raise SocketError(f"sending to {dest}: {exc}") from exc
    finally:
        if own and sock is not None:
            sock.close()


def receive_raw_udp(
    sock: socket.socket, expected: int, send_gap: float, timeout: float
) -> list[tuple[bytes, float]]:
    """
    Collect ``(datagram, monotonic arrival)`` pairs until the burst ends.

    The burst ends ``5 * send_gap`` after the last arrival, or once
    ``expected`` datagrams were read.  Nothing is parsed here.

    Raises
    ------
    ReceiveTimeout
        If no datagram arrives within ``timeout`` seconds.
    """
    raw: list[tuple[bytes, float]] = []
    idle = END_IDLE_FACTOR * send_gap
    sock.settimeout(timeout)
    try:
        while len(raw) < expected:
            try:
                data, _ = sock.recvfrom(2048)
            except socket.timeout:
                if not raw:
                    raise ReceiveTimeout(f"no datagram within {timeout} s") from None
                break
            raw.append((data, time.monotonic_ns() * 1e-9))
            sock.settimeout(idle)
    finally:
        sock.settimeout(None)
    return raw


def receive_until_done(
    sock: socket.socket, control: socket.socket, expected: int, send_gap: float, timeout: float
) -> tuple[list[tuple[bytes, float]], dict]:
    """
    Collect datagrams while watching the control channel for ``burst_done``.

    The burst ends once ``expected`` datagrams were read, or once
    ``burst_done`` arrived and the socket then stayed idle for
    ``5 * send_gap``.  A sender stall therefore cannot cut the burst short.

    Raises
    ------
    ReceiveTimeout
        If neither socket is readable for ``timeout`` seconds.
    """
    raw: list[tuple[bytes, float]] = []
    done: dict | None = None
    idle = END_IDLE_FACTOR * send_gap
    sock.setblocking(False)
    try:
        while len(raw) < expected:
            watch = [sock] if done is not None else [sock, control]
            readable, _, _ = select.select(watch, [], [], idle if done is not None else timeout)
            if not readable:
                if done is not None:
                    break
                raise ReceiveTimeout(f"nothing on data or control channel within {timeout} s")
            if sock in readable:
                while len(raw) < expected:
                    try:
                        data, _ = sock.recvfrom(2048)
                    except BlockingIOError:
                        break
                    raw.append((data, time.monotonic_ns() * 1e-9))
            if control in readable and done is None:
                done = recv_message(control, expect="burst_done")
    finally:
        sock.setblocking(True)
    if done is None:
        done = recv_message(control, expect="burst_done")
    return raw, done


def receive_burst_udp(
    sock: socket.socket, session_id: int, expected: int, send_gap: float, timeout: float = 10.0
) -> list[ReceivedPacket]:
    """Receive one burst and return the integrity-checked, de-duplicated packets."""
    return accept_datagrams(receive_raw_udp(sock, expected, send_gap, timeout), session_id)


def bind_udp(host: str = "127.0.0.1", port: int = 0) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 1024 * 1024)
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise SocketError(f"bind {host}:{port}: {exc}") from exc
    return sock


# -- public channel ------------------------------------------------------------


def send_message(sock: socket.socket, doc: dict) -> None:
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    if len(body) > MAX_MESSAGE:
        raise ProtocolViolation(f"message of {len(body)} bytes exceeds {MAX_MESSAGE}")
    sock.sendall(_LEN.pack(len(body)) + body)


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    while size:
        chunk = sock.recv(min(size, 1 << 20))
        if not chunk:
            raise ProtocolViolation("connection closed mid-message")
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


def recv_message(sock: socket.socket, expect: str | None = None) -> dict:
    """Read one length-prefixed JSON message; malformed input aborts."""
    (size,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if size > MAX_MESSAGE:
        raise ProtocolViolation(f"message of {size} bytes exceeds {MAX_MESSAGE}")
    body = _recv_exact(sock, size)
    try:
        doc = json.loads(body)
    except ValueError as exc:
        raise ProtocolViolation(f"malformed message: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolViolation("message is not a JSON object")
    if expect is not None and doc.get("type") != expect:
        raise ProtocolViolation(f"expected {expect!r}, got {doc.get('type')!r}")
    return doc


def send_announcement(sock: socket.socket, announcement: IndexAnnouncement) -> None:
    send_message(sock, {"type": "announce", "announcement": json.loads(announcement.to_json())})


def recv_announcement(sock: socket.socket) -> IndexAnnouncement:
    doc = recv_message(sock, expect="announce")
    try:
        return IndexAnnouncement.from_json(json.dumps(doc["announcement"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolViolation(f"bad announcement: {exc}") from exc


# -- roles -------------------------------------------------------------------------


@dataclass
class AliceResult:
    announcement: IndexAnnouncement
    key: KeyMaterial
    send_report: SendReport


@dataclass
class BobResult:
    announcement: IndexAnnouncement
    key: KeyMaterial
    raw: list[tuple[bytes, float]]
    received: list[ReceivedPacket]
    slipped: list[int]


def run_alice(
    packets: Sequence[KeyPacket],
    udp_dest: tuple[str, int],
    control: socket.socket,
    send_gap: float,
) -> AliceResult:
    session_id = packets[0].session_id
    send_message(control, {"type": "hello", "session_id": session_id, "n": len(packets), "send_gap": send_gap})
    recv_message(control, expect="ready")
    report = send_burst_udp(packets, udp_dest, send_gap)
    if report.slipped:
        log.info("%d packets left late: %s", len(report.slipped), report.slipped)
    send_message(control, {"type": "burst_done", "slipped": report.slipped})
    announcement = recv_announcement(control)
    if announcement.session_id != session_id:
        raise ProtocolViolation("announcement for another session")
    if set(announcement.selected_indices) & set(report.slipped):
        raise ProtocolViolation("announcement includes slipped packets")
    key = derive_key("alice", announcement, payload_store(packets))
    return AliceResult(announcement, key, report)


def run_bob(
    udp_sock: socket.socket,
    control: socket.socket,
    arq_rtt: float,
    timeout: float = 10.0,
    config: BobConfig | None = None,
) -> BobResult:
    hello = recv_message(control, expect="hello")
    try:
        session_id, n, send_gap = int(hello["session_id"]), int(hello["n"]), float(hello["send_gap"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolViolation(f"bad hello: {exc}") from exc
    send_message(control, {"type": "ready"})
    raw, done = receive_until_done(udp_sock, control, n, send_gap, timeout)
    slipped = [int(i) for i in done.get("slipped", [])]
    received = accept_datagrams(raw, session_id)
    config = config or BobConfig(burst_size=n)
    announcement = bob_process_burst(received, arq_rtt, config).without(slipped)
    send_announcement(control, announcement)
    key = derive_key("bob", announcement, payload_store(received))
    return BobResult(announcement, key, raw, received, slipped)


def serve_once(
    udp_sock: socket.socket,
    listener: socket.socket,
    arq_rtt: float,
    timeout: float = 10.0,
    config: BobConfig | None = None,
) -> BobResult:
    """Accept a single Alice on ``listener`` and run Bob's side."""
    listener.settimeout(timeout)
    try:
        conn, _ = listener.accept()
    except socket.timeout:
        raise ReceiveTimeout(f"no sender connected within {timeout} s") from None
    with conn:
        conn.settimeout(timeout + 60)
        return run_bob(udp_sock, conn, arq_rtt, timeout, config)


def connect_control(host: str, port: int, timeout: float = 10.0) -> socket.socket:
    try:
        return socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise SocketError(f"connect {host}:{port}: {exc}") from exc


def raw_to_records(raw: Sequence[tuple[bytes, float]]) -> list[dict]:
    """Line records of a received burst for replay through the Bob engine."""
    return [{"data": data.hex(), "arrival_ns": int(round(t * 1e9))} for data, t in raw]


def records_to_raw(records: Sequence[dict]) -> list[tuple[bytes, float]]:
    return [(bytes.fromhex(r["data"]), r["arrival_ns"] * 1e-9) for r in records]
