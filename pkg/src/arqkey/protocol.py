"""
Alice/Bob protocol engines.

Alice sends a burst of packets carrying random payloads.  Bob keeps the
packets whose arrival times sit on the regularised schedule (first
attempt deliveries), announces their indices over the public channel and
both sides hash the corresponding payloads into a 256-bit key.  Later
bursts of updating packets are hashed into the current key to refresh it.

Wire format of a key packet (big endian, 52 bytes)::

    magic "KEY1" | session_id u64 | index u32 | payload 32 B | crc32 u32
"""

from __future__ import annotations

import hashlib
import json
import secrets
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from arqkey.errors import IntegrityError, MissingPayload, NoConvergence, SessionAbort, Unreachable
from arqkey.regularize import RegularizationFit, RegularizerConfig, regularize_and_classify
from arqkey.security import ChannelRates, min_packets_for_sec

MAGIC = b"KEY1"
PAYLOAD_SIZE = 32
_HEADER = struct.Struct(">4sQI")
_PACKET = struct.Struct(f">4sQI{PAYLOAD_SIZE}sI")
PACKET_SIZE = _PACKET.size

TAG_INITIAL = b"arqkey/v1/initial-key"
TAG_REFRESH = b"arqkey/v1/refresh-key"
TAG_FINGERPRINT = b"arqkey/v1/fingerprint"
TAG_TEST_PAYLOAD = b"arqkey/v1/test-payload"


def _crc(session_id: int, index: int, payload: bytes) -> int:
    return zlib.crc32(_HEADER.pack(MAGIC, session_id, index) + payload) & 0xFFFFFFFF


@dataclass(frozen=True)
class KeyPacket:
    index: int
    session_id: int
    payload: bytes
    integrity: int

    @classmethod
    def build(cls, session_id: int, index: int, payload: bytes) -> "KeyPacket":
        if len(payload) != PAYLOAD_SIZE:
            raise ValueError(f"payload must be {PAYLOAD_SIZE} bytes")
        return cls(index, session_id, bytes(payload), _crc(session_id, index, payload))

    def verify(self) -> bool:
        return len(self.payload) == PAYLOAD_SIZE and self.integrity == _crc(
            self.session_id, self.index, self.payload
        )

    def encode(self) -> bytes:
        return _PACKET.pack(MAGIC, self.session_id, self.index, self.payload, self.integrity)

    @classmethod
    def decode(cls, data: bytes) -> "KeyPacket":
        """Parse and verify one datagram; raises IntegrityError on any mismatch."""
        if len(data) != PACKET_SIZE:
            raise IntegrityError(f"expected {PACKET_SIZE} bytes, got {len(data)}")
        magic, session_id, index, payload, crc = _PACKET.unpack(data)
        if magic != MAGIC:
            raise IntegrityError(f"bad magic {magic!r}")
        packet = cls(index, session_id, payload, crc)
        if not packet.verify():
            raise IntegrityError(f"crc mismatch on packet {index}")
        return packet


def _seed_material(seed) -> bytes:
    if isinstance(seed, (bytes, bytearray)):
        return bytes(seed)
    if isinstance(seed, int):
        return repr((seed,)).encode()
    return repr(tuple(int(s) for s in seed)).encode()


def alice_generate_burst(n: int, session_id: int, seed=None) -> list[KeyPacket]:
    """
    Build ``n`` key packets with indices 1..n.

    Payloads come from the OS CSPRNG.  Passing ``seed`` switches to a
    deterministic SHAKE-256 stream for tests and replays.
    """
    if n < 1:
        raise ValueError("burst size must be at least 1")
    if seed is None:
        blob = secrets.token_bytes(PAYLOAD_SIZE * n)
    else:
        xof = hashlib.shake_256(TAG_TEST_PAYLOAD + session_id.to_bytes(8, "big") + _seed_material(seed))
        blob = xof.digest(PAYLOAD_SIZE * n)
    return [
        KeyPacket.build(session_id, i + 1, blob[i * PAYLOAD_SIZE : (i + 1) * PAYLOAD_SIZE])
        for i in range(n)
    ]


def new_session_id() -> int:
    return secrets.randbits(64)


@dataclass(frozen=True)
class ReceivedPacket:
    """A packet Bob accepted, with its application-layer arrival time."""

    index: int
    arrival: float
    payload: bytes
    session_id: int = 0


def accept_datagrams(datagrams: Iterable[tuple[bytes, float]], session_id: int) -> list[ReceivedPacket]:
    """
    Verify raw ``(datagram, arrival)`` pairs in receive order.

    Corrupt datagrams and other sessions' packets are dropped; for a
    duplicated index the first copy wins.
    """
    seen: set[int] = set()
    accepted = []
    for data, arrival in datagrams:
        try:
            packet = KeyPacket.decode(data)
        except IntegrityError:
            continue
        if packet.session_id != session_id or packet.index in seen:
            continue
        seen.add(packet.index)
        accepted.append(ReceivedPacket(packet.index, arrival, packet.payload, session_id))
    return accepted


@dataclass(frozen=True)
class FitSummary:
    offset_ns: float
    gap_ns: float
    inliers: int

    @classmethod
    def from_fit(cls, fit: RegularizationFit) -> "FitSummary":
        return cls(fit.offset * 1e9, fit.gap * 1e9, len(fit.inlier_indices))


@dataclass(frozen=True)
class IndexAnnouncement:
    session_id: int
    selected_indices: tuple[int, ...]
    fit_summary: FitSummary | None = None

    def __post_init__(self) -> None:
        idx = self.selected_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("selected_indices must be strictly increasing")

    def to_json(self) -> str:
        fit = self.fit_summary
        doc = {
            "session_id": self.session_id,
            "selected_indices": list(self.selected_indices),
            "fit": None
            if fit is None
            else {"offset_ns": fit.offset_ns, "gap_ns": fit.gap_ns, "inliers": fit.inliers},
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str | bytes) -> "IndexAnnouncement":
        doc = json.loads(text)
        fit = doc.get("fit")
        return cls(
            session_id=int(doc["session_id"]),
            selected_indices=tuple(int(i) for i in doc["selected_indices"]),
            fit_summary=None
            if fit is None
            else FitSummary(float(fit["offset_ns"]), float(fit["gap_ns"]), int(fit["inliers"])),
        )

    def without(self, excluded: Iterable[int]) -> "IndexAnnouncement":
        drop = set(excluded)
        return IndexAnnouncement(
            self.session_id,
            tuple(i for i in self.selected_indices if i not in drop),
            self.fit_summary,
        )


@dataclass(frozen=True)
class BobConfig:
    """
    Bob's acceptance policy.

    Parameters
    ----------
    burst_size : int, optional
        Number of packets Alice sent; defaults to the largest index seen.
    min_selected : int
        Abort below this many selected packets.
    target_sec : float, optional
        When set, abort unless the burst reaches this security level for
        the measured first-attempt rate and Eve bound ``ce_bound``.
    ce_bound : float, optional
        Assumed Eve success rate; defaults to the measured Bob rate
        (degraded-channel bottleneck).
    """

    burst_size: int | None = None
    min_selected: int = 2
    target_sec: float | None = None
    ce_bound: float | None = None
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)


def check_security_target(selected: int, burst_size: int, config: BobConfig) -> None:
    if config.target_sec is None:
        return
    c_b = selected / burst_size
    c_e = c_b if config.ce_bound is None else config.ce_bound
    try:
        required = min_packets_for_sec(config.target_sec, ChannelRates(c_b=c_b, c_e=c_e))
    except Unreachable as exc:
        raise SessionAbort(str(exc)) from exc
    if burst_size < required:
        raise SessionAbort(
            f"{burst_size} packets at c_b={c_b:.3f}, c_e={c_e:.3f} give under "
            f"{config.target_sec} bits; need {required}"
        )


def bob_process_burst(
    received: Sequence[ReceivedPacket], arq_rtt: float, config: BobConfig | None = None
) -> IndexAnnouncement:
    """
    Select Bob's first-attempt packets and build the public announcement.

    Parameters
    ----------
    received : sequence of ReceivedPacket
        Integrity-checked packets of one session with arrival times.
    arq_rtt : float
        Link-layer retransmission round trip.
    config : BobConfig, optional

    Raises
    ------
    SessionAbort
        Too few packets, or the security target cannot be met.
    NoConvergence
        The timing fit did not settle; the burst should be retried.
    """
    config = config or BobConfig()
    if not received:
        raise SessionAbort("no packets received")
    if len(received) < config.min_selected:
        raise SessionAbort(f"{len(received)} packets received, need {config.min_selected}")
    if len({p.session_id for p in received}) != 1:
        raise ValueError("received packets span several sessions")
    trace = [(p.index, p.arrival) for p in received]
    fit = regularize_and_classify(trace, arq_rtt, config.regularizer)
    if not fit.converged:
        raise NoConvergence("timing fit did not converge", fit=fit)
    present = {p.index for p in received}
    selected = tuple(sorted(fit.inlier_indices & present))
    if len(selected) < max(config.min_selected, 1):
        raise SessionAbort(f"{len(selected)} first-attempt packets, need {config.min_selected}")
    burst_size = config.burst_size or max(present)
    check_security_target(len(selected), burst_size, config)
    return IndexAnnouncement(received[0].session_id, selected, FitSummary.from_fit(fit))


def payload_store(items: Iterable) -> dict[int, bytes]:
    """Index -> payload map from KeyPackets or ReceivedPackets."""
    return {p.index: p.payload for p in items}


@dataclass(frozen=True)
class KeyMaterial:
    """
    A derived key.  ``parent`` holds only the previous generation's
    fingerprint, never the key itself.
    """

    key: bytes
    generation: int
    source_indices: tuple[int, ...]
    parent: str | None = None

    @property
    def fingerprint(self) -> str:
        return key_fingerprint(self.key)

    def hex(self) -> str:
        return self.key.hex()


def key_fingerprint(key: bytes) -> str:
    return hashlib.sha256(TAG_FINGERPRINT + key).hexdigest()[:16]


def _mix(tag: bytes, prefix: bytes, indices: Sequence[int], store: Mapping[int, bytes]) -> bytes:
    if not indices:
        raise MissingPayload("announcement selects no packets")
    h = hashlib.sha256(tag)
    h.update(prefix)
    for i in indices:
        try:
            h.update(store[i])
        except KeyError:
            raise MissingPayload(f"no payload for announced index {i}") from None
    return h.digest()


def derive_key(side: str, announcement: IndexAnnouncement, store: Mapping[int, bytes]) -> KeyMaterial:
    """
    Generation-0 key: ``SHA-256(tag | session_id | payloads in index order)``.

    ``side`` is "alice" or "bob"; both run the identical computation.
    """
    if side not in ("alice", "bob"):
        raise ValueError(f"side must be 'alice' or 'bob', not {side!r}")
    return initial_key(announcement, store)


def initial_key(announcement: IndexAnnouncement, store: Mapping[int, bytes]) -> KeyMaterial:
    """Side-agnostic generation-0 derivation (also what an eavesdropper runs)."""
    indices = tuple(sorted(announcement.selected_indices))
    key = _mix(TAG_INITIAL, announcement.session_id.to_bytes(8, "big"), indices, store)
    return KeyMaterial(key=key, generation=0, source_indices=indices)


def refresh_key(current: KeyMaterial, announcement: IndexAnnouncement, store: Mapping[int, bytes]) -> KeyMaterial:
    """Next generation: ``SHA-256(refresh tag | current key | payloads)``."""
    indices = tuple(sorted(announcement.selected_indices))
    key = _mix(TAG_REFRESH, current.key, indices, store)
    return KeyMaterial(
        key=key,
        generation=current.generation + 1,
        source_indices=indices,
        parent=current.fingerprint,
    )


# -- opportunistic refresh ---------------------------------------------------


@dataclass(frozen=True)
class RefreshEvent:
    step: int
    size: int


def opportunistic_refresh_scheduler(
    quality_stream: Iterable[float], threshold: float, refresh_size: int, cooldown: int = 0
) -> list[RefreshEvent]:
    """
    Schedule a refresh burst at every upward crossing of ``threshold``.

    A crossing is a step at or above the threshold whose predecessor was
    below it (the stream is taken to start below).  Crossings within
    ``cooldown`` steps of the previous refresh are skipped.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    if refresh_size < 1:
        raise ValueError("refresh_size must be positive")
    events = []
    last = None
    was_above = False
    for step, quality in enumerate(quality_stream):
        above = quality >= threshold
        if above and not was_above and (last is None or step - last >= cooldown):
            events.append(RefreshEvent(step, refresh_size))
            last = step
        was_above = above
    return events
