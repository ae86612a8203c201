"""
End-to-end simulated sessions: channel -> Bob's selection -> key derivation.

Bob's side sees only the datagrams and their arrival times.  The channel
ground truth travels alongside in :class:`SessionTranscript` so tests and
the eavesdropper model can score the run, but nothing on the Bob path
reads it unless ``classification="oracle"`` is requested explicitly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from arqkey.channel import ChannelParams, DeliveryOutcome, Seed, quality_to_cb, simulate_burst, to_ns
from arqkey.errors import ArqKeyError, DegenerateTrace, NoConvergence, SessionAbort
from arqkey.protocol import (
    BobConfig,
    IndexAnnouncement,
    KeyMaterial,
    KeyPacket,
    ReceivedPacket,
    accept_datagrams,
    alice_generate_burst,
    bob_process_burst,
    derive_key,
    payload_store,
    refresh_key,
)

CLASSIFICATIONS = ("timing", "oracle")


def session_id_for(seed: Seed) -> int:
    """Deterministic 64-bit session identifier for a seeded run."""
    material = repr(seed if isinstance(seed, int) else tuple(seed)).encode()
    return int.from_bytes(hashlib.sha256(b"arqkey/session-id" + material).digest()[:8], "big")


def deliver(packets: Sequence[KeyPacket], outcomes: Sequence[DeliveryOutcome]) -> list[tuple[bytes, float]]:
    """Datagrams as Bob's socket would return them, in arrival order."""
    arrived = [(o.bob_arrival, o.packet_index) for o in outcomes if o.bob_delivered]
    arrived.sort()
    by_index = {p.index: p for p in packets}
    return [(by_index[i].encode(), t) for t, i in arrived]


@dataclass
class SessionTranscript:
    n: int
    params: ChannelParams
    seed: Seed
    session_id: int
    classification: str
    packets: list[KeyPacket]
    outcomes: list[DeliveryOutcome]
    received: list[ReceivedPacket]
    announcement: IndexAnnouncement | None = None
    alice_key: KeyMaterial | None = None
    bob_key: KeyMaterial | None = None
    abort_reason: str | None = None

    @property
    def aborted(self) -> bool:
        return self.announcement is None

    @property
    def agreed(self) -> bool:
        return self.alice_key is not None and self.alice_key.key == self.bob_key.key

    @property
    def true_first_attempt(self) -> frozenset[int]:
        return frozenset(o.packet_index for o in self.outcomes if o.first_attempt)

    @property
    def selected(self) -> frozenset[int]:
        return frozenset(self.announcement.selected_indices) if self.announcement else frozenset()

    def classification_counts(self) -> dict[str, int]:
        """Confusion counts of Bob's selection against the sealed ground truth."""
        truth = self.true_first_attempt
        chosen = self.selected if not self.aborted else frozenset()
        delivered = [o.packet_index for o in self.outcomes if o.bob_delivered]
        retransmitted = [i for i in delivered if i not in truth]
        return {
            "delivered": len(delivered),
            "correct": sum((i in chosen) == (i in truth) for i in delivered),
            "first_attempt": len(truth),
            "retransmitted": len(retransmitted),
            "false_inclusions": sum(i in chosen for i in retransmitted),
            "false_exclusions": len(truth - chosen),
        }


def run_session(
    n: int,
    params: ChannelParams,
    seed: Seed,
    classification: str = "timing",
    bob_config: BobConfig | None = None,
) -> SessionTranscript:
    """
    Run one simulated key-establishment session.

    ``classification="timing"`` lets Bob select packets from arrival times
    alone; ``"oracle"`` hands him the true first-attempt set, which is
    used to check the closed-form compromise probability.
    """
    if classification not in CLASSIFICATIONS:
        raise ValueError(f"classification must be one of {CLASSIFICATIONS}")
    bob_config = bob_config or BobConfig(burst_size=n)
    sid = session_id_for(seed)
    packets = alice_generate_burst(n, sid, seed=seed)
    outcomes = simulate_burst(n, params, seed)
    received = accept_datagrams(deliver(packets, outcomes), sid)
    transcript = SessionTranscript(n, params, seed, sid, classification, packets, outcomes, received)

    if classification == "oracle":
        chosen = tuple(o.packet_index for o in outcomes if o.first_attempt)
        if not chosen:
            transcript.abort_reason = "no first-attempt packets"
            return transcript
        announcement = IndexAnnouncement(sid, chosen)
    else:
        try:
            announcement = bob_process_burst(received, params.arq_rtt, bob_config)
        except (SessionAbort, NoConvergence, DegenerateTrace) as exc:
            transcript.abort_reason = f"{type(exc).__name__}: {exc}"
            return transcript

    transcript.announcement = announcement
    transcript.alice_key = derive_key("alice", announcement, payload_store(packets))
    transcript.bob_key = derive_key("bob", announcement, payload_store(received))
    return transcript


# -- refresh chains ---------------------------------------------------------


@dataclass
class RefreshStep:
    step: int
    quality: float
    transcript: SessionTranscript
    alice_key: KeyMaterial
    bob_key: KeyMaterial


def run_refresh_chain(
    initial: SessionTranscript,
    events: Iterable,
    quality: Sequence[float],
    params: ChannelParams,
    seed: int,
) -> list[RefreshStep]:
    """
    Apply scheduled refresh bursts to an established session.

    Each event's burst runs over a channel whose Bob success rate follows
    the quality signal at that step.  Bursts that abort leave the key
    unchanged and are skipped.
    """
    if initial.alice_key is None:
        raise SessionAbort("initial session has no key")
    alice, bob = initial.alice_key, initial.bob_key
    steps = []
    for k, event in enumerate(events):
        q = float(quality[event.step])
        burst_params = params.replace(c_b=quality_to_cb(q))
        tr = run_session(event.size, burst_params, [seed, event.step, k], "timing")
        if tr.aborted:
            continue
        alice = refresh_key(alice, tr.announcement, payload_store(tr.packets))
        bob = refresh_key(bob, tr.announcement, payload_store(tr.received))
        steps.append(RefreshStep(event.step, q, tr, alice, bob))
    return steps


# -- transcript log ----------------------------------------------------------


def transcript_records(transcript: SessionTranscript, side: str = "bob") -> list[dict]:
    """Line records sufficient to recompute one side's key."""
    records: list[dict] = [{"type": "session", "session_id": transcript.session_id, "n": transcript.n}]
    source = transcript.received if side == "bob" else transcript.packets
    for p in source:
        rec = {"type": "packet", "index": p.index, "payload": p.payload.hex()}
        if side == "bob":
            rec["arrival_ns"] = to_ns(p.arrival)
        records.append(rec)
    if transcript.announcement is not None:
        records.append({"type": "announcement", "body": json.loads(transcript.announcement.to_json())})
    return records


def write_log(records: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def replay_log(records: Sequence[dict]) -> list[KeyMaterial]:
    """
    Recompute the key chain from a log.

    The first announcement after a ``session`` record derives generation 0
    from that session's packets; each later session/announcement pair
    refreshes the current key.
    """
    keys: list[KeyMaterial] = []
    store: dict[int, bytes] = {}
    for rec in records:
        kind = rec["type"]
        if kind == "session":
            store = {}
        elif kind == "packet":
            store[rec["index"]] = bytes.fromhex(rec["payload"])
        elif kind == "announcement":
            ann = IndexAnnouncement.from_json(json.dumps(rec["body"]))
            keys.append(derive_key("bob", ann, store) if not keys else refresh_key(keys[-1], ann, store))
        else:
            raise ArqKeyError(f"unknown log record type {kind!r}")
    return keys


def chain_records(initial: SessionTranscript, steps: Sequence[RefreshStep]) -> list[dict]:
    records = transcript_records(initial)
    for s in steps:
        records.extend(transcript_records(s.transcript))
    return records

