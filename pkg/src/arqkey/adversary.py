"""
Passive eavesdropper.

Eve holds the payloads of every packet she received error-free on at
least one of its on-air copies, plus the public announcement.  She
recovers the key exactly when the announced set is a subset of her
captures; no partial guessing is modelled.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Mapping, Sequence

import numpy as np

from arqkey.channel import ChannelParams, DeliveryOutcome, draw_burst
from arqkey.pipeline import SessionTranscript, run_session
from arqkey.protocol import BobConfig, IndexAnnouncement, KeyMaterial, KeyPacket, initial_key

SWEEP_FIELDS = ("n", "c_b", "c_e", "sessions", "compromises", "rate", "lo", "hi")


@dataclass(frozen=True)
class EveView:
    captured_payloads: Mapping[int, bytes]
    announcement: IndexAnnouncement
    copies_seen: Mapping[int, int] = field(default_factory=dict)


@dataclass(frozen=True)
class CompromisedKey:
    key: KeyMaterial


@dataclass(frozen=True)
class Missing:
    indices: frozenset[int]


def eve_view(packets: Sequence[KeyPacket], outcomes: Sequence[DeliveryOutcome], announcement: IndexAnnouncement) -> EveView:
    """Eve's knowledge after a simulated burst: captures and copy counts only."""
    payloads = {p.index: p.payload for p in packets}
    return EveView(
        captured_payloads={o.packet_index: payloads[o.packet_index] for o in outcomes if o.eve_captured},
        announcement=announcement,
        copies_seen={o.packet_index: o.transmission_count for o in outcomes},
    )


def eve_attempt_reconstruction(view: EveView) -> CompromisedKey | Missing:
    """Rebuild the key if every announced payload was captured."""
    announced = frozenset(view.announcement.selected_indices)
    missing = announced - view.captured_payloads.keys()
    if missing or not announced:
        return Missing(frozenset(missing))
    return CompromisedKey(initial_key(view.announcement, view.captured_payloads))


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    z = NormalDist().inv_cdf(0.5 + confidence / 2)
    p = successes / trials
    z2n = z * z / trials
    centre = (p + z2n / 2) / (1 + z2n)
    half = z * math.sqrt(p * (1 - p) / trials + z2n / (4 * trials)) / (1 + z2n)
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return lo, hi


@dataclass
class CompromiseEstimate:
    n: int
    c_b: float
    c_e: float
    sessions: int
    compromises: int
    aborted: int = 0
    missing_sizes: Counter = field(default_factory=Counter)

    @property
    def rate(self) -> float:
        return self.compromises / self.sessions

    @property
    def interval(self) -> tuple[float, float]:
        return wilson_interval(self.compromises, self.sessions)

    def merge(self, other: "CompromiseEstimate") -> "CompromiseEstimate":
        return CompromiseEstimate(
            self.n,
            self.c_b,
            self.c_e,
            self.sessions + other.sessions,
            self.compromises + other.compromises,
            self.aborted + other.aborted,
            self.missing_sizes + other.missing_sizes,
        )

    def row(self) -> dict:
        lo, hi = self.interval
        return dict(
            n=self.n, c_b=self.c_b, c_e=self.c_e, sessions=self.sessions,
            compromises=self.compromises, rate=self.rate, lo=lo, hi=hi,
        )


def fast_oracle_compromised(n: int, params: ChannelParams, seed) -> tuple[bool, int]:
    """
    Oracle-classification compromise for one session without building
    packets or keys.

    Consumes the channel generator exactly as :func:`simulate_burst` does,
    so for the same seed it agrees with the full pipeline.  An empty
    first-attempt set counts as compromised (nothing secret to derive).
    Returns ``(compromised, missing_count)``.
    """
    draw = draw_burst(n, params, np.random.default_rng(seed))
    missing = int(np.count_nonzero(draw.first_attempt & ~draw.eve_captured))
    return missing == 0, missing


def session_compromised(transcript: SessionTranscript) -> tuple[bool, int]:
    """Score a full-pipeline session; aborted sessions count as compromised."""
    if transcript.aborted:
        return True, 0
    view = eve_view(transcript.packets, transcript.outcomes, transcript.announcement)
    result = eve_attempt_reconstruction(view)
    if isinstance(result, CompromisedKey):
        return True, 0
    return False, len(result.indices)


def _run_block(n, params, start, stop, seed, classification, full_pipeline) -> CompromiseEstimate:
    est = CompromiseEstimate(n, params.c_b, params.c_e, 0, 0)
    for k in range(start, stop):
        session_seed = [seed, k]
        aborted = False
        if classification == "oracle" and not full_pipeline:
            hit, missing = fast_oracle_compromised(n, params, session_seed)
        else:
            tr = run_session(n, params, session_seed, classification, BobConfig(burst_size=n, min_selected=1))
            aborted = tr.aborted
            hit, missing = session_compromised(tr)
        est.sessions += 1
        est.compromises += hit
        est.aborted += aborted
        if not hit:
            est.missing_sizes[missing] += 1
    return est


def empirical_compromise_rate(
    n: int,
    params: ChannelParams,
    sessions: int,
    seed: int,
    classification: str = "oracle",
    full_pipeline: bool = False,
    workers: int = 1,
) -> CompromiseEstimate:
    """
    Monte Carlo estimate of Eve's key-recovery probability.

    Parameters
    ----------
    n : int
        Packets per session.
    params : ChannelParams
    sessions : int
        Number of independent sessions; session ``k`` is seeded ``[seed, k]``.
    seed : int
    classification : {"oracle", "timing"}
        How Bob picks his packets.
    full_pipeline : bool
        In oracle mode, run packets, announcement and key reconstruction
        for every session instead of the equivalent set test.
    workers : int
        Process count; blocks are merged by count.

    Returns
    -------
    CompromiseEstimate
        Counts plus a 95% Wilson interval via ``.interval``.
    """
    if sessions < 1:
        raise ValueError("sessions must be at least 1")
    if workers <= 1:
        return _run_block(n, params, 0, sessions, seed, classification, full_pipeline)
    bounds = np.linspace(0, sessions, workers + 1).astype(int)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_run_block, n, params, int(a), int(b), seed, classification, full_pipeline)
            for a, b in zip(bounds, bounds[1:])
            if b > a
        ]
        parts = [f.result() for f in futures]
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    return total


def capture_rate_by_transmissions(outcomes: Iterable[DeliveryOutcome]) -> dict[int, tuple[int, int]]:
    """``transmission_count -> (eve_captured, packets)`` over delivered packets."""
    table: dict[int, list[int]] = {}
    for o in outcomes:
        if not o.bob_delivered:
            continue
        row = table.setdefault(o.transmission_count, [0, 0])
        row[0] += o.eve_captured
        row[1] += 1
    return {k: (v[0], v[1]) for k, v in sorted(table.items())}


def write_sweep_csv(estimates: Iterable[CompromiseEstimate], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS, lineterminator="\n")
        writer.writeheader()
        for est in estimates:
            writer.writerow(est.row())
