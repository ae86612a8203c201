"""
Seedable simulation of the Alice->Bob and Alice->Eve packet paths.

Bob's link runs a hidden link-layer ARQ: a packet that fails its first
attempt is retransmitted up to ``max_retransmissions`` times, each retry
adding one ARQ round trip ``arq_rtt`` to its arrival time.  The
application only ever sees the arrival timestamps (:func:`arrival_trace`);
attempt counts stay in :class:`DeliveryOutcome` as ground truth.

Eve listens to every copy put on the air and succeeds on each copy
independently with probability ``c_e``.

All randomness for one burst comes from a single
``numpy.random.Generator`` consumed in a fixed order by
:func:`draw_burst`, so identical seeds give bit-identical bursts.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

Seed = Union[int, Sequence[int], np.random.SeedSequence, None]
Trace = list[tuple[int, float]]

JITTER_TRUNCATION = 3.0

QUALITY_FLOOR_CB = 0.5
QUALITY_CEILING_CB = 0.99


@dataclass(frozen=True)
class GilbertElliott:
    """Two-state burst-error toggle for Bob's link (off unless attached)."""

    p_good_to_bad: float = 0.01
    p_bad_to_good: float = 0.2
    c_b_bad: float = 0.3


@dataclass(frozen=True)
class QualityModel:
    """
    Slowly varying channel quality in (0, 1).

    A latent Gaussian AR(1) ``x[t+1] = mean + coefficient*(x[t]-mean) + w``
    is squashed through the logistic function.  ``constant`` short-circuits
    the process.
    """

    constant: float | None = None
    coefficient: float = 0.99
    innovation_sd: float = 0.1
    mean: float = 1.5


@dataclass(frozen=True)
class ChannelParams:
    """
    Link parameters.  Durations are in seconds.

    Parameters
    ----------
    c_b : float
        Bob's per-attempt success probability (first-attempt success rate).
    c_e : float
        Eve's per-copy success probability.
    arq_rtt : float
        Extra delay added by each link-layer retransmission.
    max_retransmissions : int
        Retries after the first attempt before the packet is dropped.
    jitter_sd : float
        Std. dev. of the arrival jitter (Gaussian truncated at 3 sigma).
    skew_ppm : float
        Rate offset of Bob's clock relative to Alice's.
    base_latency : float
        One-way travel time.
    send_gap : float
        Alice's fixed inter-packet interval.
    """

    c_b: float = 0.9
    c_e: float = 0.5
    arq_rtt: float = 0.008
    max_retransmissions: int = 3
    jitter_sd: float = 0.0008
    skew_ppm: float = 0.0
    base_latency: float = 0.02
    send_gap: float = 0.01
    burst: GilbertElliott | None = None
    quality: QualityModel = field(default_factory=QualityModel)

    def __post_init__(self) -> None:
        for name in ("c_b", "c_e"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} must be in [0, 1]")
        if not self.arq_rtt > 0:
            raise ValueError("arq_rtt must be positive")
        if not self.send_gap > 0:
            raise ValueError("send_gap must be positive")
        if self.jitter_sd < 0:
            raise ValueError("jitter_sd must be non-negative")
        if self.max_retransmissions < 0:
            raise ValueError("max_retransmissions must be non-negative")

    @property
    def skew(self) -> float:
        return self.skew_ppm * 1e-6

    @property
    def attempts_cap(self) -> int:
        return self.max_retransmissions + 1

    def replace(self, **changes) -> "ChannelParams":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DeliveryOutcome:
    """
    Ground truth for one packet.

    ``bob_attempts`` counts transmissions Bob needed (1 means first-attempt
    success); for a dropped packet it equals the attempt cap.
    """

    packet_index: int
    bob_attempts: int
    bob_delivered: bool
    bob_arrival: float | None
    eve_captured: bool
    transmission_count: int
    send_time: float
    jitter: float

    @property
    def first_attempt(self) -> bool:
        return self.bob_delivered and self.bob_attempts == 1


@dataclass
class BurstDraw:
    """Vectorised per-packet outcomes for a burst (indices 1..n)."""

    attempts: np.ndarray
    delivered: np.ndarray
    transmissions: np.ndarray
    eve_captured: np.ndarray
    jitter: np.ndarray

    @property
    def first_attempt(self) -> np.ndarray:
        return self.delivered & (self.attempts == 1)


def send_time(index: int, params: ChannelParams) -> float:
    return index * params.send_gap


def arrival_time(send: float, attempts: int, jitter: float, params: ChannelParams) -> float:
    """Arrival on Bob's clock for a packet sent at ``send`` (Alice's clock)."""
    return send * (1.0 + params.skew) + params.base_latency + (attempts - 1) * params.arq_rtt + jitter


def truncated_normal(rng: np.random.Generator, size: int, bound: float = JITTER_TRUNCATION) -> np.ndarray:
    z = rng.standard_normal(size)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z


def _bob_success_prob(n: int, params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    ge = params.burst
    if ge is None:
        return np.full(n, params.c_b)
    u = rng.random(n)
    bad = np.empty(n, dtype=bool)
    stationary_bad = ge.p_good_to_bad / (ge.p_good_to_bad + ge.p_bad_to_good)
    state = u[0] < stationary_bad
    bad[0] = state
    for i in range(1, n):
        state = (u[i] >= ge.p_bad_to_good) if state else (u[i] < ge.p_good_to_bad)
        bad[i] = state
    return np.where(bad, ge.c_b_bad, params.c_b)


def draw_burst(n: int, params: ChannelParams, rng: np.random.Generator) -> BurstDraw:
    """Draw the outcomes of an ``n``-packet burst from ``rng``."""
    k = params.attempts_cap
    bob_u = rng.random((n, k))
    eve_u = rng.random((n, k))
    jitter = params.jitter_sd * truncated_normal(rng, n) if params.jitter_sd > 0 else np.zeros(n)
    c_b = _bob_success_prob(n, params, rng)

    ok = bob_u < c_b[:, None]
    delivered = ok.any(axis=1)
    attempts = np.where(delivered, ok.argmax(axis=1) + 1, k)
    transmissions = attempts  # dropped packets used the full cap
    on_air = np.arange(k)[None, :] < transmissions[:, None]
    eve_captured = ((eve_u < params.c_e) & on_air).any(axis=1)
    return BurstDraw(attempts, delivered, transmissions, eve_captured, jitter)


def simulate_burst(n: int, params: ChannelParams, seed: Seed = None) -> list[DeliveryOutcome]:
    """
    Simulate one burst of ``n`` packets with indices 1..n.

    Parameters
    ----------
    n : int
        Burst size, at least 1.
    params : ChannelParams
        Link parameters.
    seed : int, sequence of int or SeedSequence
        Seed for ``numpy.random.default_rng``.

    Returns
    -------
    list of DeliveryOutcome
        Index-ordered outcomes.
    """
    if n < 1:
        raise ValueError("burst size must be at least 1")
    draw = draw_burst(n, params, np.random.default_rng(seed))
    return outcomes_from_draw(draw, params)


def outcomes_from_draw(draw: BurstDraw, params: ChannelParams) -> list[DeliveryOutcome]:
    outcomes = []
    for pos in range(len(draw.attempts)):
        index = pos + 1
        attempts = int(draw.attempts[pos])
        delivered = bool(draw.delivered[pos])
        jitter = float(draw.jitter[pos])
        send = send_time(index, params)
        outcomes.append(
            DeliveryOutcome(
                packet_index=index,
                bob_attempts=attempts,
                bob_delivered=delivered,
                bob_arrival=arrival_time(send, attempts, jitter, params) if delivered else None,
                eve_captured=bool(draw.eve_captured[pos]),
                transmission_count=int(draw.transmissions[pos]),
                send_time=send,
                jitter=jitter,
            )
        )
    return outcomes


def arrival_trace(outcomes: Iterable[DeliveryOutcome]) -> Trace:
    """
    What the application layer sees: ``(index, arrival)`` pairs of the
    delivered packets, sorted by arrival time.
    """
    trace = [(o.packet_index, o.bob_arrival) for o in outcomes if o.bob_delivered]
    trace.sort(key=lambda item: (item[1], item[0]))
    return trace


# -- channel quality -------------------------------------------------------


def quality_series(model: QualityModel, steps: int, seed: Seed = None) -> np.ndarray:
    """``steps`` consecutive quality samples, started from stationarity."""
    if model.constant is not None:
        return np.full(steps, float(model.constant))
    rng = np.random.default_rng(seed)
    phi = model.coefficient
    # one draw per step so a longer series extends a shorter one
    z = rng.standard_normal(steps)
    noise = z * model.innovation_sd
    x = np.empty(steps)
    stationary_sd = model.innovation_sd / math.sqrt(1.0 - phi * phi) if abs(phi) < 1 else 0.0
    x[0] = model.mean + stationary_sd * z[0]
    for t in range(1, steps):
        x[t] = model.mean + phi * (x[t - 1] - model.mean) + noise[t]
    return 1.0 / (1.0 + np.exp(-x))


def channel_quality_signal(params: ChannelParams, t: int, seed: Seed = None) -> float:
    """Quality at integer time step ``t`` of the seeded process."""
    return float(quality_series(params.quality, t + 1, seed)[t])


def quality_to_cb(quality: float, floor: float = QUALITY_FLOOR_CB, ceiling: float = QUALITY_CEILING_CB) -> float:
    """Monotone map from quality in [0, 1] to Bob's success probability."""
    q = min(max(quality, 0.0), 1.0)
    return floor + (ceiling - floor) * q


# -- record format ---------------------------------------------------------

RECORD_FIELDS = ("index", "attempts", "delivered", "arrival_ns", "eve", "transmissions")


def to_ns(seconds: float) -> int:
    return int(round(seconds * 1e9))


def write_records(outcomes: Iterable[DeliveryOutcome], path_or_buf) -> None:
    """Write outcomes as ``index,attempts,delivered,arrival_ns,eve,transmissions`` lines."""
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for o in outcomes:
            writer.writerow(
                [
                    o.packet_index,
                    o.bob_attempts,
                    int(o.bob_delivered),
                    "" if o.bob_arrival is None else to_ns(o.bob_arrival),
                    int(o.eve_captured),
                    o.transmission_count,
                ]
            )
    finally:
        if own:
            fh.close()


@dataclass(frozen=True)
class OutcomeRecord:
    index: int
    attempts: int
    delivered: bool
    arrival_ns: int | None
    eve: bool
    transmissions: int


def read_records(path_or_text) -> list[OutcomeRecord]:
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    else:
        text = path_or_text
    rows = csv.DictReader(io.StringIO(text))
    return [
        OutcomeRecord(
            index=int(r["index"]),
            attempts=int(r["attempts"]),
            delivered=r["delivered"] == "1",
            arrival_ns=int(r["arrival_ns"]) if r["arrival_ns"] else None,
            eve=r["eve"] == "1",
            transmissions=int(r["transmissions"]),
        )
        for r in rows
    ]


def trace_from_records(records: Iterable[OutcomeRecord]) -> Trace:
    trace = [(r.index, r.arrival_ns * 1e-9) for r in records if r.delivered and r.arrival_ns is not None]
    trace.sort(key=lambda item: (item[1], item[0]))
    return trace
