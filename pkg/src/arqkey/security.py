"""
Closed-form compromise probability and security level.

A key built from the packets Bob received on their first transmission
attempt is compromised when Eve also holds an error-free copy of every
one of them.  With independent per-packet errors::

    P   = (1 - c_b * e_e) ** N
    SEC = -log2(P) = -N * log2(1 - c_b * e_e)

where ``c_b`` is Bob's first-attempt success probability, ``c_e`` Eve's
success probability and ``e_e = 1 - c_e``.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from arqkey.errors import Unreachable

# Below this many packets the product is evaluated directly.
LOG_DOMAIN_THRESHOLD = 64

DEFAULT_CE_GRID: tuple[float, ...] = tuple(k / 100 for k in range(101))


def _check_probability(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ValueError(f"{name}={value} must be in [0, 1]")


@dataclass(frozen=True)
class ChannelRates:
    """
    Per-packet success probabilities for Bob and Eve.

    Parameters
    ----------
    c_b : float
        Probability that Bob receives a packet error-free on its first
        transmission attempt.
    c_e : float
        Probability that Eve receives a given transmission error-free.
    """

    c_b: float
    c_e: float

    def __post_init__(self) -> None:
        _check_probability("c_b", self.c_b)
        _check_probability("c_e", self.c_e)

    @property
    def e_b(self) -> float:
        return 1.0 - self.c_b

    @property
    def e_e(self) -> float:
        return 1.0 - self.c_e

    @property
    def leak_free(self) -> float:
        """Probability that a single packet is Bob-ok and Eve-missed."""
        return self.c_b * self.e_e


class Regime(str, enum.Enum):
    DEGRADED = "degraded"
    GENERAL = "general"


@dataclass(frozen=True)
class SecurityReport:
    n_packets: int
    p_compromise: float
    sec_bits: float
    regime: Regime


def _check_count(n: int) -> None:
    if n < 0:
        raise ValueError(f"packet count {n} must be non-negative")


def compromise_probability(n: int, rates: ChannelRates) -> float:
    """
    Probability that Eve holds every packet Bob selected.

    Parameters
    ----------
    n : int
        Number of packets Alice sends.
    rates : ChannelRates
        Bob and Eve per-packet success probabilities.

    Returns
    -------
    float
        ``(1 - c_b * e_e) ** n``; exactly 1.0 for ``n == 0``.
    """
    _check_count(n)
    if n == 0:
        return 1.0
    x = rates.leak_free
    if n <= LOG_DOMAIN_THRESHOLD:
        return (1.0 - x) ** n
    if x >= 1.0:
        return 0.0
    return math.exp(n * math.log1p(-x))


def security_level(n: int, rates: ChannelRates) -> float:
    """
    Security level in bits, ``-n * log2(1 - c_b * e_e)``.

    Returns ``inf`` when a single packet already rules out compromise
    (``c_b = 1`` and ``c_e = 0``) and ``n > 0``.
    """
    _check_count(n)
    x = rates.leak_free
    if n == 0 or x == 0.0:
        return 0.0
    if x >= 1.0:
        return math.inf
    return -n * math.log1p(-x) / math.log(2.0)


def degraded_channel_sec(n: int, c_b: float) -> float:
    """Security level at the degraded-channel bottleneck ``c_e = c_b``."""
    return security_level(n, ChannelRates(c_b=c_b, c_e=c_b))


def bits_per_packet(rates: ChannelRates) -> float:
    return security_level(1, rates)


def min_packets_for_sec(target_sec: float, rates: ChannelRates) -> int:
    """
    Smallest packet count whose security level reaches ``target_sec``.

    Raises
    ------
    Unreachable
        If ``c_b * e_e == 0``: every packet is either lost by Bob or
        captured by Eve, so security never grows.
    """
    if not target_sec > 0:
        raise ValueError(f"target_sec={target_sec} must be positive")
    per_packet = bits_per_packet(rates)
    if per_packet == 0.0:
        raise Unreachable(
            f"c_b*e_e = 0 for c_b={rates.c_b}, c_e={rates.c_e}; no N reaches {target_sec} bits"
        )
    if math.isinf(per_packet):
        return 1
    n = max(1, math.ceil(target_sec / per_packet))
    # ceil of a ratio sitting near an integer can land one off either way
    while n > 1 and security_level(n - 1, rates) >= target_sec:
        n -= 1
    while security_level(n, rates) < target_sec:
        n += 1
    return n


def security_report(n: int, rates: ChannelRates) -> SecurityReport:
    regime = Regime.DEGRADED if rates.c_e <= rates.c_b else Regime.GENERAL
    return SecurityReport(
        n_packets=n,
        p_compromise=compromise_probability(n, rates),
        sec_bits=security_level(n, rates),
        regime=regime,
    )


def sec_curve(
    n: int, c_b: float, c_e_grid: Iterable[float] = DEFAULT_CE_GRID
) -> list[tuple[float, float]]:
    """Security level over a grid of Eve success rates, in grid order."""
    return [(c_e, security_level(n, ChannelRates(c_b=c_b, c_e=c_e))) for c_e in c_e_grid]


def write_curve_csv(curve: Sequence[tuple[float, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["c_e", "sec_bits"])
        for c_e, sec in curve:
            writer.writerow([repr(float(c_e)), repr(float(sec))])
    return path


def read_curve_csv(path: str | Path) -> list[tuple[float, float]]:
    with Path(path).open(newline="") as fh:
        return [(float(row["c_e"]), float(row["sec_bits"])) for row in csv.DictReader(fh)]
