"""
Arrival-time regularisation.

Alice sends at a fixed interval, so on Bob's clock the on-time packets sit
on a line ``t_i = offset + i * gap`` (the gap absorbs clock skew).  The
line is found by ordinary least squares over the packet *indices* that
actually arrived, then refined by repeatedly discarding points whose
residual exceeds half the ARQ round trip and refitting.  A packet that
needed a link-layer retransmission arrives one round trip late and ends
up outside the band.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from arqkey.errors import DegenerateTrace, NoConvergence

Trace = Sequence[tuple[int, float]]

DEFAULT_THRESHOLD_FRACTION = 0.5
DEFAULT_MAX_ITERATIONS = 10
DEFAULT_BIN_WIDTH = 1e-4


@dataclass(frozen=True)
class RegularizerConfig:
    """
    Parameters
    ----------
    threshold_fraction : float
        Outlier band half-width as a fraction of the ARQ round trip.
    max_iterations : int
        Cap on fit/exclude rounds.
    init : {"envelope", "all"}
        ``"all"`` starts from a plain fit over every point.  ``"envelope"``
        (default) starts from the points within the band above the lower
        support line of the arrivals; delays are never negative, so this
        stays on the on-time packets even when most of the burst was
        retransmitted.
    strict : bool
        Raise :class:`NoConvergence` instead of returning a flagged fit.
    """

    threshold_fraction: float = DEFAULT_THRESHOLD_FRACTION
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    init: str = "envelope"
    strict: bool = False


@dataclass(frozen=True)
class RegularizationFit:
    offset: float
    gap: float
    residuals: tuple[tuple[int, float], ...]
    inlier_indices: frozenset[int]
    iterations: int
    converged: bool
    threshold: float

    def regularized(self, index: int) -> float:
        return self.offset + index * self.gap

    def to_json(self) -> str:
        return json.dumps(
            {
                "offset": self.offset,
                "gap": self.gap,
                "iterations": self.iterations,
                "converged": self.converged,
                "threshold": self.threshold,
                "inliers": sorted(self.inlier_indices),
                "residuals": [[i, r] for i, r in self.residuals],
            },
            sort_keys=True,
        )


def _as_arrays(trace: Trace) -> tuple[np.ndarray, np.ndarray]:
    if len(trace) == 0:
        return np.empty(0), np.empty(0)
    idx = np.fromiter((p[0] for p in trace), dtype=float, count=len(trace))
    t = np.fromiter((p[1] for p in trace), dtype=float, count=len(trace))
    return idx, t


def _ols(idx: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    if idx.size < 2 or np.all(idx == idx[0]):
        raise DegenerateTrace(f"need two distinct indices, got {np.unique(idx).size}")
    i_mean = idx.mean()
    t_mean = t.mean()
    di = idx - i_mean
    gap = float(np.dot(di, t - t_mean) / np.dot(di, di))
    return float(t_mean - gap * i_mean), gap


def fit_schedule(trace: Trace) -> tuple[float, float]:
    """
    Least-squares ``(offset, gap)`` minimising ``sum (t_i - offset - i*gap)**2``.

    Only the indices present in the trace enter the sums, so missing
    packets do not bias the gap.

    Raises
    ------
    DegenerateTrace
        Fewer than two points, or all points share one index.
    """
    return _ols(*_as_arrays(trace))


def _lower_support_line(idx: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    """
    Line below every point that minimises the summed vertical gap: the
    lower-hull edge spanning the mean index.
    """
    order = np.lexsort((t, idx))
    hull: list[tuple[float, float]] = []
    for i, ti in zip(idx[order], t[order]):
        if hull and hull[-1][0] == i:
            continue  # keep the earliest arrival per index
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (ti - y1) - (y2 - y1) * (i - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append((float(i), float(ti)))
    if len(hull) < 2:
        raise DegenerateTrace("all indices equal")
    centre = idx.mean()
    for (x1, y1), (x2, y2) in zip(hull, hull[1:]):
        if x2 >= centre:
            break
    slope = (y2 - y1) / (x2 - x1)
    return y1 - slope * x1, slope


def _envelope_start(idx: np.ndarray, t: np.ndarray, threshold: float) -> np.ndarray:
    offset, slope = _lower_support_line(idx, t)
    return t - offset - idx * slope <= threshold


def regularize_and_classify(
    trace: Trace, arq_rtt: float, config: RegularizerConfig | None = None
) -> RegularizationFit:
    """
    Fit the send schedule and split arrivals into first-attempt inliers and
    retransmitted outliers.

    Parameters
    ----------
    trace : sequence of (index, arrival)
        Delivered packets in any order.
    arq_rtt : float
        Link-layer retransmission round trip; must be positive.
    config : RegularizerConfig, optional

    Returns
    -------
    RegularizationFit
        ``inlier_indices`` are the packets claimed to have arrived on
        their first attempt.  ``converged`` is False if the exclusion set
        was still changing after ``max_iterations`` fits.
    """
    config = config or RegularizerConfig()
    if not arq_rtt > 0:
        raise ValueError("arq_rtt must be positive")
    idx, t = _as_arrays(trace)
    if idx.size < 2 or np.all(idx == idx[0]):
        raise DegenerateTrace(f"need two distinct indices, got {np.unique(idx).size}")
    threshold = config.threshold_fraction * arq_rtt

    if config.init == "envelope":
        mask = _envelope_start(idx, t, threshold)
    elif config.init == "all":
        mask = np.ones(idx.size, dtype=bool)
    else:
        raise ValueError(f"unknown init {config.init!r}")

    converged = False
    iterations = 0
    offset = gap = 0.0
    r = t
    while iterations < config.max_iterations:
        if np.unique(idx[mask]).size < 2:
            # too few inliers to refit; fall back to the full trace once
            mask = np.ones(idx.size, dtype=bool)
        offset, gap = _ols(idx[mask], t[mask])
        iterations += 1
        r = t - offset - idx * gap
        new_mask = np.abs(r) <= threshold
        if np.array_equal(new_mask, mask):
            converged = True
            break
        mask = new_mask

    fit = RegularizationFit(
        offset=offset,
        gap=gap,
        residuals=tuple((int(i), float(x)) for i, x in zip(idx, r)),
        inlier_indices=frozenset(int(i) for i in idx[mask]),
        iterations=iterations,
        converged=converged,
        threshold=threshold,
    )
    if not converged and config.strict:
        raise NoConvergence(f"no fixed point after {iterations} fits", fit=fit)
    return fit


# -- inter-arrival diagnostics ---------------------------------------------


def successive_gaps(trace: Trace) -> np.ndarray:
    """Arrival differences between packets with consecutive indices."""
    idx, t = _as_arrays(trace)
    order = np.argsort(idx, kind="stable")
    idx, t = idx[order], t[order]
    consecutive = np.diff(idx) == 1
    return np.diff(t)[consecutive]


def gap_histogram(trace: Trace, bin_width: float = DEFAULT_BIN_WIDTH) -> list[tuple[float, int]]:
    """
    Histogram of successive gaps with their mean removed.

    Bins are centred on integer multiples of ``bin_width``.  A packet
    delayed by one round trip between two on-time neighbours contributes
    one gap near ``+T`` and one near ``-T``.
    """
    if len(trace) < 2:
        raise DegenerateTrace("gap histogram needs at least two arrivals")
    gaps = successive_gaps(trace)
    if gaps.size == 0:
        raise DegenerateTrace("no consecutive-index pairs in trace")
    dev = gaps - gaps.mean()
    bins = np.rint(dev / bin_width).astype(np.int64)
    keys, counts = np.unique(bins, return_counts=True)
    return [(float(k * bin_width), int(c)) for k, c in zip(keys, counts)]


def estimate_arq_rtt(trace: Trace, bin_width: float = DEFAULT_BIN_WIDTH, min_separation: int = 5) -> float | None:
    """
    Round-trip estimate from the side clusters of the successive gaps.

    Gaps further than ``max(min_separation * bin_width, 4 sigma)`` from the
    centre are folded onto one side (a late packet gives one ``+T`` and one
    ``-T`` gap), the modal bin is located and the median of the gaps within
    ``2 sigma`` of it is returned.  ``sigma`` is a MAD estimate of the
    central spread.  Returns None when fewer than three gaps lie outside.
    """
    if len(trace) < 2:
        raise DegenerateTrace("need at least two arrivals")
    gaps = successive_gaps(trace)
    if gaps.size == 0:
        raise DegenerateTrace("no consecutive-index pairs in trace")
    dev = gaps - np.median(gaps)
    sigma = 1.4826 * float(np.median(np.abs(dev)))
    radius = max(min_separation * bin_width, 4.0 * sigma)
    side = np.abs(dev[np.abs(dev) >= radius])
    if side.size < 3:
        return None
    bins, counts = np.unique(np.rint(side / bin_width).astype(np.int64), return_counts=True)
    mode = bins[np.argmax(counts)] * bin_width
    window = max(2.0 * sigma, bin_width)
    return float(np.median(side[np.abs(side - mode) <= window]))


def histogram_csv(hist: Iterable[tuple[float, int]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["gap", "count"])
    for value, count in hist:
        writer.writerow([repr(value), count])
    return buf.getvalue()


def read_bare_csv(path: str | Path) -> list[tuple[int, float]]:
    """Read an externally recorded ``index,arrival_ns`` trace (seconds out)."""
    with Path(path).open(newline="") as fh:
        return [(int(row["index"]), int(row["arrival_ns"]) * 1e-9) for row in csv.DictReader(fh)]


def write_bare_csv(trace: Trace, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "arrival_ns"])
        for index, arrival in trace:
            writer.writerow([index, int(round(arrival * 1e9))])
