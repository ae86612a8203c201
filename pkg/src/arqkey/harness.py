"""
Experiment drivers: exhaustive enumeration oracle, reference curve and the
end-to-end parameter grid.
"""

from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from arqkey.adversary import eve_attempt_reconstruction, eve_view, CompromisedKey, wilson_interval
from arqkey.channel import ChannelParams
from arqkey.errors import TooLarge
from arqkey.pipeline import run_session
from arqkey.security import ChannelRates, compromise_probability, sec_curve, write_curve_csv

MAX_ENUM_N = 12

REFERENCE_N = 617
REFERENCE_CB = 0.9

DEFAULT_GRID: dict[str, Any] = {
    "seed": 20240601,
    "sessions_per_cell": 125,
    "arq_rtt": 0.008,
    "n": [32, 128],
    "c_b": [0.5, 0.9],
    "c_e": [0.5, 0.9],
    "jitter_fraction": [0.1],
    "enumeration": {"n_max": 8, "grid_step": 0.1},
}


@lru_cache(maxsize=MAX_ENUM_N + 1)
def _cover_matrix(n: int) -> tuple[np.ndarray, np.ndarray]:
    masks = np.arange(1 << n, dtype=np.int64)
    popcount = np.array([bin(m).count("1") for m in masks], dtype=np.int64)
    # row b, column e: every packet Bob got first time, Eve also got
    covered = ((masks[:, None] & ~masks[None, :]) == 0).astype(np.float64)
    return popcount, covered


def enumerate_exact(n: int, rates: ChannelRates) -> float:
    """
    Compromise probability by brute force over all joint outcomes.

    Every packet has four outcomes (Bob ok/failed x Eve ok/failed).  The
    probability of each of the ``4**n`` outcome vectors is summed over
    those in which Eve holds every packet Bob got on its first attempt.

    Raises
    ------
    TooLarge
        For ``n > 12``.
    """
    if n > MAX_ENUM_N:
        raise TooLarge(f"n={n} exceeds enumeration limit {MAX_ENUM_N}")
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return 1.0
    popcount, covered = _cover_matrix(n)
    p_bob = rates.c_b**popcount * rates.e_b ** (n - popcount)
    p_eve = rates.c_e**popcount * rates.e_e ** (n - popcount)
    return float(p_bob @ (covered @ p_eve))


def oracle_equivalence(n_max: int, grid_step: float) -> dict:
    steps = int(round(1.0 / grid_step))
    values = [k / steps for k in range(steps + 1)]
    worst = 0.0
    checked = 0
    for n in range(1, n_max + 1):
        for c_b, c_e in itertools.product(values, values):
            rates = ChannelRates(c_b, c_e)
            worst = max(worst, abs(enumerate_exact(n, rates) - compromise_probability(n, rates)))
            checked += 1
    return {"n_max": n_max, "grid_step": grid_step, "cases": checked, "max_abs_error": worst, "pass": worst < 1e-12}


def reproduce_reference_curve(out_path: str | Path, n: int = REFERENCE_N, c_b: float = REFERENCE_CB) -> Path:
    """Write the security-level curve over c_e in [0, 1] (step 0.01) as CSV."""
    return write_curve_csv(sec_curve(n, c_b), out_path)


# -- end-to-end grid ---------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    n: int
    c_b: float
    c_e: float
    jitter_fraction: float

    @property
    def key(self) -> str:
        return f"n={self.n},c_b={self.c_b},c_e={self.c_e},jitter={self.jitter_fraction}"


def grid_cells(config: dict) -> list[GridCell]:
    if "cells" in config:
        return [GridCell(int(c["n"]), float(c["c_b"]), float(c["c_e"]), float(c.get("jitter_fraction", 0.1))) for c in config["cells"]]
    axes = [config.get(k, []) for k in ("n", "c_b", "c_e", "jitter_fraction")]
    return [GridCell(int(n), float(b), float(e), float(j)) for n, b, e, j in itertools.product(*axes)]


def run_cell(cell: GridCell, sessions: int, seed: int, arq_rtt: float, cell_index: int) -> dict:
    params = ChannelParams(c_b=cell.c_b, c_e=cell.c_e, arq_rtt=arq_rtt, jitter_sd=cell.jitter_fraction * arq_rtt)
    counts = dict(sessions=0, agreements=0, mismatches=0, aborted=0, timing_compromises=0, oracle_compromises=0)
    confusion = dict(delivered=0, correct=0, retransmitted=0, false_inclusions=0, false_exclusions=0)
    for k in range(sessions):
        tr = run_session(cell.n, params, [seed, cell_index, k], "timing")
        counts["sessions"] += 1
        for name, value in tr.classification_counts().items():
            if name in confusion:
                confusion[name] += value
        truth = tr.true_first_attempt
        captured = {o.packet_index for o in tr.outcomes if o.eve_captured}
        counts["oracle_compromises"] += truth <= captured
        if tr.aborted:
            counts["aborted"] += 1
            counts["timing_compromises"] += 1
            continue
        counts["agreements" if tr.agreed else "mismatches"] += 1
        result = eve_attempt_reconstruction(eve_view(tr.packets, tr.outcomes, tr.announcement))
        counts["timing_compromises"] += isinstance(result, CompromisedKey)

    closed = compromise_probability(cell.n, ChannelRates(cell.c_b, cell.c_e))
    t_rate = counts["timing_compromises"] / sessions
    o_rate = counts["oracle_compromises"] / sessions
    return {
        "cell": asdict(cell),
        "counts": counts,
        "classification": {
            **confusion,
            "accuracy": confusion["correct"] / confusion["delivered"] if confusion["delivered"] else None,
        },
        "compromise": {
            "closed_form": closed,
            "timing_rate": t_rate,
            "timing_interval": list(wilson_interval(counts["timing_compromises"], sessions)),
            "oracle_rate": o_rate,
            "oracle_interval": list(wilson_interval(counts["oracle_compromises"], sessions)),
            "timing_vs_oracle_relative": abs(t_rate - o_rate) / o_rate if o_rate else (0.0 if t_rate == 0 else None),
        },
    }


def run_e2e_grid(config: dict, workers: int = 1) -> dict:
    """
    Run every grid cell through channel, protocol and adversary.

    ``config`` keys: ``seed``, ``sessions_per_cell``, ``arq_rtt``, either
    ``cells`` (list of dicts) or the axes ``n``/``c_b``/``c_e``/
    ``jitter_fraction``, and optionally ``enumeration`` with ``n_max`` and
    ``grid_step``.  Missing axes mean an empty grid.
    """
    seed = int(config.get("seed", DEFAULT_GRID["seed"]))
    sessions = int(config.get("sessions_per_cell", DEFAULT_GRID["sessions_per_cell"]))
    arq_rtt = float(config.get("arq_rtt", DEFAULT_GRID["arq_rtt"]))
    cells = grid_cells(config)
    jobs = [(cell, sessions, seed, arq_rtt, i) for i, cell in enumerate(cells)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, *zip(*jobs)))
    else:
        results = [run_cell(*job) for job in jobs]

    report: dict[str, Any] = {
        "seed": seed,
        "sessions_per_cell": sessions,
        "arq_rtt": arq_rtt,
        "cells": {cell.key: res for cell, res in zip(cells, results)},
        "totals": {
            "sessions": sum(r["counts"]["sessions"] for r in results),
            "mismatches": sum(r["counts"]["mismatches"] for r in results),
            "aborted": sum(r["counts"]["aborted"] for r in results),
        },
    }
    if "enumeration" in config:
        enum_cfg = config["enumeration"]
        report["oracle_equivalence"] = oracle_equivalence(int(enum_cfg["n_max"]), float(enum_cfg["grid_step"]))
    return report


def canonical_json(doc: Any) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def summary_text(report: dict) -> str:
    lines = [
        f"sessions={report['totals']['sessions']} mismatches={report['totals']['mismatches']} "
        f"aborted={report['totals']['aborted']}"
    ]
    for key, res in report["cells"].items():
        comp = res["compromise"]
        acc = res["classification"]["accuracy"]
        lines.append(
            f"{key}: agree={res['counts']['agreements']}/{res['counts']['sessions']} "
            f"accuracy={'n/a' if acc is None else f'{acc:.5f}'} "
            f"P={comp['closed_form']:.6g} oracle={comp['oracle_rate']:.4f} timing={comp['timing_rate']:.4f}"
        )
    if "oracle_equivalence" in report:
        eq = report["oracle_equivalence"]
        lines.append(
            f"oracle equivalence: {'PASS' if eq['pass'] else 'FAIL'} "
            f"({eq['cases']} cases, max error {eq['max_abs_error']:.3g})"
        )
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir: str | Path, config: dict, elapsed: float | None = None) -> Path:
    """
    Write ``report.json``, ``summary.txt`` and ``config.json``.  Wall-clock
    time goes to ``timing.json`` so the other files stay byte-stable.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(canonical_json(report))
    (out / "summary.txt").write_text(summary_text(report))
    (out / "config.json").write_text(canonical_json(config))
    if elapsed is not None:
        (out / "timing.json").write_text(canonical_json({"wall_clock_seconds": elapsed}))
    return out


def timed_grid(config: dict, out_dir: str | Path, workers: int = 1) -> dict:
    start = time.perf_counter()
    report = run_e2e_grid(config, workers)
    write_report(report, out_dir, config, time.perf_counter() - start)
    return report
