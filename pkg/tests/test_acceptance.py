"""
Acceptance criteria.  Each test prints one ``[AC n] PASS|FAIL`` line
(visible even with output capture) and then asserts.
"""

import math
import socket
import threading
import time

import numpy as np
import pytest

from arqkey import transport
from arqkey.adversary import empirical_compromise_rate, fast_oracle_compromised, session_compromised
from arqkey.channel import ChannelParams, simulate_burst
from arqkey.harness import DEFAULT_GRID, enumerate_exact, reproduce_reference_curve, run_e2e_grid
from arqkey.pipeline import run_session
from arqkey.protocol import BobConfig, accept_datagrams, alice_generate_burst, bob_process_burst, derive_key, payload_store
from arqkey.regularize import fit_schedule
from arqkey.security import (
    ChannelRates,
    compromise_probability,
    degraded_channel_sec,
    min_packets_for_sec,
    read_curve_csv,
    security_level,
)

T = 0.008


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, started):
        with capsys.disabled():
            print(f"\n[AC {number}] {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f}s) {detail}")
        assert ok, detail

    return emit


def test_ac1_formula_fidelity(report):
    start = time.perf_counter()
    grid = [k / 10 for k in range(11)]
    worst = 0.0
    for n in range(1, 13):
        for c_b in grid:
            for c_e in grid:
                r = ChannelRates(c_b, c_e)
                worst = max(worst, abs(enumerate_exact(n, r) - compromise_probability(n, r)))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-12 and elapsed < 120, f"max |enum - closed| = {worst:.2e} over 1452 cases", start)


def test_ac2_reference_constants(report):
    start = time.perf_counter()
    r = ChannelRates(0.5, 0.5)
    sec = security_level(617, r)
    n = min_packets_for_sec(256, r)
    report(2, 256.0 <= sec <= 256.1 and n == 617, f"SEC(617) = {sec:.4f} bits, min N for 256 bits = {n}", start)


def test_ac3_degraded_argmax(report):
    start = time.perf_counter()
    grid = [k / 100 for k in range(101)]
    values = [degraded_channel_sec(617, c) for c in grid]
    best = grid[int(np.argmax(values))]
    report(3, best == 0.5, f"argmax c_b = {best:.2f}, SEC = {max(values):.3f}", start)


def test_ac4_reference_curve(report, tmp_path):
    start = time.perf_counter()
    curve = read_curve_csv(reproduce_reference_curve(tmp_path / "curve.csv"))
    err = max(abs(sec - -617 * math.log2(0.1 + 0.9 * c_e)) for c_e, sec in curve)
    ends = dict(curve)
    ok = len(curve) == 101 and err < 1e-9 and round(ends[0.0], 1) == 2049.6 and ends[1.0] == 0.0
    report(4, ok, f"{len(curve)} points, max err {err:.1e}, SEC(0) = {ends[0.0]:.2f}, SEC(1) = {ends[1.0]}", start)


def test_ac5_monte_carlo(report):
    start = time.perf_counter()
    params = ChannelParams(c_b=0.5, c_e=0.5)
    # the set test used for 1e6 sessions must agree with the full pipeline session by session
    for k in range(300):
        tr = run_session(10, params, [55, k], "oracle")
        assert fast_oracle_compromised(10, params, [55, k]) == session_compromised(tr)
    est = empirical_compromise_rate(10, params, sessions=1_000_000, seed=20240601)
    lo, hi = est.interval
    target = 0.0563135
    elapsed = time.perf_counter() - start
    ok = lo <= target <= hi and elapsed < 300
    report(5, ok, f"rate {est.rate:.6f}, 95% Wilson [{lo:.6f}, {hi:.6f}] vs {target}", start)


def test_ac6_key_agreement(report):
    start = time.perf_counter()
    result = run_e2e_grid(DEFAULT_GRID)
    totals = result["totals"]
    elapsed = time.perf_counter() - start
    ok = totals["sessions"] == 1000 and totals["mismatches"] == 0 and elapsed < 120
    report(6, ok, f"{totals['sessions']} sessions, {totals['mismatches']} mismatches, {totals['aborted']} aborted", start)


def test_ac7_regularizer(report):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(20):
        offset, gap = rng.uniform(0.001, 1.0), rng.uniform(1e-3, 5e-2)
        keep = np.sort(rng.choice(np.arange(1, 1001), size=700, replace=False))
        o, g = fit_schedule([(int(i), offset + int(i) * gap) for i in keep])
        worst = max(worst, abs(o - offset) / offset, abs(g - gap) / gap)

    params = ChannelParams(c_b=0.9, c_e=0.5, arq_rtt=T, jitter_sd=T / 10)
    correct = delivered = 0
    for k in range(100):
        counts = run_session(1000, params, [77, k], "timing").classification_counts()
        correct += counts["correct"]
        delivered += counts["delivered"]
    accuracy = correct / delivered
    elapsed = time.perf_counter() - start
    ok = worst < 1e-12 and accuracy >= 0.998 and delivered >= 99_000 and elapsed < 60
    report(7, ok, f"max rel err {worst:.1e}; accuracy {accuracy:.5f} over {delivered} packets", start)


def test_ac8_retransmission_leakage(report):
    start = time.perf_counter()
    c_e = 0.5
    out = simulate_burst(200_000, ChannelParams(c_b=0.5, c_e=c_e), seed=8)
    twice = np.array([o.eve_captured for o in out if o.transmission_count == 2], dtype=float)
    expected = 1 - (1 - c_e) ** 2
    sigma = math.sqrt(expected * (1 - expected) / twice.size)
    rate = twice.mean()
    ok = abs(rate - expected) <= 3 * sigma and rate > c_e
    report(8, ok, f"capture {rate:.4f} on {twice.size} packets vs {expected} (3 sigma {3 * sigma:.4f})", start)


def test_ac9_transport_loopback(report):
    start = time.perf_counter()
    sid = 0x5EED
    packets = alice_generate_burst(1000, sid, seed=9)
    udp = transport.bind_udp("127.0.0.1", 0)
    listener = socket.create_server(("127.0.0.1", 0))
    box = {}
    thread = threading.Thread(target=lambda: box.setdefault("bob", transport.serve_once(udp, listener, T, timeout=20)))
    thread.start()
    with transport.connect_control("127.0.0.1", listener.getsockname()[1]) as control:
        alice = transport.run_alice(packets, ("127.0.0.1", udp.getsockname()[1]), control, 0.002)
    thread.join(60)
    udp.close()
    listener.close()
    bob = box["bob"]

    replay_raw = transport.records_to_raw(transport.raw_to_records(bob.raw))
    received = accept_datagrams(replay_raw, sid)
    replayed = bob_process_burst(received, T, BobConfig(burst_size=1000)).without(bob.slipped)
    same_decision = replayed == bob.announcement
    same_key = derive_key("bob", replayed, payload_store(received)).key == bob.key.key
    agreed = alice.key.key == bob.key.key
    elapsed = time.perf_counter() - start
    ok = agreed and same_decision and same_key and len(bob.received) == 1000 and elapsed < 60
    detail = (
        f"received {len(bob.received)}, selected {len(bob.announcement.selected_indices)}, "
        f"slipped {len(bob.slipped)}, agreement {agreed}, replay identical {same_decision and same_key}"
    )
    report(9, ok, detail, start)
