import math

import pytest
from hypothesis import given, settings, strategies as st

from arqkey.errors import Unreachable
from arqkey.harness import enumerate_exact
from arqkey.security import (
    ChannelRates,
    Regime,
    compromise_probability,
    degraded_channel_sec,
    min_packets_for_sec,
    read_curve_csv,
    sec_curve,
    security_level,
    security_report,
    write_curve_csv,
)

GRID = [k / 10 for k in range(11)]


def binomial_sum(n, c_b, c_e):
    """Sum over how many packets Bob got first time; Eve must have all of them."""
    return sum(math.comb(n, i) * (c_b * c_e) ** i * (1 - c_b) ** (n - i) for i in range(n + 1))


def linear_scan_min_n(target, rates, limit=100_000):
    for n in range(1, limit):
        if security_level(n, rates) >= target:
            return n
    raise AssertionError("scan limit reached")


class TestChannelRates:
    def test_derived_error_rates(self):
        r = ChannelRates(0.3, 0.8)
        assert r.e_b + r.c_b == 1.0
        assert r.e_e + r.c_e == 1.0

    @pytest.mark.parametrize("c_b,c_e", [(-0.1, 0.5), (0.5, 1.01), (float("nan"), 0.5)])
    def test_out_of_range(self, c_b, c_e):
        with pytest.raises(ValueError):
            ChannelRates(c_b, c_e)


class TestCompromiseProbability:
    def test_operating_point(self):
        p = compromise_probability(617, ChannelRates(0.5, 0.5))
        assert p == pytest.approx(0.75**617, rel=1e-12)
        assert -math.log2(p) == pytest.approx(256.078137, abs=1e-5)

    def test_perfect_eve(self):
        assert compromise_probability(10, ChannelRates(1.0, 1.0)) == 1.0

    def test_small_n_matches_enumeration(self):
        rates = ChannelRates(0.5, 0.5)
        assert compromise_probability(10, rates) == pytest.approx(enumerate_exact(10, rates), abs=1e-15)
        assert compromise_probability(10, rates) == pytest.approx(0.0563135147094726, abs=1e-15)

    def test_zero_packets(self):
        assert compromise_probability(0, ChannelRates(0.7, 0.1)) == 1.0

    def test_negative_n(self):
        with pytest.raises(ValueError):
            compromise_probability(-1, ChannelRates(0.5, 0.5))

    def test_large_n_log_domain(self):
        p = compromise_probability(2000, ChannelRates(0.5, 0.5))
        assert -math.log2(p) == pytest.approx(2000 * math.log2(4 / 3), rel=1e-12)

    def test_security_level_survives_probability_underflow(self):
        rates = ChannelRates(0.5, 0.5)
        assert compromise_probability(5000, rates) == 0.0
        assert security_level(5000, rates) == pytest.approx(5000 * math.log2(4 / 3), rel=1e-12)

    @pytest.mark.parametrize("n", range(0, 13))
    def test_binomial_identity(self, n):
        for c_b in GRID:
            for c_e in GRID:
                closed = compromise_probability(n, ChannelRates(c_b, c_e))
                assert abs(binomial_sum(n, c_b, c_e) - closed) < 1e-12

    def test_log_round_trip(self):
        rates = ChannelRates(0.5, 0.5)
        p = compromise_probability(617, rates)
        sec = security_level(617, rates)
        assert abs(-math.log2(p) - sec) / sec < 1e-9


class TestSecurityLevel:
    def test_reference_value(self):
        assert security_level(617, ChannelRates(0.5, 0.5)) == pytest.approx(617 * math.log2(4 / 3), rel=1e-12)

    def test_eve_never_errs(self):
        assert security_level(1000, ChannelRates(0.9, 1.0)) == 0.0

    def test_eve_always_errs(self):
        sec = security_level(617, ChannelRates(0.9, 0.0))
        assert sec == pytest.approx(-617 * math.log2(0.1), rel=1e-12)
        assert sec == pytest.approx(2049.63, abs=0.01)
        # cross-check at small n against the enumeration oracle
        assert security_level(6, ChannelRates(0.9, 0.0)) == pytest.approx(
            -math.log2(enumerate_exact(6, ChannelRates(0.9, 0.0))), rel=1e-12
        )

    def test_infinite_when_single_packet_suffices(self):
        assert security_level(3, ChannelRates(1.0, 0.0)) == math.inf
        assert security_level(0, ChannelRates(1.0, 0.0)) == 0.0

    def test_monotone_on_grid(self):
        for n in (1, 10, 617):
            for c_e in GRID:
                values = [security_level(n, ChannelRates(c_b, c_e)) for c_b in GRID]
                assert all(a <= b for a, b in zip(values, values[1:]))
            for c_b in GRID:
                values = [security_level(n, ChannelRates(c_b, c_e)) for c_e in GRID]
                assert all(a >= b for a, b in zip(values, values[1:]))

    @given(
        n=st.integers(0, 5000),
        c_b=st.floats(0, 1),
        c_e=st.floats(0, 1),
    )
    def test_sec_is_minus_log_p(self, n, c_b, c_e):
        rates = ChannelRates(c_b, c_e)
        p = compromise_probability(n, rates)
        sec = security_level(n, rates)
        assert sec >= 0
        if p > 1e-300:
            assert sec == pytest.approx(-math.log2(p), rel=1e-9, abs=1e-9)

    def test_report(self):
        rep = security_report(617, ChannelRates(0.5, 0.5))
        assert rep.regime is Regime.DEGRADED
        assert rep.sec_bits == pytest.approx(-math.log2(rep.p_compromise))
        assert security_report(10, ChannelRates(0.5, 0.9)).regime is Regime.GENERAL


class TestDegraded:
    def test_reference_value(self):
        assert degraded_channel_sec(617, 0.5) == pytest.approx(256.078, abs=1e-3)

    def test_perfect_link(self):
        assert degraded_channel_sec(617, 1.0) == 0.0

    def test_quarter(self):
        # 1 - 0.25 + 0.0625 = 0.8125
        assert degraded_channel_sec(617, 0.25) == pytest.approx(-617 * math.log2(0.8125), rel=1e-12)
        assert degraded_channel_sec(617, 0.25) == pytest.approx(184.83, abs=0.01)
        scaled = 617 / 8 * -math.log2(enumerate_exact(8, ChannelRates(0.25, 0.25)))
        assert degraded_channel_sec(617, 0.25) == pytest.approx(scaled, rel=1e-12)

    def test_argmax_on_grid(self):
        grid = [k / 100 for k in range(101)]
        values = [degraded_channel_sec(617, c) for c in grid]
        best = max(range(101), key=values.__getitem__)
        assert grid[best] == 0.5
        assert values.count(values[best]) == 1


class TestMinPackets:
    def test_reference_constant(self):
        assert min_packets_for_sec(256, ChannelRates(0.5, 0.5)) == 617

    def test_single_packet_enough(self):
        assert min_packets_for_sec(0.1, ChannelRates(1.0, 0.0)) == 1

    def test_general_point(self):
        rates = ChannelRates(0.9, 0.9)
        n = min_packets_for_sec(256, rates)
        assert n == linear_scan_min_n(256, rates)
        assert n == 1882
        assert security_level(n - 1, rates) < 256 <= security_level(n, rates)

    @pytest.mark.parametrize("rates", [ChannelRates(0.0, 0.3), ChannelRates(0.7, 1.0)])
    def test_unreachable(self, rates):
        with pytest.raises(Unreachable):
            min_packets_for_sec(10, rates)

    def test_non_positive_target(self):
        with pytest.raises(ValueError):
            min_packets_for_sec(0, ChannelRates(0.5, 0.5))

    @settings(max_examples=200)
    @given(
        target=st.floats(0.01, 512),
        c_b=st.floats(0.05, 1),
        c_e=st.floats(0, 0.95),
    )
    def test_inversion_consistency(self, target, c_b, c_e):
        rates = ChannelRates(c_b, c_e)
        n = min_packets_for_sec(target, rates)
        assert security_level(n, rates) >= target
        if n > 1:
            assert security_level(n - 1, rates) < target

    def test_matches_linear_scan(self):
        for c_b in (0.3, 0.5, 0.9):
            for c_e in (0.1, 0.5, 0.8):
                for target in (1, 64, 128, 256):
                    rates = ChannelRates(c_b, c_e)
                    assert min_packets_for_sec(target, rates) == linear_scan_min_n(target, rates)


class TestCurve:
    def test_points(self):
        assert sec_curve(617, 0.9, [1.0]) == [(1.0, 0.0)]
        [(c_e, sec)] = sec_curve(617, 0.9, [0.0])
        assert sec == pytest.approx(2049.63, abs=0.01)
        [(c_e, sec)] = sec_curve(617, 0.9, [0.5])
        assert sec == pytest.approx(-617 * math.log2(0.55), rel=1e-12)
        assert sec == pytest.approx(532.16, abs=0.01)

    def test_default_grid_and_order(self):
        curve = sec_curve(617, 0.9)
        assert len(curve) == 101
        assert [c for c, _ in curve] == sorted(c for c, _ in curve)

    def test_csv_round_trip(self, tmp_path):
        curve = sec_curve(617, 0.9)
        path = write_curve_csv(curve, tmp_path / "curve.csv")
        assert path.read_text().splitlines()[0] == "c_e,sec_bits"
        assert read_curve_csv(path) == curve
