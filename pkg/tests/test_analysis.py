import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cob import analysis as an
from cob.analysis import ChiParams


def chi(ell, h=0.8):
    return ChiParams.from_h(ell, h)


class TestChiDistribution:
    def test_single_component(self):
        assert an.chi_pmf(1, chi(1)) == Fraction(2, 5)
        assert an.chi_pmf(3, chi(1)) == Fraction(2, 5) * Fraction(3, 5) ** 2

    def test_two_components(self):
        assert an.chi_pmf(1, chi(2)) == Fraction(4, 25)

    def test_degenerate(self):
        assert an.chi_pmf(0, chi(0)) == 1
        assert all(an.chi_pmf(w, chi(0)) == 0 for w in range(1, 5))
        assert an.chi_mean(chi(0)) == 0 and an.chi_mean_exact(chi(0)) == 0

    def test_pmf_domain(self):
        with pytest.raises(ValueError):
            an.chi_pmf(0, chi(3))

    @pytest.mark.parametrize("ell", [1, 10, 100])
    def test_mass(self, ell):
        p = chi(ell)
        total = sum(float(an.chi_pmf(w, p)) for w in range(1, 400))
        assert abs(total - 1) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 30), st.integers(0, 60), st.fractions(Fraction(1, 3) + Fraction(1, 1000), Fraction(1, 2)))
    def test_tail_matches_cdf(self, ell, w, q):
        p = ChiParams(ell, q)
        assert an.chi_tail(w, p) == pytest.approx(float(1 - an.chi_cdf(w, p)), rel=1e-9, abs=1e-300)

    def test_tail_at_zero(self):
        assert an.chi_tail(0, chi(4)) == 1.0

    def test_invalid_q(self):
        with pytest.raises(ValueError):
            ChiParams(2, 1)


class TestChiMean:
    def test_geometric(self):
        assert an.chi_mean(chi(1)) == pytest.approx(2.5, abs=1e-11)
        assert an.chi_mean_exact(chi(1)) == Fraction(5, 2)

    @pytest.mark.parametrize("ell", [2, 5, 17, 40])
    def test_summation_matches_inclusion_exclusion(self, ell):
        assert an.chi_mean(chi(ell)) == pytest.approx(float(an.chi_mean_exact(chi(ell))), abs=1e-9)

    def test_monte_carlo(self):
        rng = np.random.default_rng(2024)
        samples = np.concatenate([rng.geometric(0.4, size=(100_000, 100)).max(axis=1) for _ in range(10)])
        mu = an.chi_mean(chi(100))
        assert abs(samples.mean() - mu) < 3 * samples.std(ddof=1) / math.sqrt(samples.size)


class TestSteps:
    def test_cob(self):
        assert an.expected_cob_steps(1, 0.8, exact=True) == Fraction(23, 2)
        assert an.expected_cob_steps(0, 0.8) == 4

    def test_cob_monotone_in_ell(self):
        vals = [an.expected_cob_steps(ell, 0.8) for ell in range(0, 200, 7)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_alg(self):
        assert an.expected_alg_steps(0.8) == Fraction(25, 2)
        assert an.expected_alg_steps(1) == 11

    def test_alg_decreasing(self):
        hs = [Fraction(67, 100) + Fraction(k, 100) for k in range(34)]
        vals = [an.expected_alg_steps(h) for h in hs]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    @pytest.mark.parametrize("h", [0.6, Fraction(2, 3), 1.1])
    def test_premise(self, h):
        with pytest.raises(ValueError):
            an.expected_alg_steps(h)


class TestLeader:
    def test_values(self):
        assert an.honest_leader_probability(1) == 1
        assert an.honest_leader_probability(0.8) == Fraction(7424, 10000)

    def test_increasing(self):
        hs = [Fraction(2, 3) + Fraction(k, 300) for k in range(1, 101)]
        vals = [an.honest_leader_probability(h) for h in hs]
        assert all(a < b for a, b in zip(vals, vals[1:]))


class TestWeights:
    def test_cob_single_component(self):
        assert an.cob_weight(1, 0.8, 4000) == 8_660_750

    def test_cob_no_components(self):
        assert an.cob_weight(0, 0.8, 4000) == 4000 * 600

    def test_cob_hundred_components(self):
        w = an.cob_weight(100, 0.8, 4000, exact=False)
        assert 5.5e7 * 0.99 < w < 5.5e7 * 1.01

    def test_cob_realized_steps(self):
        assert an.cob_weight(1, 0.8, 10, steps=4) == 10 * (2 * 132 + 2 * Fraction(1601, 8))

    def test_alg(self):
        assert an.alg_weight_honest(1, 0.8, 4000) == 8_656_000
        assert an.alg_weight_drop(1, 0.8, 4000) == 7_110_400

    @given(st.integers(1, 50), st.integers(1, 5000))
    def test_alg_linear(self, ell, n):
        assert an.alg_weight_honest(ell, 0.8, n) == ell * n * an.alg_weight_honest(1, 0.8, 1)
        assert an.alg_weight_drop(ell, 0.8, n) == ell * n * an.alg_weight_drop(1, 0.8, 1)


class TestFigure:
    def test_first_row(self):
        row = an.figure_data(ell_range=[1])[0]
        assert (row.cob, row.alg_honest, row.alg_drop) == (8_660_750, 8_656_000, 7_110_400)

    def test_shape(self):
        rows = an.figure_data(ell_range=range(1, 1001), exact_up_to=8)
        for r in rows:
            assert r.alg_drop <= r.alg_honest
            if r.ell >= 2:
                assert r.cob < r.alg_honest and r.cob < r.alg_drop
        assert float(rows[99].cob) / float(rows[99].alg_honest) < 0.1

    def test_csv(self):
        text = an.figure_csv(an.figure_data(ell_range=[1]))
        lines = text.strip().splitlines()
        assert lines[0] == "ell,cob_mb,alg_honest_mb,alg_drop_mb"
        assert lines[1] == "1,8.66075,8.656,7.1104"

    def test_svg_monotone(self):
        rows = an.figure_data(ell_range=range(1, 60), exact_up_to=4)
        svg = an.figure_svg(rows, log=True)
        assert svg.startswith("<svg") and svg.count("<polyline") == 3
        for line in svg.splitlines():
            if line.startswith("<polyline"):
                pts = [tuple(map(float, p.split(","))) for p in line.split('points="')[1].rstrip('"/>').split()]
                xs = [x for x, _ in pts]
                ys = [y for _, y in pts]
                assert xs == sorted(xs)
                # screen y shrinks as the value grows
                assert all(a >= b - 1e-9 for a, b in zip(ys, ys[1:]))
