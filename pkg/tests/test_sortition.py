import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cob.sortition import (
    Credential,
    Crypto,
    Digest,
    InvalidParameter,
    NoFeasibleCommittee,
    SeededHasher,
    Sha256Hasher,
    SimulatedSignatures,
    SortitionParams,
    check_assumptions,
    concat,
    honest_count,
    make_credential,
    make_hasher,
    min_committee_size,
    passes,
    phi,
    supermajority,
    verify_credential,
)


class TestHash:
    def test_deterministic(self):
        h = Sha256Hasher()
        assert h(b"abc") == h(b"abc")

    @pytest.mark.parametrize("bits", [8, 13, 256, 512])
    def test_length(self, bits):
        for hasher in (Sha256Hasher(bits), SeededHasher(3, bits)):
            d = hasher(b"")
            assert d.bits == bits and len(d.data) == (bits + 7) // 8

    @pytest.mark.parametrize("hasher", [Sha256Hasher(), SeededHasher(11)], ids=["sha256", "seeded"])
    def test_bit_balance(self, hasher):
        k = 10_000
        counts = np.zeros(256)
        for i in range(k):
            v = hasher(concat(b"balance", i)).value
            counts += np.array([(v >> j) & 1 for j in range(256)])
        sigma = math.sqrt(k * 0.25)
        assert np.all(np.abs(counts - k / 2) < 5 * sigma)

    def test_seeds_give_different_oracles(self):
        assert SeededHasher(1)(b"x") != SeededHasher(2)(b"x")

    def test_make_hasher_round_trip(self):
        for h in (Sha256Hasher(), SeededHasher(9, 64)):
            assert make_hasher(h.describe())(b"q") == h(b"q")
        with pytest.raises(ValueError):
            make_hasher({"name": "md5"})


class TestPhi:
    def test_all_zero(self):
        assert phi(Digest(0, 8)) == Fraction(1, 256)

    @pytest.mark.parametrize("d", [1, 8, 256])
    def test_all_one(self, d):
        assert phi(Digest((1 << d) - 1, d)) == 1

    def test_two_bit_example(self):
        assert phi(Digest.from_bits([1, 0])) == Fraction(1, 2)

    def test_unit_vectors(self):
        d = 16
        for i in range(d):
            assert phi(Digest.from_bits([int(j == i) for j in range(d)])) == Fraction(1 + 2 ** i, 2 ** d)

    @given(st.integers(1, 64).flatmap(lambda d: st.tuples(st.just(d), st.integers(0, (1 << d) - 1))))
    def test_range_and_passes_agree(self, dv):
        d, v = dv
        x = phi(Digest(v, d))
        assert 0 < x <= 1
        for t in (Fraction(1, 3), Fraction(1, 2), x, Fraction(1)):
            assert passes(Digest(v, d), t) == (x <= t)


class TestConcat:
    @given(st.lists(st.binary(max_size=8), max_size=4), st.lists(st.binary(max_size=8), max_size=4))
    def test_injective(self, a, b):
        if a != b:
            assert concat(*a) != concat(*b)

    def test_rejects_bool_and_negative(self):
        with pytest.raises(TypeError):
            concat(True)
        with pytest.raises(ValueError):
            concat(-1)


@pytest.fixture
def crypto():
    return Crypto.default()


class TestSignatures:
    def test_unique(self, crypto):
        kp = crypto.scheme.keygen(b"alice")
        assert crypto.scheme.sign(kp.sk, b"m") == crypto.scheme.sign(kp.sk, b"m")

    def test_verify(self, crypto):
        kp = crypto.scheme.keygen(b"alice")
        assert crypto.scheme.verify(kp.pk, crypto.scheme.sign(kp.sk, b"m"), b"m")
        assert not crypto.scheme.verify(kp.pk, crypto.scheme.sign(kp.sk, b"m"), b"n")

    def test_other_key_rejects(self, crypto):
        a, b = crypto.scheme.keygen(b"a"), crypto.scheme.keygen(b"b")
        assert a.pk != b.pk
        assert not crypto.scheme.verify(b.pk, crypto.scheme.sign(a.sk, b"m"), b"m")

    def test_unknown_key(self):
        fresh = SimulatedSignatures()
        kp = Crypto.default().scheme.keygen(b"x")
        assert not fresh.verify(kp.pk, b"\x00" * 32, b"m")


class TestSelection:
    def test_p_one_selects_everyone(self, crypto):
        params = SortitionParams(5, 5, b"r")
        for i in range(5):
            kp = crypto.scheme.keygen(bytes([i]))
            for s in range(1, 6):
                assert make_credential(kp, params, s, crypto) is not None

    def test_all_ones_hash_never_passes(self):
        assert not passes(Digest((1 << 256) - 1, 256), Fraction(999, 1000))

    def test_rate(self):
        crypto = Crypto.seeded(5)
        N, n, steps = 10_000, 100, 20
        params = SortitionParams(N, n, b"rate")
        keys = [crypto.scheme.keygen(concat(b"k", i)) for i in range(N)]
        hits = sum(make_credential(k, params, s, crypto) is not None for s in range(1, steps + 1) for k in keys)
        trials, p = N * steps, n / N
        assert abs(hits - trials * p) < 3 * math.sqrt(trials * p * (1 - p))

    def test_round_trip_and_step_binding(self, crypto):
        params = SortitionParams(4, 4, b"r")
        kp = crypto.scheme.keygen(b"x")
        cred = make_credential(kp, params, 7, crypto)
        assert verify_credential(cred, params, crypto)
        moved = Credential(cred.player, 8, cred.sig, cred.lottery, cred.counter)
        assert not verify_credential(moved, params, crypto)

    def test_lottery_is_phi_of_signature_hash(self, crypto):
        params = SortitionParams(4, 4, b"r")
        cred = make_credential(crypto.scheme.keygen(b"y"), params, 3, crypto)
        assert cred.lottery == phi(crypto.hash(cred.sig))

    def test_weighted_counter_bound(self, crypto):
        kp = crypto.scheme.keygen(b"w")
        params = SortitionParams(2, 2, b"r", weights={kp.pk: 3})
        cred = make_credential(kp, params, 1, crypto)
        assert cred.counter == 1 and verify_credential(cred, params, crypto)
        forged = Credential(cred.player, 1, cred.sig, cred.lottery, 4)
        assert not verify_credential(forged, params, crypto)

    @pytest.mark.parametrize("t", [1, 2, 5])
    def test_weighted_rate(self, t):
        crypto = Crypto.seeded(17)
        N, n, steps = 2000, 100, 10
        keys = [crypto.scheme.keygen(concat(b"w", i)) for i in range(N)]
        params = SortitionParams(N, n, b"weighted", weights={k.pk: t for k in keys})
        hits = sum(make_credential(k, params, s, crypto) is not None for s in range(1, steps + 1) for k in keys)
        trials = N * steps
        q = 1 - (1 - n / N) ** t
        assert abs(hits - trials * q) < 3 * math.sqrt(trials * q * (1 - q))

    def test_failure_rate_raises_threshold(self):
        assert SortitionParams(100, 10, failure_rate=Fraction(1, 2)).threshold == Fraction(1, 5)
        assert SortitionParams(100, 90, failure_rate=Fraction(1, 2)).threshold == 1


class TestAssumptions:
    def test_supermajority(self):
        assert [supermajority(n) for n in (1, 3, 7, 4000)] == [1, 3, 5, 2667]

    def test_honest_count_rounds_exactly(self):
        assert honest_count(500, 0.8) == 400
        assert honest_count(5, Fraction(7, 10)) == 4

    @pytest.mark.parametrize("h", [0.5, 2 / 3, 1.01])
    def test_premise(self, h):
        with pytest.raises(InvalidParameter):
            check_assumptions(100, h, 10, 1e-3)

    def test_no_malicious(self):
        from scipy.stats import binom

        N, n = 300, 90
        rep = check_assumptions(N, 1, n, 1e-6)
        t = supermajority(n)
        assert rep.p_cond1 == pytest.approx(binom.sf(t, N, n / N), rel=1e-9)
        assert rep.p_cond2 == pytest.approx(binom.cdf(2 * t - 1, N, n / N), rel=1e-9)

    @pytest.mark.parametrize("N", [10, 500])
    def test_full_committee_is_deterministic(self, N):
        rep = check_assumptions(N, 0.8, N, 1e-9)
        H, M, t = honest_count(N, 0.8), N - honest_count(N, 0.8), supermajority(N)
        expected = H > t and H + 2 * M < 2 * t
        assert rep.satisfied == expected
        assert rep.p_cond1 == (1.0 if H > t else 0.0)

    def test_full_committee_can_fail(self):
        rep = check_assumptions(10, 0.7, 10, 0.5)
        assert rep.p_cond1 == 0.0 and not rep.satisfied

    @pytest.mark.parametrize("n", [150, 250, 350])
    def test_monte_carlo(self, n):
        N, h, k = 500, 0.8, 1_000_000
        rng = np.random.default_rng(n)
        H = honest_count(N, h)
        hp = rng.binomial(H, n / N, k)
        mp = rng.binomial(N - H, n / N, k)
        t = supermajority(n)
        rep = check_assumptions(N, h, n, 1e-3)
        for est, exact in ((np.mean(hp > t), rep.p_cond1), (np.mean(hp + 2 * mp < 2 * t), rep.p_cond2)):
            sigma = math.sqrt(max(exact * (1 - exact), 1e-12) / k)
            assert abs(est - exact) <= 3 * sigma + 1e-6

    def test_tiny_failure_keeps_precision(self):
        rep = check_assumptions(10 ** 6, 0.8, 4000, 1e-9)
        assert rep.satisfied
        assert 0 < rep.fail_cond2 < 1e-9


class TestMinCommittee:
    # Frozen from an independent scipy.stats.binom sweep.
    @pytest.mark.parametrize("N,expected", [(50, 49), (60, 58), (200, 165)])
    def test_known_sizes(self, N, expected):
        assert min_committee_size(N, 0.8, 1e-4) == expected

    @pytest.mark.parametrize("N,h,eps", [(200, 0.8, 1e-4), (120, 0.9, 1e-3), (400, 0.75, 1e-2)])
    def test_minimal(self, N, h, eps):
        n = min_committee_size(N, h, eps)
        assert check_assumptions(N, h, n, eps).satisfied
        if n > 1:
            assert not check_assumptions(N, h, n - 1, eps).satisfied

    def test_vacuous_epsilon(self):
        assert min_committee_size(100, 0.8, 1) == 1

    def test_monotone_in_epsilon(self):
        sizes = [min_committee_size(300, 0.8, eps) for eps in (1e-1, 1e-2, 1e-3, 1e-4, 1e-6)]
        assert sizes == sorted(sizes)

    def test_infeasible(self):
        with pytest.raises(NoFeasibleCommittee):
            min_committee_size(20, 0.7, 1e-9)
