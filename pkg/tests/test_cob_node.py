import copy

import pytest
from hypothesis import given, settings, strategies as st

from cob.cob_node import (
    CF0,
    CF1,
    CGF,
    NodeState,
    ProtocolContext,
    ProtocolViolation,
    StepSchedule,
    check_ending,
    coin_bits,
    emit_cf0,
    emit_cf1,
    emit_cgf,
    emit_step1,
    emit_step2,
    emit_step3,
    finalization_check_0,
    finalization_check_1,
    grade_and_update,
    on_certificate_received,
    snapshot,
    step_boundary,
    step_kind,
    verify_certificate,
)
from cob.protocol_types import Certificate, Tally, build_message, theta_digest, validate_message
from cob.sortition import Crypto, SortitionParams, concat, make_credential

CRYPTO = Crypto.default()
PARAMS = SortitionParams(7, 7, b"node")  # every user plays, t_H = 5
KEYS = [CRYPTO.scheme.keygen(concat(b"node", i)) for i in range(7)]


def ctx(m):
    return ProtocolContext(PARAMS, CRYPTO, m)


def val(tag: int) -> bytes:
    return bytes([tag]) * 32


def node(O, i=0):
    return NodeState(i, KEYS[i], 0, tuple(O))


def tally(step, payloads, theta=None):
    t = Tally(step)
    for i, p in enumerate(payloads):
        cred = make_credential(KEYS[i], PARAMS, step, CRYPTO)
        th = theta if theta is not None else (tuple(None for _ in p) if step >= 3 else None)
        t.add(build_message(KEYS[i], cred, tuple(p), CRYPTO, th))
    return t


class TestSchedule:
    def test_recurrence(self):
        sched = StepSchedule(10, 4, 1)
        assert [sched.deadline(s) for s in range(1, 6)] == [10, 15, 20, 22, 24]
        assert sched.boundary(3, 5) == 27

    def test_instant_network(self):
        sched = StepSchedule(10, 0, 0)
        assert {sched.deadline(s) for s in range(1, 30)} == {10}

    @pytest.mark.parametrize("w", range(6))
    def test_loop_expansion(self, w):
        sched = StepSchedule(10_000, 4_000, 1_000)
        assert sched.deadline(5 + 3 * w) - sched.deadline(3) == (2 + 3 * w) * 2 * 1_000

    def test_step_kinds(self):
        assert [step_kind(s) for s in range(4, 10)] == [CF0, CF1, CGF] * 2
        with pytest.raises(ValueError):
            step_kind(3)


class TestValueSteps:
    def test_unselected_sends_nothing(self):
        params = SortitionParams(10 ** 6, 1, b"rare")
        st_ = node((val(1),))
        assert emit_step1(st_, ProtocolContext(params, CRYPTO, 1)) is None

    def test_step1_identity(self):
        st_ = node((val(1), None))
        msg = emit_step1(st_, ctx(2))
        assert msg.payload == (val(1), None)
        assert validate_message(msg, PARAMS, CRYPTO, m=2)

    def test_step2_threshold(self):
        st_ = node((val(9),))
        msg = emit_step2(st_, tally(1, [(val(1),)] * 5), ctx(1))
        assert msg.payload == (val(1),)

    def test_step2_below_threshold(self):
        st_ = node((val(9),))
        assert emit_step2(st_, tally(1, [(val(1),)] * 4), ctx(1)).payload == (None,)

    def test_step2_two_strong_values_raises(self):
        t = tally(1, [(val(1),)] * 5)
        t._counts[0][val(2)] = 5  # impossible state, injected
        with pytest.raises(ProtocolViolation):
            emit_step2(node((val(9),)), t, ctx(1))

    @pytest.mark.parametrize("count,expected", [(5, 2), (3, 1), (2, 0)])
    def test_grades(self, count, expected):
        payloads = [(val(1),)] * count + [(None,)] * (7 - count)
        st_ = node((val(9),))
        O, g = grade_and_update(st_, tally(2, payloads), ctx(1))
        assert g == [expected]
        assert O == ((val(1),) if expected else (None,))

    def test_step3_all_confident(self):
        st_ = node((val(1), val(2)))
        st_.g = [2, 2]
        msg = emit_step3(st_, ctx(2))
        assert msg.payload == (0, 0)
        assert msg.theta_digest == theta_digest((val(1), val(2)), CRYPTO)

    def test_step3_none_confident(self):
        st_ = node((val(1), val(2)))
        st_.g = [1, 0]
        msg = emit_step3(st_, ctx(2))
        assert msg.payload == (1, 1) and msg.theta_digest == theta_digest((None, None), CRYPTO)

    def test_step3_mixed(self):
        st_ = node((val(1), val(2), None))
        st_.g = [2, 1, 0]
        msg = emit_step3(st_, ctx(3))
        assert msg.payload == (0, 1, 1)
        assert msg.theta_digest == theta_digest((val(1), None, None), CRYPTO)


def bit_node(m=1):
    st_ = node((val(1),) * m)
    st_.g = [2] * m
    st_.v = [0] * m
    st_.step = 3
    return st_


class TestBitSteps:
    def test_cf0_with_ones(self):
        st_ = bit_node()
        assert emit_cf0(st_, tally(3, [(1,)] * 5), ctx(1), 4).payload == (1,)

    def test_cf0_default(self):
        assert emit_cf0(bit_node(), tally(3, [(1,)] * 4), ctx(1), 4).payload == (0,)

    def test_cf1_default(self):
        assert emit_cf1(bit_node(), tally(4, [(0,)] * 4), ctx(1), 5).payload == (1,)

    def test_cf1_with_zeros(self):
        assert emit_cf1(bit_node(), tally(4, [(0,)] * 5), ctx(1), 5).payload == (0,)

    def test_cgf_single_flipper(self):
        m = 300  # crosses the d=256 block boundary
        t = tally(5, [tuple([0] * m)])
        cred = t.credentials()[0]
        k0 = CRYPTO.hash(CRYPTO.hash(cred.sig).data)
        k1 = CRYPTO.hash(concat(k0.data, 1))
        expected = tuple(k0.bit(c) for c in range(256)) + tuple(k1.bit(c) for c in range(m - 256))
        assert emit_cgf(bit_node(m), t, ctx(m), 6).payload == expected
        assert tuple(coin_bits(cred, m, CRYPTO)) == expected

    def test_cgf_thresholds(self):
        assert emit_cgf(bit_node(), tally(5, [(1,)] * 5), ctx(1), 6).payload == (1,)
        assert emit_cgf(bit_node(), tally(5, [(0,)] * 5), ctx(1), 6).payload == (0,)

    def test_no_credentials_gives_zero_coin(self):
        assert coin_bits(None, 3, CRYPTO) == [0, 0, 0]

    def test_wrong_kind(self):
        with pytest.raises(ValueError):
            emit_cf0(bit_node(), tally(4, [(0,)]), ctx(1), 5)


class TestFinalization:
    def test_step4_check(self):
        st_ = bit_node()
        finalization_check_0(st_, {3: tally(3, [(0,)] * 5)}, 4, ctx(1))
        assert st_.f == [1] and st_.v == [0] and st_.finalized_at == [4]

    def test_below_threshold(self):
        st_ = bit_node()
        finalization_check_0(st_, {3: tally(3, [(0,)] * 4)}, 4, ctx(1))
        finalization_check_1(st_, {4: tally(4, [(1,)] * 4)}, 5, ctx(1))
        assert st_.f == [0]

    def test_freeze(self):
        st_ = bit_node()
        tallies = {3: tally(3, [(1,)] * 7), 4: tally(4, [(1,)] * 5)}
        step_boundary(st_, 4, tallies, ctx(1))
        step_boundary(st_, 5, tallies, ctx(1))
        assert st_.f == [1] and st_.v == [1]
        tallies[5] = tally(5, [(0,)] * 7)
        tallies[6] = tally(6, [(0,)] * 7)
        tallies[7] = tally(7, [(0,)] * 7)
        for s in (6, 7, 8):
            msg = step_boundary(st_, s, tallies, ctx(1))
            assert msg.payload == (1,)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.lists(st.integers(0, 1), min_size=7, max_size=7), min_size=6, max_size=6))
    def test_finalized_never_changes(self, rows):
        m = 1
        st_ = bit_node(m)
        tallies = {3 + k: tally(3 + k, [(b,) for b in row]) for k, row in enumerate(rows)}
        frozen = {}
        for s in range(4, 9):
            step_boundary(st_, s, tallies, ctx(m))
            for c in range(m):
                if c in frozen:
                    assert st_.f[c] == 1 and st_.v[c] == frozen[c]
                elif st_.f[c]:
                    frozen[c] = st_.v[c]


def signed_tally(step, theta, signers, bits=None):
    bits = bits or tuple(0 if v is not None else 1 for v in theta)
    t = Tally(step)
    for i in signers:
        cred = make_credential(KEYS[i], PARAMS, step, CRYPTO)
        t.add(build_message(KEYS[i], cred, bits, CRYPTO, theta))
    return t


class TestEnding:
    def setup_method(self):
        self.theta = (val(5), None)
        self.tallies = {
            2: tally(2, [(val(5), None)] * 7),
            3: signed_tally(3, self.theta, range(5)),
            4: signed_tally(4, self.theta, range(5)),
        }

    def fresh(self):
        st_ = node((val(5), val(6)), i=6)
        st_.g = [2, 0]
        return st_

    def test_certificate_built(self):
        st_ = self.fresh()
        cert = check_ending(st_, self.tallies, ctx(2), time=99)
        assert cert.step == 4 and cert.theta == self.theta
        assert st_.halted and st_.output == self.theta and st_.halt_time == 99
        assert verify_certificate(cert, PARAMS, CRYPTO)

    def test_one_short(self):
        self.tallies[4] = signed_tally(4, self.theta, range(4))
        assert check_ending(self.fresh(), self.tallies, ctx(2)) is None

    def test_split_theta(self):
        other = (None, None)
        t3 = signed_tally(3, self.theta, range(3))
        for i in range(3, 7):
            cred = make_credential(KEYS[i], PARAMS, 3, CRYPTO)
            t3.add(build_message(KEYS[i], cred, (1, 1), CRYPTO, other))
        self.tallies[3] = t3
        assert check_ending(self.fresh(), self.tallies, ctx(2)) is None

    def test_flipped_theta_rejected(self):
        cert = check_ending(self.fresh(), self.tallies, ctx(2))
        bad = Certificate((val(6), None), cert.step, cert.prev_step_sigs, cert.this_step_sigs)
        assert not verify_certificate(bad, PARAMS, CRYPTO)

    def test_duplicate_signer_rejected(self):
        self.tallies[4] = signed_tally(4, self.theta, range(5))
        cert = check_ending(self.fresh(), self.tallies, ctx(2))
        padded = Certificate(cert.theta, cert.step, cert.prev_step_sigs, cert.this_step_sigs[:4] + cert.this_step_sigs[:1])
        assert not verify_certificate(padded, PARAMS, CRYPTO)

    def test_wrong_step_rejected(self):
        cert = check_ending(self.fresh(), self.tallies, ctx(2))
        assert not verify_certificate(Certificate(cert.theta, 5, cert.prev_step_sigs, cert.this_step_sigs), PARAMS, CRYPTO)

    def test_receive(self):
        cert = check_ending(self.fresh(), self.tallies, ctx(2))
        other = self.fresh()
        assert on_certificate_received(other, cert, ctx(2), time=5)
        assert other.halted and other.output == self.theta
        before = snapshot(other)
        assert not on_certificate_received(other, cert, ctx(2), time=6)
        assert snapshot(other) == before

    def test_receive_invalid(self):
        cert = check_ending(self.fresh(), self.tallies, ctx(2))
        bad = Certificate(cert.theta, cert.step, cert.prev_step_sigs[:4], cert.this_step_sigs)
        other = self.fresh()
        before = snapshot(other)
        assert not on_certificate_received(other, bad, ctx(2))
        assert snapshot(other) == before and not other.halted

    def test_halted_node_is_silent(self):
        st_ = self.fresh()
        check_ending(st_, self.tallies, ctx(2))
        assert step_boundary(st_, 5, self.tallies, ctx(2)) is None
        assert st_.certificate is not None


class TestSnapshot:
    def test_deterministic_and_sensitive(self):
        a, b = node((val(1),)), node((val(1),))
        assert snapshot(a) == snapshot(b)
        b.g = [1]
        assert snapshot(a) != snapshot(b)
        c = copy.deepcopy(a)
        c.v = [val(2)]
        assert snapshot(a) != snapshot(c)
