"""The per-user Cob state machine.

Every function here is deterministic in its inputs. The driving loop (the
simulator or a trace replay) decides *when* they run: ``step_boundary`` at each
local step end beta_i^(s), ``check_ending`` after arrivals, and
``on_certificate_received`` when a certificate shows up.

Components are indexed from 0. Tallies passed in only need the read interface
shared by :class:`cob.protocol_types.Tally` and the simulator's array tallies:
``count``, ``value_counts``, ``bit_counts``, ``min_credential``,
``theta_signers`` and ``theta_digests``.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .protocol_types import (
    BOTTOM,
    Certificate,
    SigEntry,
    StepMessage,
    Tally,
    ValueList,
    VOID_ALL,
    build_message,
    encode_certificate,
    min_credential,
    _encode_values,
    theta_digest,
    theta_list,
    theta_signing_bytes,
)
from .sortition import (
    Credential,
    Crypto,
    KeyPair,
    SortitionParams,
    concat,
    make_credential,
    supermajority,
    verify_credential,
)

CF0 = "coin-fixed-to-0"
CF1 = "coin-fixed-to-1"
CGF = "coin-genuinely-flipped"

DEGRADE = "degrade"
PICK_FIRST = "pick_first"

# Search budget when rebuilding Theta from a theta digest.
MAX_THETA_CANDIDATES = 1 << 16


class ProtocolViolation(RuntimeError):
    """An event the protocol proves impossible while the committee assumptions hold."""

    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind


def step_kind(s: int) -> str:
    if s < 4:
        raise ValueError(f"step {s} is not a binary-phase step")
    return (CF0, CF1, CGF)[(s - 1) % 3]


def is_cf0(s: int) -> bool:
    return s >= 4 and (s - 1) % 3 == 0


def is_cf1(s: int) -> bool:
    return s >= 5 and (s - 1) % 3 == 1


def is_cgf(s: int) -> bool:
    return s >= 6 and (s - 1) % 3 == 2


@dataclass(frozen=True)
class StepSchedule:
    """Omega, Lambda and lambda in integer time units (nanoseconds in the simulator)."""

    Omega: int
    Lambda: int
    lam: int

    def __post_init__(self):
        if min(self.Omega, self.Lambda, self.lam) < 0:
            raise ValueError("durations must be non-negative")

    def deadline(self, s: int) -> int:
        if s < 1:
            raise ValueError("steps start at 1")
        if s == 1:
            return self.Omega
        if s == 2:
            return self.Omega + self.Lambda + self.lam
        return self.Omega + 2 * self.Lambda + 2 * self.lam + 2 * self.lam * (s - 3)

    def boundary(self, alpha: int, s: int) -> int:
        return alpha + self.deadline(s)


def step_deadline(sched: StepSchedule, s: int) -> int:
    return sched.deadline(s)


@dataclass(frozen=True)
class ProtocolContext:
    """Everything a node needs besides its own state."""

    sortition: SortitionParams
    crypto: Crypto
    m: int
    grade_policy: str = DEGRADE
    equivocation_policy: str = VOID_ALL

    @property
    def t_H(self) -> int:
        return supermajority(self.sortition.n)


@dataclass
class NodeState:
    index: int
    keys: KeyPair = field(repr=False)
    alpha: int
    O: ValueList
    g: List[int] = field(default_factory=list)
    f: List[int] = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    halted: bool = False
    halt_time: Optional[int] = None
    certificate: Optional[Certificate] = None
    output: Optional[ValueList] = None
    finalized_at: List[Optional[int]] = field(default_factory=list)
    last_emitted: int = 0
    inboxes: Dict[int, Tally] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        m = len(self.O)
        if not self.g:
            self.g = [0] * m
        if not self.f:
            self.f = [0] * m
        if not self.finalized_at:
            self.finalized_at = [None] * m
        if not self.v:
            self.v = list(self.O)

    @property
    def id(self) -> bytes:
        return self.keys.pk


# --- emissions -------------------------------------------------------------


def _credential(state: NodeState, ctx: ProtocolContext, s: int) -> Optional[Credential]:
    return make_credential(state.keys, ctx.sortition, s, ctx.crypto)


def _sent(state: NodeState, msg: StepMessage) -> StepMessage:
    state.last_emitted = msg.step
    return msg


def emit_step1(state: NodeState, ctx: ProtocolContext) -> Optional[StepMessage]:
    state.step = 1
    state.v = list(state.O)
    cred = _credential(state, ctx, 1)
    if cred is None:
        return None
    return _sent(state, build_message(state.keys, cred, tuple(state.v), ctx.crypto))


def _strong_value(tally, c: int, t_H: int, step: int):
    winners = [x for x, k in tally.value_counts(c).items() if x is not BOTTOM and k >= t_H]
    if len(winners) > 1:
        raise ProtocolViolation("conflicting-threshold", f"step {step} component {c}: {len(winners)} values reach t_H")
    return winners[0] if winners else BOTTOM


def emit_step2(state: NodeState, tally1, ctx: ProtocolContext) -> Optional[StepMessage]:
    state.step = 2
    cred = _credential(state, ctx, 2)
    if cred is None:
        return None
    state.v = [_strong_value(tally1, c, ctx.t_H, 1) for c in range(ctx.m)]
    return _sent(state, build_message(state.keys, cred, tuple(state.v), ctx.crypto))


def grade_and_update(state: NodeState, tally2, ctx: ProtocolContext) -> Tuple[ValueList, List[int]]:
    """Grade 2 at >= t_H supporters, grade 1 when 2*count >= t_H, else (bottom, 0)."""
    t_H = ctx.t_H
    O, g = list(state.O), list(state.g)
    for c in range(ctx.m):
        strong = _strong_value(tally2, c, t_H, 2)
        if strong is not BOTTOM:
            O[c], g[c] = strong, 2
            continue
        counts = {x: k for x, k in tally2.value_counts(c).items() if x is not BOTTOM and 2 * k >= t_H}
        if len(counts) == 1:
            O[c], g[c] = next(iter(counts)), 1
        elif len(counts) > 1 and ctx.grade_policy == PICK_FIRST:
            O[c] = min(counts, key=lambda x: (-counts[x], x))
            g[c] = 1
        else:
            O[c], g[c] = BOTTOM, 0
    state.O, state.g = tuple(O), g
    return state.O, state.g


def emit_step3(state: NodeState, ctx: ProtocolContext) -> Optional[StepMessage]:
    state.step = 3
    state.v = [0 if grade == 2 else 1 for grade in state.g]
    cred = _credential(state, ctx, 3)
    if cred is None:
        return None
    return _bit_message(state, cred, ctx)


def _bit_message(state: NodeState, cred: Credential, ctx: ProtocolContext) -> StepMessage:
    bits = tuple(state.v)
    return _sent(state, build_message(state.keys, cred, bits, ctx.crypto, theta_list(bits, state.O)))


def _finalize(state: NodeState, c: int, bit: int, s: int):
    state.v[c] = bit
    state.f[c] = 1
    state.finalized_at[c] = s


def finalization_check_0(state: NodeState, tallies: Mapping, s: int, ctx: ProtocolContext):
    """Fix bit 0 for c when some step s'-1 (s' <= s a Coin-Fixed-To-0 step) shows t_H zeros."""
    for sp in range(4, s + 1, 3):
        if all(state.f):
            break
        tally = tallies.get(sp - 1)
        if tally is None:
            continue
        zeros, _ = tally.bit_counts(ctx.m)
        for c in range(ctx.m):
            if not state.f[c] and zeros[c] >= ctx.t_H:
                _finalize(state, c, 0, s)
    return state.v, state.f


def finalization_check_1(state: NodeState, tallies: Mapping, s: int, ctx: ProtocolContext):
    """Fix bit 1 for c when some step s'-1 (s' <= s a Coin-Fixed-To-1 step) shows t_H ones."""
    for sp in range(5, s + 1, 3):
        if all(state.f):
            break
        tally = tallies.get(sp - 1)
        if tally is None:
            continue
        _, ones = tally.bit_counts(ctx.m)
        for c in range(ctx.m):
            if not state.f[c] and ones[c] >= ctx.t_H:
                _finalize(state, c, 1, s)
    return state.v, state.f


def coin_bits(cred: Optional[Credential], m: int, crypto: Crypto) -> List[int]:
    """Per-component coin k_c from k = H(H(sigma_min)), extended by H(k || j) past d bits."""
    if cred is None:
        return [0] * m
    k0 = crypto.hash(crypto.hash(cred.sig).data)
    d = k0.bits
    blocks = {0: k0}
    out = []
    for c in range(m):
        j = c // d
        if j not in blocks:
            blocks[j] = crypto.hash(concat(k0.data, j))
        out.append(blocks[j].bit(c % d))
    return out


def _check_kind(s: int, expected: str):
    if step_kind(s) != expected:
        raise ValueError(f"step {s} is a {step_kind(s)} step, not {expected}")


def _bit_step(state: NodeState, tally_prev, ctx: ProtocolContext, s: int, rule) -> Optional[StepMessage]:
    cred = _credential(state, ctx, s)
    if cred is None:
        return None
    zeros, ones = tally_prev.bit_counts(ctx.m)
    open_components = [c for c in range(ctx.m) if not state.f[c]]
    coin = None
    for c in open_components:
        bit = rule(zeros[c], ones[c])
        if bit is None:
            if coin is None:
                coin = coin_bits(tally_prev.min_credential(ctx.crypto), ctx.m, ctx.crypto)
            bit = coin[c]
        state.v[c] = bit
    return _bit_message(state, cred, ctx)


def emit_cf0(state: NodeState, tally_prev, ctx: ProtocolContext, s: int) -> Optional[StepMessage]:
    _check_kind(s, CF0)
    t_H = ctx.t_H
    return _bit_step(state, tally_prev, ctx, s, lambda z, o: 1 if o >= t_H else 0)


def emit_cf1(state: NodeState, tally_prev, ctx: ProtocolContext, s: int) -> Optional[StepMessage]:
    _check_kind(s, CF1)
    t_H = ctx.t_H
    return _bit_step(state, tally_prev, ctx, s, lambda z, o: 0 if z >= t_H else 1)


def emit_cgf(state: NodeState, tally_prev, ctx: ProtocolContext, s: int) -> Optional[StepMessage]:
    _check_kind(s, CGF)
    t_H = ctx.t_H

    def rule(z, o):
        if z >= t_H:
            return 0
        if o >= t_H:
            return 1
        return None

    return _bit_step(state, tally_prev, ctx, s, rule)


_EMITTERS = {CF0: emit_cf0, CF1: emit_cf1, CGF: emit_cgf}


def step_boundary(state: NodeState, s: int, tallies: Mapping, ctx: ProtocolContext) -> Optional[StepMessage]:
    """Everything a non-halted user does at beta_i^(s), ending condition excluded.

    Returns the message to broadcast, or None for non-players.
    """
    if state.halted:
        return None
    if s == 1:
        return emit_step1(state, ctx)
    if s == 2:
        return emit_step2(state, tallies[1], ctx)
    if s == 3:
        grade_and_update(state, tallies[2], ctx)
        return emit_step3(state, ctx)
    state.step = s
    finalization_check_0(state, tallies, s, ctx)
    finalization_check_1(state, tallies, s, ctx)
    return _EMITTERS[step_kind(s)](state, tallies[s - 1], ctx, s)


# --- ending condition and certificates -------------------------------------------


def _theta_candidates(state: NodeState, patterns: Sequence[Tuple[int, ...]], tally2, m: int):
    for bits in patterns:
        options = []
        for c in range(m):
            if bits[c]:
                options.append([BOTTOM])
                continue
            seen = []
            if state.O[c] is not BOTTOM:
                seen.append(state.O[c])
            if tally2 is not None:
                counts = tally2.value_counts(c)
                for x in sorted((x for x in counts if x is not BOTTOM), key=lambda x: (-counts[x], x)):
                    if x not in seen:
                        seen.append(x)
            seen.append(BOTTOM)
            options.append(seen)
        yield from itertools.islice(itertools.product(*options), MAX_THETA_CANDIDATES)


def reconstruct_theta(state: NodeState, digest: bytes, signers: Mapping[bytes, StepMessage], tally2, ctx: ProtocolContext) -> ValueList:
    """Find Theta with H(Theta) = digest from the node's saved values and stored step-2 payloads."""
    freq: Dict[Tuple[int, ...], int] = {}
    for msg in signers.values():
        freq[msg.payload] = freq.get(msg.payload, 0) + 1
    patterns = sorted(freq, key=lambda b: (-freq[b], b))
    for cand in _theta_candidates(state, patterns, tally2, ctx.m):
        if theta_digest(cand, ctx.crypto) == digest:
            return tuple(cand)
    raise ProtocolViolation("theta-reconstruction", "no stored step-2 values hash to the certified digest")


def ending_pairs(tallies: Mapping, t_H: int):
    """(s', theta digest) pairs with >= t_H signers at both s'-1 and s', smallest first."""
    found = []
    for sp in sorted(tallies):
        if not is_cf0(sp) or (sp - 1) not in tallies:
            continue
        this, prev = tallies[sp], tallies[sp - 1]
        for digest in sorted(this.theta_digests()):
            if len(this.theta_signers(digest)) >= t_H and len(prev.theta_signers(digest)) >= t_H:
                found.append((sp, digest))
    return found


def build_certificate(theta: ValueList, sp: int, prev_signers: Mapping[bytes, StepMessage], this_signers: Mapping[bytes, StepMessage]) -> Certificate:
    prev = [SigEntry(msg.credential, msg.theta_sig) for msg in prev_signers.values()]
    this = [SigEntry(msg.credential, msg.theta_sig) for msg in this_signers.values()]
    return Certificate.assemble(theta, sp, prev, this)


def check_ending(state: NodeState, tallies: Mapping, ctx: ProtocolContext, time: Optional[int] = None) -> Optional[Certificate]:
    """Build a certificate if the ending condition holds; the node then halts."""
    if state.halted:
        return None
    pairs = ending_pairs(tallies, ctx.t_H)
    if not pairs:
        return None
    sp, digest = pairs[0]
    this, prev = tallies[sp].theta_signers(digest), tallies[sp - 1].theta_signers(digest)
    theta = reconstruct_theta(state, digest, this, tallies.get(2), ctx)
    cert = build_certificate(theta, sp, prev, this)
    halt(state, cert, time)
    return cert


def halt(state: NodeState, cert: Certificate, time: Optional[int]):
    state.halted = True
    state.certificate = cert
    state.output = cert.theta
    state.halt_time = time


def verify_certificate(cert: Certificate, params: SortitionParams, crypto: Crypto) -> bool:
    """Pure check of a certificate against public parameters."""
    try:
        sp = cert.step
        if not isinstance(sp, int) or not (sp >= 4 and (sp - 1) % 3 == 0):
            return False
        if any(v is not BOTTOM and (not isinstance(v, bytes) or len(v) != 32) for v in cert.theta):
            return False
        digest = theta_digest(cert.theta, crypto)
        t_H = supermajority(params.n)
        for step, entries in ((sp - 1, cert.prev_step_sigs), (sp, cert.this_step_sigs)):
            players = [e.credential.player for e in entries]
            if len(set(players)) != len(players) or len(players) < t_H:
                return False
            signed = theta_signing_bytes(step, digest)
            for e in entries:
                if e.credential.step != step or not verify_credential(e.credential, params, crypto):
                    return False
                if not crypto.scheme.verify(e.credential.player, e.theta_sig, signed):
                    return False
        return True
    except (AttributeError, TypeError, ValueError):
        return False


def on_certificate_received(state: NodeState, cert: Certificate, ctx: ProtocolContext, time: Optional[int] = None) -> bool:
    """Adopt a valid certificate and halt; returns True when the node halted now."""
    if state.halted or not verify_certificate(cert, ctx.sortition, ctx.crypto):
        return False
    halt(state, cert, time)
    return True


def snapshot(state: NodeState) -> bytes:
    """Canonical bytes of the externally relevant state."""
    out = bytearray(struct.pack(">IqI", state.index, state.alpha, state.step))
    out += _encode_values(state.O)
    out += bytes(state.g) + bytes(state.f)
    if state.step >= 3:
        out += b"\x01" + bytes(state.v)
    else:
        out += b"\x00" + _encode_values(state.v)
    out += bytes(0 if x is None else 1 for x in state.finalized_at)
    out += b"".join(struct.pack(">I", x or 0) for x in state.finalized_at)
    out += struct.pack(">?qI", state.halted, -1 if state.halt_time is None else state.halt_time, state.last_emitted)
    if state.output is None:
        out += b"\x00"
    else:
        out += b"\x01" + _encode_values(state.output)
    if state.certificate is None:
        out += b"\x00"
    else:
        enc = encode_certificate(state.certificate)
        out += b"\x01" + struct.pack(">I", len(enc)) + enc
    return bytes(out)
