"""Step messages, tallies, certificates, the byte-cost model and the canonical encoding.

Encoding layout (all integers big-endian):

* ``u8``/``u32``/``u64`` fixed-width unsigned integers;
* ``bytes`` = u32 length followed by the raw bytes;
* ``opt(x)`` = u8 flag (0 absent, 1 present) followed by ``x`` when present.

StepMessage::

    b"CobM" u8(version=1) u32(step) credential payload bytes(payload_sig)
    opt(bytes(theta_digest) bytes(theta_sig))

credential = bytes(player) u32(step) bytes(sig) bytes(lottery numerator)
bytes(lottery denominator) opt(u32(counter)).

payload = u8(kind) u32(m) followed, for values (kind 0), by ``opt(bytes(v))``
per component and, for bits (kind 1), by ``ceil(m/8)`` bytes with component
``c`` at bit ``c % 8`` of byte ``c // 8`` (unused high bits must be zero).

Certificate::

    b"CobC" u8(version=1) u32(step) values(theta) u32(k) entry*k u32(k') entry*k'

entry = credential bytes(theta_sig). Entries are sorted by player key so that
logically equal certificates encode identically.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from .sortition import Credential, Crypto, KeyPair, SortitionParams, concat, verify_credential

Value = Optional[bytes]
ValueList = Tuple[Value, ...]
BitList = Tuple[int, ...]
Payload = Union[ValueList, BitList]

BOTTOM: Value = None
VALUE_BYTES = 32

VOID_ALL = "void"
KEEP_FIRST = "keep_first"


class DecodeError(ValueError):
    """Raised on truncated, garbled or non-canonical input."""


def is_value_step(step: int) -> bool:
    return step <= 2


def theta_list(bits: Sequence[int], values: Sequence[Value]) -> ValueList:
    """Theta_c is bottom where the bit is 1 and the saved value where it is 0."""
    if len(bits) != len(values):
        raise ValueError("bits and values differ in length")
    return tuple(BOTTOM if b else v for b, v in zip(bits, values))


def _encode_values(values: Sequence[Value]) -> bytes:
    out = bytearray(struct.pack(">BI", 0, len(values)))
    for v in values:
        if v is None:
            out += b"\x00"
        else:
            out += b"\x01" + struct.pack(">I", len(v)) + v
    return bytes(out)


def _encode_bits(bits: Sequence[int]) -> bytes:
    packed = bytearray((len(bits) + 7) // 8)
    for c, b in enumerate(bits):
        if b:
            packed[c // 8] |= 1 << (c % 8)
    return struct.pack(">BI", 1, len(bits)) + bytes(packed)


def encode_payload(step: int, payload: Payload) -> bytes:
    return _encode_values(payload) if is_value_step(step) else _encode_bits(payload)


def theta_digest(theta: Sequence[Value], crypto: Crypto) -> bytes:
    return crypto.hash(concat(b"theta", _encode_values(theta))).data


def payload_signing_bytes(step: int, payload: Payload) -> bytes:
    return concat(step, b"payload", encode_payload(step, payload))


def theta_signing_bytes(step: int, digest: bytes) -> bytes:
    return concat(step, b"theta", digest)


@dataclass(frozen=True)
class StepMessage:
    step: int
    credential: Credential
    payload: Payload
    payload_sig: bytes
    theta_digest: Optional[bytes] = None
    theta_sig: Optional[bytes] = None

    @property
    def sender(self) -> bytes:
        return self.credential.player

    @property
    def m(self) -> int:
        return len(self.payload)


def build_message(
    keys: KeyPair,
    credential: Credential,
    payload: Payload,
    crypto: Crypto,
    theta: Optional[Sequence[Value]] = None,
) -> StepMessage:
    """Sign ``payload`` (and, from step 3 on, H(theta)) with the credential's step."""
    step = credential.step
    payload = tuple(payload)
    sig = crypto.scheme.sign(keys.sk, payload_signing_bytes(step, payload))
    if is_value_step(step):
        return StepMessage(step, credential, payload, sig)
    if theta is None:
        raise ValueError("messages from step 3 on carry a theta signature")
    digest = theta_digest(theta, crypto)
    return StepMessage(step, credential, payload, sig, digest, crypto.scheme.sign(keys.sk, theta_signing_bytes(step, digest)))


@dataclass(frozen=True)
class Validity:
    ok: bool
    reason: Optional[str] = None

    def __bool__(self) -> bool:
        return self.ok


VALID = Validity(True)
MALFORMED = "malformed payload"
STEP_MISMATCH = "step mismatch"
BAD_CREDENTIAL = "bad credential"
BAD_SIGNATURE = "bad signature"


def _well_formed(msg: StepMessage, m: Optional[int]) -> bool:
    if not isinstance(msg.payload, tuple) or (m is not None and len(msg.payload) != m):
        return False
    if is_value_step(msg.step):
        if msg.theta_digest is not None or msg.theta_sig is not None:
            return False
        return all(v is None or (isinstance(v, bytes) and len(v) == VALUE_BYTES) for v in msg.payload)
    if msg.theta_digest is None or msg.theta_sig is None:
        return False
    return all(type(b) is int and b in (0, 1) for b in msg.payload)


def validate_message(msg: StepMessage, params: SortitionParams, crypto: Crypto, m: Optional[int] = None) -> Validity:
    """First failing check among: payload shape, step binding, credential, signatures."""
    if not isinstance(msg.step, int) or msg.step < 1 or not _well_formed(msg, m):
        return Validity(False, MALFORMED)
    if msg.credential.step != msg.step:
        return Validity(False, STEP_MISMATCH)
    if not verify_credential(msg.credential, params, crypto):
        return Validity(False, BAD_CREDENTIAL)
    pk = msg.sender
    if not crypto.scheme.verify(pk, msg.payload_sig, payload_signing_bytes(msg.step, msg.payload)):
        return Validity(False, BAD_SIGNATURE)
    if msg.theta_digest is not None and not crypto.scheme.verify(
        pk, msg.theta_sig, theta_signing_bytes(msg.step, msg.theta_digest)
    ):
        return Validity(False, BAD_SIGNATURE)
    return VALID


# --- tallies ---------------------------------------------------------------


def min_credential(credentials: Iterable[Credential], crypto: Crypto) -> Optional[Credential]:
    """Credential with the smallest H(sigma) read big-endian; ties go to the smaller pk."""
    best, best_key = None, None
    for cred in credentials:
        key = (crypto.hash(cred.sig).value, cred.player)
        if best_key is None or key < best_key:
            best, best_key = cred, key
    return best


class Tally:
    """Per-step received-message counts #(v, c), one vote per distinct valid sender.

    A sender who sends two different valid messages for the step is an
    equivocator. Under the default ``void`` policy all of its contributions are
    removed; under ``keep_first`` its first message keeps counting.
    """

    def __init__(self, step: int, policy: str = VOID_ALL):
        if policy not in (VOID_ALL, KEEP_FIRST):
            raise ValueError(f"unknown equivocation policy {policy!r}")
        self.step = step
        self.policy = policy
        self.senders_seen: set = set()
        self.equivocators: set = set()
        self._messages: Dict[bytes, List[StepMessage]] = {}
        self._counts: List[Counter] = []
        self._theta: Dict[bytes, Dict[bytes, StepMessage]] = {}

    def _apply(self, msg: StepMessage, sign: int):
        if not self._counts:
            self._counts = [Counter() for _ in msg.payload]
        for c, v in enumerate(msg.payload):
            self._counts[c][v] += sign
            if self._counts[c][v] == 0:
                del self._counts[c][v]

    def add(self, msg: StepMessage) -> bool:
        """Register a valid message; returns True when any count or set changed."""
        if msg.step != self.step:
            raise ValueError(f"message for step {msg.step} added to tally of step {self.step}")
        if self._counts and len(msg.payload) != len(self._counts):
            raise ValueError("payload length differs from earlier messages")
        pk = msg.sender
        seen = self._messages.setdefault(pk, [])
        if msg in seen:
            return False
        seen.append(msg)
        self.senders_seen.add(pk)
        if msg.theta_digest is not None:
            self._theta.setdefault(msg.theta_digest, {}).setdefault(pk, msg)
        if len(seen) == 1:
            self._apply(msg, +1)
        elif pk not in self.equivocators:
            self.equivocators.add(pk)
            if self.policy == VOID_ALL:
                self._apply(seen[0], -1)
        return True

    def contributing(self) -> Dict[bytes, StepMessage]:
        """The message counted for each sender."""
        out = {}
        for pk, msgs in self._messages.items():
            if pk in self.equivocators and self.policy == VOID_ALL:
                continue
            out[pk] = msgs[0]
        return out

    def messages(self) -> Iterable[StepMessage]:
        for msgs in self._messages.values():
            yield from msgs

    def count(self, value, c: int) -> int:
        if not self._counts:
            return 0
        return self._counts[c].get(value, 0)

    def value_counts(self, c: int) -> Dict:
        if not self._counts:
            return {}
        return dict(self._counts[c])

    def bit_counts(self, m: int) -> Tuple[List[int], List[int]]:
        zeros = [self.count(0, c) for c in range(m)]
        ones = [self.count(1, c) for c in range(m)]
        return zeros, ones

    def credentials(self) -> List[Credential]:
        """Credentials of every sender that delivered a valid message."""
        return [msgs[0].credential for msgs in self._messages.values()]

    def min_credential(self, crypto: Crypto) -> Optional[Credential]:
        return min_credential(self.credentials(), crypto)

    def theta_signers(self, digest: bytes) -> Dict[bytes, StepMessage]:
        return self._theta.get(digest, {})

    def theta_digests(self) -> List[bytes]:
        return list(self._theta)


def tally_add(t: Tally, msg: StepMessage) -> Tally:
    t.add(msg)
    return t


# --- certificates --------------------------------------------------------------


@dataclass(frozen=True)
class SigEntry:
    credential: Credential
    theta_sig: bytes

    @property
    def player(self) -> bytes:
        return self.credential.player


@dataclass(frozen=True)
class Certificate:
    theta: ValueList
    step: int
    prev_step_sigs: Tuple[SigEntry, ...]
    this_step_sigs: Tuple[SigEntry, ...]

    @classmethod
    def assemble(cls, theta, step, prev: Iterable[SigEntry], this: Iterable[SigEntry]) -> "Certificate":
        order = lambda e: e.player
        return cls(tuple(theta), step, tuple(sorted(prev, key=order)), tuple(sorted(this, key=order)))


# --- cost model --------------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    credential_plus_sig_bytes: int = 100
    digest_bytes: int = 32
    base_bit_message_bytes: int = 200

    def bit_payload_bytes(self, m: int) -> Fraction:
        return Fraction(m, 8)

    def step_cost(self, step: int, m: int) -> Fraction:
        if is_value_step(step):
            return Fraction(self.digest_bytes * m + self.credential_plus_sig_bytes)
        return self.bit_payload_bytes(m) + self.base_bit_message_bytes


COSTS = CostModel()


def message_cost(msg: StepMessage, model: CostModel = COSTS) -> Fraction:
    return model.step_cost(msg.step, len(msg.payload))


# --- canonical encoding --------------------------------------------------------

_MSG_MAGIC = b"CobM"
_CERT_MAGIC = b"CobC"
_VERSION = 1


def _b(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _int_bytes(x: int) -> bytes:
    return x.to_bytes((x.bit_length() + 7) // 8 or 1, "big")


def _encode_credential(cred: Credential) -> bytes:
    out = _b(cred.player) + struct.pack(">I", cred.step) + _b(cred.sig)
    out += _b(_int_bytes(cred.lottery.numerator)) + _b(_int_bytes(cred.lottery.denominator))
    if cred.counter is None:
        out += b"\x00"
    else:
        out += b"\x01" + struct.pack(">I", cred.counter)
    return out


def encode_message(msg: StepMessage) -> bytes:
    out = bytearray(_MSG_MAGIC + struct.pack(">BI", _VERSION, msg.step))
    out += _encode_credential(msg.credential)
    out += encode_payload(msg.step, msg.payload)
    out += _b(msg.payload_sig)
    if msg.theta_digest is None:
        out += b"\x00"
    else:
        out += b"\x01" + _b(msg.theta_digest) + _b(msg.theta_sig)
    return bytes(out)


def encode_certificate(cert: Certificate) -> bytes:
    out = bytearray(_CERT_MAGIC + struct.pack(">BI", _VERSION, cert.step))
    out += _encode_values(cert.theta)
    for entries in (cert.prev_step_sigs, cert.this_step_sigs):
        out += struct.pack(">I", len(entries))
        for e in entries:
            out += _encode_credential(e.credential) + _b(e.theta_sig)
    return bytes(out)


def encode(obj: Union[StepMessage, Certificate]) -> bytes:
    if isinstance(obj, StepMessage):
        return encode_message(obj)
    if isinstance(obj, Certificate):
        return encode_certificate(obj)
    raise TypeError(f"cannot encode {type(obj).__name__}")


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0

    def take(self, k: int) -> bytes:
        if k < 0 or self.pos + k > len(self.data):
            raise DecodeError("truncated input")
        out = bytes(self.data[self.pos:self.pos + k])
        self.pos += k
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def flag(self) -> bool:
        f = self.u8()
        if f not in (0, 1):
            raise DecodeError("invalid presence flag")
        return bool(f)

    def canonical_int(self) -> int:
        raw = self.blob()
        if not raw or (len(raw) > 1 and raw[0] == 0):
            raise DecodeError("non-canonical integer")
        return int.from_bytes(raw, "big")

    def done(self):
        if self.pos != len(self.data):
            raise DecodeError("trailing bytes")


def _read_credential(r: _Reader) -> Credential:
    player = r.blob()
    step = r.u32()
    sig = r.blob()
    num, den = r.canonical_int(), r.canonical_int()
    if den == 0:
        raise DecodeError("zero denominator")
    lottery = Fraction(num, den)
    if (lottery.numerator, lottery.denominator) != (num, den):
        raise DecodeError("lottery not in lowest terms")
    counter = r.u32() if r.flag() else None
    return Credential(player, step, sig, lottery, counter)


def _read_payload(r: _Reader, step: int) -> Payload:
    kind, m = r.u8(), r.u32()
    if kind != (0 if is_value_step(step) else 1):
        raise DecodeError("payload kind does not match step")
    if kind == 0:
        return tuple(r.blob() if r.flag() else None for _ in range(m))
    packed = r.take((m + 7) // 8)
    bits = tuple((packed[c // 8] >> (c % 8)) & 1 for c in range(m))
    if _encode_bits(bits)[5:] != packed:
        raise DecodeError("non-zero padding bits")
    return bits


def _read_values(r: _Reader) -> ValueList:
    kind, m = r.u8(), r.u32()
    if kind != 0:
        raise DecodeError("expected a value list")
    return tuple(r.blob() if r.flag() else None for _ in range(m))


def decode_message(data: bytes) -> StepMessage:
    r = _Reader(data)
    if r.take(4) != _MSG_MAGIC or r.u8() != _VERSION:
        raise DecodeError("not a step message")
    step = r.u32()
    cred = _read_credential(r)
    payload = _read_payload(r, step)
    psig = r.blob()
    digest = tsig = None
    if r.flag():
        digest, tsig = r.blob(), r.blob()
    r.done()
    msg = StepMessage(step, cred, payload, psig, digest, tsig)
    if encode_message(msg) != bytes(data):
        raise DecodeError("non-canonical message encoding")
    return msg


def decode_certificate(data: bytes) -> Certificate:
    r = _Reader(data)
    if r.take(4) != _CERT_MAGIC or r.u8() != _VERSION:
        raise DecodeError("not a certificate")
    step = r.u32()
    theta = _read_values(r)
    sets = []
    for _ in range(2):
        k = r.u32()
        sets.append(tuple(SigEntry(_read_credential(r), r.blob()) for _ in range(k)))
    r.done()
    cert = Certificate(theta, step, sets[0], sets[1])
    if encode_certificate(cert) != bytes(data):
        raise DecodeError("non-canonical certificate encoding")
    return cert


def decode(data: bytes) -> Union[StepMessage, Certificate]:
    head = bytes(data[:4])
    if head == _MSG_MAGIC:
        return decode_message(data)
    if head == _CERT_MAGIC:
        return decode_certificate(data)
    raise DecodeError("unknown record type")
