"""Hashing, unique signatures, the step-player lottery and the committee-size checker."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, Mapping, Optional, Protocol, Tuple, Union

import numpy as np

DEFAULT_BITS = 256

Rational = Union[int, float, str, Fraction]


class InvalidParameter(ValueError):
    """Raised when a parameter violates a protocol premise."""


class NoFeasibleCommittee(ValueError):
    """Raised when no committee size up to N satisfies the assumptions."""


def as_fraction(x: Rational) -> Fraction:
    """Exact rational from an int/str/Fraction; floats go through their shortest repr."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def concat(*parts: Union[bytes, int, str]) -> bytes:
    """Length-prefixed concatenation. Integers are 8-byte big-endian, strings UTF-8."""
    out = bytearray()
    for part in parts:
        if isinstance(part, bool):
            raise TypeError("bool is not a valid concat part")
        if isinstance(part, int):
            if part < 0:
                raise ValueError("negative integers are not encodable")
            part = part.to_bytes(8, "big")
        elif isinstance(part, str):
            part = part.encode()
        out += len(part).to_bytes(4, "big")
        out += part
    return bytes(out)


@dataclass(frozen=True)
class Digest:
    """A d-bit hash output. Bit h_i is bit i of ``value`` (h_0 least significant)."""

    value: int
    bits: int = DEFAULT_BITS

    def __post_init__(self):
        if self.bits <= 0:
            raise ValueError("digest length must be positive")
        if not 0 <= self.value < (1 << self.bits):
            raise ValueError(f"value does not fit in {self.bits} bits")

    @property
    def data(self) -> bytes:
        return self.value.to_bytes((self.bits + 7) // 8, "big")

    def bit(self, i: int) -> int:
        if not 0 <= i < self.bits:
            raise IndexError(i)
        return (self.value >> i) & 1

    @classmethod
    def from_bits(cls, bits: Iterable[int]) -> "Digest":
        """Build from (h_0, h_1, ..., h_{d-1})."""
        bits = list(bits)
        value = sum(int(b) << i for i, b in enumerate(bits))
        return cls(value, len(bits))


class Hasher:
    """Random-oracle stand-in producing fixed-length digests."""

    name = "abstract"

    def __init__(self, bits: int = DEFAULT_BITS):
        if bits <= 0:
            raise ValueError("bits must be positive")
        self.bits = bits
        self._nbytes = (bits + 7) // 8
        self._mask = (1 << bits) - 1

    def _raw(self, data: bytes) -> bytes:
        raise NotImplementedError

    def __call__(self, data: bytes) -> Digest:
        value = int.from_bytes(self._raw(data), "big") & self._mask
        return Digest(value, self.bits)

    def describe(self) -> dict:
        return {"name": self.name, "bits": self.bits}


class Sha256Hasher(Hasher):
    """SHA-256 for d=256; SHAKE-256 output truncated to d bits otherwise."""

    name = "sha256"

    def _raw(self, data: bytes) -> bytes:
        if self.bits == 256:
            return hashlib.sha256(data).digest()
        return hashlib.shake_256(b"cob/shake" + data).digest(self._nbytes)


class SeededHasher(Hasher):
    """Keyed BLAKE2b: a stateless family of independent-looking oracles indexed by seed."""

    name = "seeded"

    def __init__(self, seed: int, bits: int = DEFAULT_BITS):
        super().__init__(bits)
        self.seed = int(seed)
        self._key = hashlib.sha256(b"cob/seed" + self.seed.to_bytes(16, "big", signed=True)).digest()

    def _raw(self, data: bytes) -> bytes:
        if self._nbytes <= 64:
            return hashlib.blake2b(data, key=self._key, digest_size=self._nbytes).digest()
        return hashlib.shake_256(self._key + data).digest(self._nbytes)

    def describe(self) -> dict:
        return {"name": self.name, "bits": self.bits, "seed": self.seed}


def make_hasher(desc: Mapping) -> Hasher:
    if desc["name"] == "sha256":
        return Sha256Hasher(desc.get("bits", DEFAULT_BITS))
    if desc["name"] == "seeded":
        return SeededHasher(desc["seed"], desc.get("bits", DEFAULT_BITS))
    raise ValueError(f"unknown hasher {desc['name']!r}")


DEFAULT_HASHER = Sha256Hasher()


def hash_bytes(data: bytes, hasher: Hasher = DEFAULT_HASHER) -> Digest:
    return hasher(data)


def phi(h: Digest, bits: Optional[int] = None) -> Fraction:
    """Standard decoding (1 + sum h_i 2^i) / 2^d, exact."""
    if bits is not None and h.bits != bits:
        raise ValueError(f"digest has {h.bits} bits, expected {bits}")
    return Fraction(1 + h.value, 1 << h.bits)


def passes(h: Digest, threshold: Fraction) -> bool:
    """phi(h) <= threshold using integer arithmetic only."""
    return (1 + h.value) * threshold.denominator <= threshold.numerator << h.bits


# --- signatures -----------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    sk: bytes = field(repr=False)
    pk: bytes


class SignatureScheme(Protocol):
    def keygen(self, seed: bytes) -> KeyPair: ...

    def sign(self, sk: bytes, message: bytes) -> Optional[bytes]: ...

    def verify(self, pk: bytes, sig: bytes, message: bytes) -> bool: ...


class SimulatedSignatures:
    """Deterministic unique signatures: sig = H(sk || m), checked through a key registry.

    Simulation grade only. The registry maps pk -> sk so that anyone holding
    it can recompute a signature; pk is itself H("pk" || sk).
    """

    name = "simulated"

    def __init__(self, hasher: Hasher = DEFAULT_HASHER):
        self.hasher = hasher
        self._registry: Dict[bytes, bytes] = {}

    def public_key(self, sk: bytes) -> bytes:
        return self.hasher(concat(b"pk", sk)).data

    def keygen(self, seed: bytes) -> KeyPair:
        sk = self.hasher(concat(b"sk", seed)).data
        pair = KeyPair(sk, self.public_key(sk))
        self.register(pair.sk)
        return pair

    def register(self, sk: bytes) -> bytes:
        pk = self.public_key(sk)
        self._registry[pk] = sk
        return pk

    def sign(self, sk: bytes, message: bytes) -> Optional[bytes]:
        return self.hasher(concat(sk, message)).data

    def verify(self, pk: bytes, sig: bytes, message: bytes) -> bool:
        sk = self._registry.get(pk)
        if sk is None or not isinstance(sig, (bytes, bytearray)):
            return False
        return self.hasher(concat(sk, message)).data == bytes(sig)

    def registry_entries(self, pks: Iterable[bytes]) -> Dict[bytes, bytes]:
        return {pk: self._registry[pk] for pk in pks if pk in self._registry}


class UnreliableSignatures(SimulatedSignatures):
    """Signing fails (returns None) with probability ``failure_rate``, deterministically per (sk, m)."""

    def __init__(self, failure_rate: Rational, hasher: Hasher = DEFAULT_HASHER):
        super().__init__(hasher)
        self.failure_rate = as_fraction(failure_rate)

    def sign(self, sk: bytes, message: bytes) -> Optional[bytes]:
        draw = self.hasher(concat(b"fail", sk, message))
        if self.failure_rate and passes(draw, self.failure_rate):
            return None
        return super().sign(sk, message)


@dataclass(frozen=True)
class Crypto:
    """A hasher and a signature scheme used together by one simulation."""

    hasher: Hasher
    scheme: SimulatedSignatures

    @classmethod
    def default(cls) -> "Crypto":
        return cls(DEFAULT_HASHER, SimulatedSignatures(DEFAULT_HASHER))

    @classmethod
    def seeded(cls, seed: int, bits: int = DEFAULT_BITS) -> "Crypto":
        hasher = SeededHasher(seed, bits)
        return cls(hasher, SimulatedSignatures(hasher))

    def hash(self, data: bytes) -> Digest:
        return self.hasher(data)


def gen_keypair(seed: bytes, crypto: Crypto) -> KeyPair:
    return crypto.scheme.keygen(seed)


def sign(sk: bytes, message: bytes, crypto: Crypto) -> Optional[bytes]:
    return crypto.scheme.sign(sk, message)


def verify(pk: bytes, sig: bytes, message: bytes, crypto: Crypto) -> bool:
    return crypto.scheme.verify(pk, sig, message)


# --- sortition --------------------------------------------------------------


@dataclass(frozen=True)
class SortitionParams:
    N: int
    n: int
    r: bytes = b""
    failure_rate: Fraction = Fraction(0)
    weights: Optional[Mapping[bytes, int]] = None

    def __post_init__(self):
        if not 1 <= self.n <= self.N:
            raise InvalidParameter(f"need 1 <= n <= N, got n={self.n}, N={self.N}")
        object.__setattr__(self, "failure_rate", as_fraction(self.failure_rate))
        if not 0 <= self.failure_rate < 1:
            raise InvalidParameter("failure_rate must lie in [0, 1)")

    @property
    def p(self) -> Fraction:
        return Fraction(self.n, self.N)

    @property
    def threshold(self) -> Fraction:
        """n/N, raised to n/(N(1-f)) to offset signing failures; capped at 1."""
        t = self.p / (1 - self.failure_rate)
        return min(t, Fraction(1))

    def weight(self, pk: bytes) -> Optional[int]:
        if self.weights is None:
            return None
        return self.weights.get(pk, 0)


@dataclass(frozen=True)
class Credential:
    player: bytes
    step: int
    sig: bytes
    lottery: Fraction
    counter: Optional[int] = None


def challenge(params: SortitionParams, step: int, counter: Optional[int], crypto: Crypto) -> bytes:
    """H(r || s) or, in the weighted variant, H(r || s || c)."""
    if counter is None:
        return crypto.hash(concat(params.r, step)).data
    return crypto.hash(concat(params.r, step, counter)).data


def credential_hash(cred: Credential, crypto: Crypto) -> Digest:
    """H(sigma): the quantity the lottery decodes and the coin minimises."""
    return crypto.hash(cred.sig)


def make_credential(keys: KeyPair, params: SortitionParams, step: int, crypto: Crypto) -> Optional[Credential]:
    """The step-``step`` credential of ``keys`` if it wins the lottery, else None."""
    if step < 1:
        raise ValueError("steps start at 1")
    threshold = params.threshold
    weight = params.weight(keys.pk)
    counters = [None] if weight is None else range(1, weight + 1)
    for counter in counters:
        sig = crypto.scheme.sign(keys.sk, challenge(params, step, counter, crypto))
        if sig is None:
            continue
        h = crypto.hash(sig)
        if passes(h, threshold):
            return Credential(keys.pk, step, sig, phi(h), counter)
    return None


def verify_credential(cred: Credential, params: SortitionParams, crypto: Crypto) -> bool:
    try:
        if not isinstance(cred.step, int) or cred.step < 1:
            return False
        weight = params.weight(cred.player)
        if weight is None:
            if cred.counter is not None:
                return False
        elif cred.counter is None or not 1 <= cred.counter <= weight:
            return False
        if not crypto.scheme.verify(cred.player, cred.sig, challenge(params, cred.step, cred.counter, crypto)):
            return False
        h = crypto.hash(cred.sig)
        return phi(h) == cred.lottery and passes(h, params.threshold)
    except (TypeError, ValueError, AttributeError):
        return False


# --- committee-size assumptions ---------------------------------------------


def supermajority(n: int) -> int:
    """t_H = floor(2n/3) + 1."""
    return (2 * n) // 3 + 1


def honest_count(N: int, h: Rational) -> int:
    """round(hN), halves rounded up, computed exactly."""
    x = as_fraction(h) * N
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class AssumptionReport:
    n: int
    t_H: int
    p_cond1: float
    p_cond2: float
    epsilon: float
    satisfied: bool
    fail_cond1: float
    fail_cond2: float


def _check_premise(N: int, h: Rational, n: int):
    hf = as_fraction(h)
    if not Fraction(2, 3) < hf <= 1:
        raise InvalidParameter(f"honest ratio must satisfy 2/3 < h <= 1, got {h}")
    if not 1 <= n <= N:
        raise InvalidParameter(f"need 1 <= n <= N, got n={n}, N={N}")


def _log_pmf_window(K: int, p: float, lo: int, hi: int) -> np.ndarray:
    """log P(Bin(K,p) = k) for k = lo..hi, built by the ratio recurrence from the mode."""
    ks = np.arange(lo, hi + 1)
    if p >= 1.0:
        out = np.full(ks.shape, -np.inf)
        out[ks == K] = 0.0
        return out
    lp, lq = math.log(p), math.log1p(-p)
    mode = min(max(int(math.floor((K + 1) * p)), lo), hi)
    base = math.lgamma(K + 1) - math.lgamma(mode + 1) - math.lgamma(K - mode + 1) + mode * lp + (K - mode) * lq
    out = np.empty(ks.shape)
    i0 = mode - lo
    out[i0] = base
    # upward: log f(k+1) - log f(k) = log(K-k) - log(k+1) + lp - lq
    up = ks[i0:-1] if i0 < len(ks) - 1 else ks[:0]
    if len(up):
        steps = np.log(K - up) - np.log(up + 1) + lp - lq
        out[i0 + 1:] = base + np.cumsum(steps)
    down = ks[1:i0 + 1][::-1] if i0 > 0 else ks[:0]
    if len(down):
        steps = np.log(down) - np.log(K - down + 1) - lp + lq
        out[:i0][::-1] = base + np.cumsum(steps)
    return out


def _window(K: int, p: float) -> Tuple[int, int]:
    if K == 0:
        return 0, 0
    mu = K * p
    sd = math.sqrt(K * p * (1 - p))
    lo = max(0, int(math.floor(mu - 40 * sd - 60)))
    hi = min(K, int(math.ceil(mu + 40 * sd + 60)))
    return lo, hi


def _logsumexp(a: np.ndarray) -> float:
    if a.size == 0:
        return -math.inf
    m = np.max(a)
    if not np.isfinite(m):
        return -math.inf
    return float(m + math.log(np.sum(np.exp(a - m))))


def check_assumptions(N: int, h: Rational, n: int, epsilon: float) -> AssumptionReport:
    """Exact probabilities of |HP| > t_H and |HP| + 2|MP| < 2 t_H.

    |HP| ~ Bin(round(hN), n/N) and |MP| ~ Bin(N - round(hN), n/N), independent.
    Both the success and the failure mass are accumulated in log space so that
    failure probabilities far below 1e-12 keep full relative precision.
    """
    _check_premise(N, h, n)
    H = honest_count(N, h)
    M = N - H
    t = supermajority(n)
    p = n / N

    lo_h, hi_h = _window(H, p)
    log_h = _log_pmf_window(H, p, lo_h, hi_h)
    ks = np.arange(lo_h, hi_h + 1)

    ok1 = _logsumexp(log_h[ks > t])
    bad1 = _logsumexp(log_h[ks <= t])

    # cond2: MP <= j(k) = floor((2t - k - 1) / 2)
    j = (2 * t - ks - 1) // 2
    if M == 0:
        log_cdf = np.where(j >= 0, 0.0, -np.inf)
        log_sf = np.where(j >= 0, -np.inf, 0.0)
    else:
        lo_m, hi_m = _window(M, p)
        log_m = _log_pmf_window(M, p, lo_m, hi_m)
        cum = np.logaddexp.accumulate(log_m)
        rcum = np.logaddexp.accumulate(log_m[::-1])[::-1]
        idx = np.clip(j - lo_m, -1, hi_m - lo_m)
        log_cdf = np.where(idx < 0, -np.inf, cum[np.clip(idx, 0, None)])
        nxt = idx + 1
        log_sf = np.where(nxt > hi_m - lo_m, -np.inf, rcum[np.clip(nxt, 0, hi_m - lo_m)])
    ok2 = _logsumexp(log_h + log_cdf)
    bad2 = _logsumexp(log_h + log_sf)

    def split(ok, bad):
        tot = np.logaddexp(ok, bad)
        return math.exp(ok - tot), math.exp(bad - tot)

    p1, q1 = split(ok1, bad1)
    p2, q2 = split(ok2, bad2)
    satisfied = p1 >= 1 - epsilon and p2 >= 1 - epsilon
    return AssumptionReport(n, t, p1, p2, epsilon, satisfied, q1, q2)


def _cond1_hopeless(H: int, p: float, t: int, epsilon: float) -> bool:
    """True when a single term of P(|HP| <= t_H) already exceeds epsilon."""
    if H == 0:
        return True
    k = min(t, H)
    if p >= 1.0:
        return k >= H and epsilon < 1
    logf = math.lgamma(H + 1) - math.lgamma(k + 1) - math.lgamma(H - k + 1) + k * math.log(p) + (H - k) * math.log1p(-p)
    return logf > math.log(epsilon) if epsilon > 0 else True


def min_committee_size(N: int, h: Rational, epsilon: float) -> int:
    """Smallest n <= N whose assumption report is satisfied."""
    _check_premise(N, h, 1)
    H = honest_count(N, h)
    for n in range(1, N + 1):
        if epsilon < 1 and _cond1_hopeless(H, n / N, supermajority(n), epsilon):
            continue
        if check_assumptions(N, h, n, epsilon).satisfied:
            return n
    raise NoFeasibleCommittee(f"no committee size up to N={N} satisfies h={h}, epsilon={epsilon}")
