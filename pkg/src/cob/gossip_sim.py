"""Discrete-event simulation of the gossip network.

Time is integer nanoseconds. Every message lives in a per-step ``Board`` that
stores, for each accepted message, its arrival time at every node. Nodes only
act at their step boundaries; at a boundary the node's tallies are read off the
board by masking rows that arrived by then. The ending condition is tracked
per (step, theta) group as the t_H-th order statistic of per-sender arrival
times, which yields the exact instant each node can certify without replaying
every single delivery as a heap event.
"""

from __future__ import annotations

import heapq
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import adversary as adv
from .cob_node import (
    DEGRADE,
    NodeState,
    ProtocolContext,
    ProtocolViolation,
    StepSchedule,
    build_certificate,
    check_ending,
    halt,
    is_cf0,
    is_cgf,
    on_certificate_received,
    reconstruct_theta,
    snapshot,
    step_boundary,
    verify_certificate,
)
from .protocol_types import (
    BOTTOM,
    COSTS,
    Certificate,
    StepMessage,
    Tally,
    VOID_ALL,
    KEEP_FIRST,
    _encode_values,
    _Reader,
    _read_values,
    build_message,
    decode_certificate,
    decode_message,
    encode_certificate,
    encode_message,
    is_value_step,
    message_cost,
    validate_message,
)
from .sortition import (
    Crypto,
    KeyPair,
    SimulatedSignatures,
    SortitionParams,
    as_fraction,
    check_assumptions,
    concat,
    honest_count,
    make_credential,
    make_hasher,
    supermajority,
)

INF = np.iinfo(np.int64).max
MAX_STEPS_DEFAULT = 5 + 3 * 200

WAKE, ADVERSARY, BOUNDARY = 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    N: int
    n: int
    h: float = 0.8
    m: int = 1
    Omega: int = 10_000_000
    Lambda: int = 4_000_000
    lam: int = 1_000_000
    seed: int = 0
    adversary: str = "honest"
    adversary_params: Tuple[Tuple[str, object], ...] = ()
    scenario: str = "u:x"
    max_steps: int = MAX_STEPS_DEFAULT
    delay_model: str = "uniform"
    epsilon: float = 1e-4
    equivocation_policy: str = VOID_ALL
    grade_policy: str = DEGRADE
    hasher: str = "sha256"
    record_trace: bool = False

    def __post_init__(self):
        if not 1 <= self.n <= self.N:
            raise ValueError(f"need 1 <= n <= N, got n={self.n}, N={self.N}")
        if not Fraction(2, 3) < as_fraction(self.h) <= 1:
            raise ValueError(f"honest ratio must satisfy 2/3 < h <= 1, got {self.h}")
        if self.m < 0 or self.max_steps < 4:
            raise ValueError("m must be >= 0 and max_steps >= 4")
        if self.delay_model not in ("uniform", "graph"):
            raise ValueError(f"unknown delay model {self.delay_model!r}")
        if isinstance(self.adversary_params, dict):
            object.__setattr__(self, "adversary_params", tuple(sorted(self.adversary_params.items())))

    @property
    def schedule(self) -> StepSchedule:
        return StepSchedule(self.Omega, self.Lambda, self.lam)

    def params_dict(self) -> dict:
        return dict(self.adversary_params)

    def to_json(self) -> str:
        d = asdict(self)
        d["adversary_params"] = {k: v for k, v in self.adversary_params}
        d["h"] = str(self.h)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        d = json.loads(text)
        d["adversary_params"] = tuple(sorted(d.get("adversary_params", {}).items()))
        d["h"] = float(d["h"])
        return cls(**d)


@dataclass
class RunMetrics:
    seed: int
    N: int
    n: int
    m: int
    h: float
    strategy: str
    scenario: str
    ell: int
    T: Optional[int] = None
    halt_max: Optional[int] = None
    all_halted: bool = False
    timeout: bool = False
    last_broadcast_step: int = 0
    cgf_loops: int = 0
    max_step: int = 0
    bytes_total: float = 0.0
    bytes_honest: float = 0.0
    honest_players: List[int] = field(default_factory=list)
    malicious_players: List[int] = field(default_factory=list)
    assumption_violations: List[int] = field(default_factory=list)
    config_clean: bool = True
    outputs: int = 0
    output_digest: Optional[str] = None
    T_c: List[Optional[int]] = field(default_factory=list)
    T_c_last: List[Optional[int]] = field(default_factory=list)
    flags: Dict[str, int] = field(default_factory=dict)
    invalid_messages: int = 0
    equivocators_seen: int = 0
    cases: List[str] = field(default_factory=list)
    cgf_rounds: List[Tuple] = field(default_factory=list)

    @property
    def assumption_clean(self) -> bool:
        return self.config_clean and not self.assumption_violations

    @property
    def safety_flagged(self) -> bool:
        return any(self.flags.get(k, 0) for k in SAFETY_FLAGS)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["assumption_clean"] = self.assumption_clean
        d["safety_flagged"] = self.safety_flagged
        return d


SAFETY_FLAGS = (
    "conflicting_certificates",
    "conflicting_outputs",
    "conflicting_finalization",
    "conflicting_thresholds",
    "grade_dichotomy",
    "late_honest_delivery",
    "protocol_violation",
    "halt_window",
)


@dataclass
class RunResult:
    metrics: RunMetrics
    states: Dict[int, NodeState]
    certificates: List[Certificate]
    trace: Optional[bytes]
    sortition: SortitionParams
    crypto: Crypto
    malicious: FrozenSet[int] = frozenset()


# --- message boards ----------------------------------------------------------------


class Board:
    """All accepted messages of one step with their per-node arrival times."""

    def __init__(self, step: int, N: int, m: int):
        self.step = step
        self.N = N
        self.m = m
        self.rows = 0
        cap = 16
        self.sender = np.zeros(cap, np.int64)
        self.payload = np.zeros((cap, max(m, 1)), np.int64)
        self.theta = np.full(cap, -1, np.int64)
        self.hkey = np.zeros(cap, np.uint64)
        self.honest = np.zeros(cap, bool)
        self.arrival = np.full((cap, N), INF, np.int64)
        self.direct = np.full((cap, N), INF, np.int64)
        self.relay = np.zeros((cap, N), np.int64)
        self.messages: List[StepMessage] = []
        self.hash_values: List[int] = []
        self.by_msg: Dict[StepMessage, int] = {}
        self.rows_of: Dict[int, List[int]] = {}
        self.multi: set = set()
        self.version = 0

    def _grow(self):
        cap = 2 * len(self.sender)
        def grow(a, fill):
            out = np.full((cap,) + a.shape[1:], fill, a.dtype)
            out[: len(a)] = a
            return out
        self.sender = grow(self.sender, 0)
        self.payload = grow(self.payload, 0)
        self.theta = grow(self.theta, -1)
        self.hkey = grow(self.hkey, 0)
        self.honest = grow(self.honest, False)
        self.arrival = grow(self.arrival, INF)
        self.direct = grow(self.direct, INF)
        self.relay = grow(self.relay, 0)

    def add(self, msg: StepMessage, sender: int, payload_ids: Sequence[int], theta_id: int, hash_value: int, hkey: int, honest: bool) -> int:
        if self.rows == len(self.sender):
            self._grow()
        r = self.rows
        self.sender[r] = sender
        if self.m:
            self.payload[r, : self.m] = payload_ids
        self.theta[r] = theta_id
        self.hkey[r] = hkey
        self.honest[r] = honest
        self.messages.append(msg)
        self.hash_values.append(hash_value)
        self.by_msg[msg] = r
        rows = self.rows_of.setdefault(sender, [])
        rows.append(r)
        if len(rows) > 1:
            self.multi.add(sender)
        self.rows += 1
        self.version += 1
        return r


class ArrayTally:
    """Read-only tally of one board as seen by one node at one instant."""

    def __init__(self, sim: "Simulation", board: Board, node: int, time: int):
        self.sim = sim
        self.board = board
        self.step = board.step
        R = board.rows
        self.column = board.arrival[:R, node]
        self.mask = self.column <= time
        self._contrib = None
        self._bits = None
        self._values = None

    @property
    def contrib(self) -> np.ndarray:
        if self._contrib is None:
            c = self.mask
            b = self.board
            if b.multi:
                c = c.copy()
                for s in b.multi:
                    arrived = [r for r in b.rows_of[s] if self.mask[r]]
                    if len(arrived) > 1:
                        c[arrived] = False
                        if self.sim.ctx.equivocation_policy == KEEP_FIRST:
                            first = min(arrived, key=lambda r: (self.column[r], r))
                            c[first] = True
            self._contrib = c
        return self._contrib

    def bit_counts(self, m: int):
        if self._bits is None:
            rows = self.board.payload[: self.board.rows][self.contrib][:, :m]
            ones = rows.sum(axis=0)
            zeros = len(rows) - ones
            self._bits = (zeros.tolist(), ones.tolist())
        return self._bits

    def _value_matrix(self) -> np.ndarray:
        if self._values is None:
            K = len(self.sim.values)
            m = self.board.m
            rows = self.board.payload[: self.board.rows][self.contrib][:, :m]
            flat = (rows + np.arange(m) * K).ravel()
            self._values = np.bincount(flat, minlength=m * K).reshape(m, K)
        return self._values

    def value_counts(self, c: int) -> Dict:
        if self.board.m == 0:
            return {}
        row = self._value_matrix()[c]
        return {self.sim.values[i]: int(row[i]) for i in np.nonzero(row)[0]}

    def count(self, value, c: int) -> int:
        if is_value_step(self.step):
            i = self.sim.value_ids.get(value)
            return 0 if i is None else int(self._value_matrix()[c, i])
        zeros, ones = self.bit_counts(self.board.m)
        return ones[c] if value == 1 else zeros[c] if value == 0 else 0

    def _rows(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]

    def min_row(self) -> Optional[int]:
        rows = self._rows()
        if not len(rows):
            return None
        keys = self.board.hkey[rows]
        cand = rows[keys == keys.min()]
        b = self.board
        return min(cand, key=lambda r: (b.hash_values[r], b.messages[r].sender))

    def min_credential(self, crypto=None):
        r = self.min_row()
        return None if r is None else self.board.messages[r].credential

    def credentials(self):
        seen, out = set(), []
        for r in self._rows():
            msg = self.board.messages[r]
            if msg.sender not in seen:
                seen.add(msg.sender)
                out.append(msg.credential)
        return out

    def theta_signers(self, digest: bytes) -> Dict[bytes, StepMessage]:
        tid = self.sim.theta_ids.get(digest)
        out: Dict[bytes, StepMessage] = {}
        if tid is None:
            return out
        b = self.board
        for r in np.nonzero(self.mask & (b.theta[: b.rows] == tid))[0]:
            out.setdefault(b.messages[r].sender, b.messages[r])
        return out

    def theta_digests(self) -> List[bytes]:
        b = self.board
        ids = np.unique(b.theta[: b.rows][self.mask])
        return [self.sim.thetas[i] for i in ids if i >= 0]


class TallyBook(Mapping):
    """Lazy step -> ArrayTally mapping for one node at one instant."""

    def __init__(self, sim: "Simulation", node: int, time: int):
        self.sim, self.node, self.time = sim, node, time
        self._cache: Dict[int, ArrayTally] = {}

    def __getitem__(self, step: int) -> ArrayTally:
        t = self._cache.get(step)
        if t is None:
            t = ArrayTally(self.sim, self.sim.board(step), self.node, self.time)
            self._cache[step] = t
        return t

    def get(self, step, default=None):
        if step < 1 or step not in self.sim.boards:
            return default
        return self[step]

    def __iter__(self):
        return iter(sorted(self.sim.boards))

    def __len__(self):
        return len(self.sim.boards)

    def __contains__(self, step):
        return step in self.sim.boards


class ThetaGroup:
    """Per-sender earliest arrival of theta signatures for one (step, theta)."""

    def __init__(self, N: int):
        self.index: Dict[int, int] = {}
        self.A = np.full((8, N), INF, np.int64)
        self.k = 0
        self._kth = None

    def update(self, sender: int, arrival: np.ndarray):
        i = self.index.get(sender)
        if i is None:
            if self.k == len(self.A):
                grown = np.full((2 * len(self.A), self.A.shape[1]), INF, np.int64)
                grown[: self.k] = self.A
                self.A = grown
            i = self.index[sender] = self.k
            self.k += 1
            self.A[i] = arrival
        else:
            np.minimum(self.A[i], arrival, out=self.A[i])
        self._kth = None

    def kth(self, t: int) -> Optional[np.ndarray]:
        if self.k < t:
            return None
        if self._kth is None:
            self._kth = np.partition(self.A[: self.k], t - 1, axis=0)[t - 1]
        return self._kth


# --- trace records -------------------------------------------------------------

TR_HEADER, TR_NODE, TR_MESSAGE, TR_DELIVER, TR_BOUNDARY, TR_CERT, TR_CERT_DELIVER, TR_HALT, TR_SELF = range(9)
TRACE_MAGIC = b"CobT\x01"


class TraceWriter:
    def __init__(self):
        self.records: List[bytes] = []

    def add(self, kind: int, body: bytes):
        self.records.append(struct.pack(">BI", kind, len(body)) + body)

    def getvalue(self) -> bytes:
        return TRACE_MAGIC + b"".join(self.records)


def read_trace(data: bytes) -> List[Tuple[int, bytes]]:
    if not data.startswith(TRACE_MAGIC):
        raise ValueError("not a trace file")
    out, pos = [], len(TRACE_MAGIC)
    while pos < len(data):
        kind, k = struct.unpack_from(">BI", data, pos)
        pos += 5
        out.append((kind, data[pos:pos + k]))
        pos += k
    return out


# --- the simulation ------------------------------------------------------------------


def derive_rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, purpose])


def node_keys(seed: int, N: int, crypto: Crypto) -> List[KeyPair]:
    return [crypto.scheme.keygen(concat(b"cob-node", seed & 0xFFFFFFFFFFFFFFFF, i)) for i in range(N)]


def make_crypto(config: SimConfig) -> Crypto:
    """Fresh hasher and key registry for one run."""
    if config.hasher == "sha256":
        hasher = make_hasher({"name": "sha256"})
        return Crypto(hasher, SimulatedSignatures(hasher))
    if config.hasher == "seeded":
        return Crypto.seeded(config.seed)
    raise ValueError(f"unknown hasher {config.hasher!r}")


def reference_string(config: SimConfig, crypto: Crypto) -> bytes:
    return crypto.hash(concat(b"cob-r", config.seed & 0xFFFFFFFFFFFFFFFF)).data


class Simulation:
    def __init__(self, config: SimConfig, strategy: Optional[adv.Strategy] = None):
        self.config = config
        self.N, self.m = config.N, config.m
        self.schedule = config.schedule
        self.crypto = make_crypto(config)
        self.sortition = SortitionParams(config.N, config.n, reference_string(config, self.crypto))
        self.ctx = ProtocolContext(self.sortition, self.crypto, config.m, config.grade_policy, config.equivocation_policy)
        self.t_H = self.ctx.t_H
        self.keys = node_keys(config.seed, config.N, self.crypto)
        self.pk_index = {k.pk: i for i, k in enumerate(self.keys)}
        self.strategy = strategy if strategy is not None else adv.make_strategy(config.adversary, config.params_dict())
        self.trace = TraceWriter() if config.record_trace else None

        N = self.N
        H = honest_count(N, config.h)
        self.malicious = np.zeros(N, bool)
        perm = derive_rng(config.seed, 1).permutation(N)
        self.malicious[np.sort(perm[: N - H])] = True
        self.honest_idx = np.nonzero(~self.malicious)[0]
        self.malicious_idx = np.nonzero(self.malicious)[0]
        self.alpha = derive_rng(config.seed, 2).integers(0, config.lam + 1, size=N).astype(np.int64)
        self.delay_rng = derive_rng(config.seed, 3)
        self.scenario = adv.make_scenario(config.scenario, config.m, N, config.seed, self.crypto, self.malicious)
        self.values: List = [BOTTOM]
        self.value_ids: Dict = {BOTTOM: 0}
        self.thetas: List[bytes] = []
        self.theta_ids: Dict[bytes, int] = {}
        self.boards: Dict[int, Board] = {}
        self.groups: Dict[Tuple[int, int], ThetaGroup] = {}
        self.graph_delay = None
        if config.delay_model == "graph":
            self.graph_delay = _graph_delays(N, derive_rng(config.seed, 4))

        self.actx = AdversaryContext(self)
        self.puppet = np.zeros(N, bool)
        if self.strategy.puppets:
            self.puppet[self.malicious_idx] = True
        self.protocol = ~self.malicious | self.puppet
        for i in self.malicious_idx:
            self.alpha[i] = int(min(max(self.strategy.alpha(self.actx, int(i), int(self.alpha[i])), 0), config.lam))
        self.states: Dict[int, NodeState] = {}
        for i in np.nonzero(self.protocol)[0]:
            obs = self.scenario.observations[i]
            if self.malicious[i]:
                obs = tuple(self.strategy.observe(self.actx, int(i), obs))
            self.states[int(i)] = NodeState(int(i), self.keys[i], int(self.alpha[i]), tuple(obs))

        self.halted = np.zeros(N, bool)
        self.halt_time = np.full(N, INF, np.int64)
        self.end_cand = np.full(N, INF, np.int64)
        self.end_key: List[Optional[Tuple[int, bytes]]] = [None] * N
        self.cert_arrival = np.full(N, INF, np.int64)
        self.cert_source = np.full(N, -1, np.int64)
        self.node_cert: Dict[int, Certificate] = {}
        self.certificates: List[Certificate] = []
        self._cert_ids: Dict[int, int] = {}
        self._verified: Dict[int, bool] = {}
        self.wake_at = INF
        self.heap: list = []
        self.seq = 0
        self.now = 0
        self.selection: Dict[int, np.ndarray] = {}

        self.metrics = RunMetrics(
            config.seed, N, config.n, config.m, float(config.h), self.strategy.name, config.scenario, self.scenario.ell
        )
        self.flags: Dict[str, int] = {k: 0 for k in SAFETY_FLAGS}
        self.threshold_seen: Dict[Tuple[int, int], set] = {}
        self.cgf_views: Dict[int, List[Tuple[int, np.ndarray, int]]] = {}
        self.bytes_total = Fraction(0)
        self.bytes_honest = Fraction(0)
        self.max_step = 0
        self._trace_msg_ids: Dict[Tuple[int, int], int] = {}

    # -- bookkeeping ------------------------------------------------------------

    def board(self, step: int) -> Board:
        b = self.boards.get(step)
        if b is None:
            b = self.boards[step] = Board(step, self.N, self.m)
        return b

    def push(self, time: int, prio: int, kind: str, data):
        self.seq += 1
        heapq.heappush(self.heap, (int(time), prio, self.seq, kind, data))

    def selected(self, step: int) -> np.ndarray:
        sel = self.selection.get(step)
        if sel is None:
            sel = np.array([make_credential(k, self.sortition, step, self.crypto) is not None for k in self.keys], bool)
            self.selection[step] = sel
        return sel

    def _value_id(self, v) -> int:
        i = self.value_ids.get(v)
        if i is None:
            i = self.value_ids[v] = len(self.values)
            self.values.append(v)
        return i

    def _theta_id(self, d: bytes) -> int:
        i = self.theta_ids.get(d)
        if i is None:
            i = self.theta_ids[d] = len(self.thetas)
            self.thetas.append(d)
        return i

    def _bound(self, step: int) -> int:
        return self.config.Lambda if is_value_step(step) else self.config.lam

    def draw_delays(self, origin: int, bound: int) -> np.ndarray:
        if bound <= 0:
            return np.zeros(self.N, np.int64)
        if self.graph_delay is not None:
            return np.maximum(1, np.ceil(self.graph_delay[origin] * bound)).astype(np.int64)
        return self.delay_rng.integers(1, bound + 1, size=self.N).astype(np.int64)

    # -- message intake -------------------------------------------------------------

    def accept(self, msg: StepMessage, origin: int) -> Optional[int]:
        """Validate and register a message; returns its board row (None if invalid)."""
        b = self.board(msg.step)
        r = b.by_msg.get(msg)
        if r is not None:
            return r
        if not validate_message(msg, self.sortition, self.crypto, self.m):
            self.metrics.invalid_messages += 1
            return None
        sender = self.pk_index.get(msg.sender)
        if sender is None:
            self.metrics.invalid_messages += 1
            return None
        if is_value_step(msg.step):
            ids = [self._value_id(v) for v in msg.payload]
            tid = -1
        else:
            ids = list(msg.payload)
            tid = self._theta_id(msg.theta_digest)
        hv = self.crypto.hash(msg.credential.sig)
        hkey = hv.value >> max(hv.bits - 64, 0)
        honest = not self.malicious[sender]
        r = b.add(msg, sender, ids, tid, hv.value, hkey, honest)
        cost = message_cost(msg, COSTS)
        self.bytes_total += cost
        if honest:
            self.bytes_honest += cost
            self.metrics.last_broadcast_step = max(self.metrics.last_broadcast_step, msg.step)
        if self.trace is not None:
            mid = len(self._trace_msg_ids)
            self._trace_msg_ids[(msg.step, r)] = mid
            self.trace.add(TR_MESSAGE, struct.pack(">IIq", mid, origin, self.now) + encode_message(msg))
        return r

    def set_arrivals(self, step: int, r: int, times: np.ndarray, origin: int = -1):
        """Lower the arrival row of a message and refresh everything derived from it.

        ``origin`` marks a node handing its own message to itself at emission;
        the trace records that separately so a replay can apply it after the
        emitting boundary rather than before it.
        """
        b = self.boards[step]
        old = b.arrival[r].copy()
        np.minimum(b.arrival[r], times, out=b.arrival[r])
        changed = np.nonzero(b.arrival[r] != old)[0]
        if not len(changed):
            return
        b.version += 1
        if self.trace is not None:
            mid = self._trace_msg_ids[(step, r)]
            for j in changed:
                if self.protocol[j]:
                    kind = TR_SELF if j == origin else TR_DELIVER
                    self.trace.add(kind, struct.pack(">IIq", mid, j, int(b.arrival[r, j])))
        if b.theta[r] >= 0:
            self._update_groups(step, int(b.theta[r]), int(b.sender[r]), b.arrival[r])

    def broadcast(self, origin: int, msg: StepMessage, time: int) -> Optional[int]:
        """Protocol-faithful broadcast: everyone receives within the step's bound."""
        r = self.accept(msg, origin)
        if r is None:
            return None
        times = time + self.draw_delays(origin, self._bound(msg.step))
        times[origin] = time
        b = self.boards[msg.step]
        b.direct[r] = np.minimum(b.direct[r], times)
        self.set_arrivals(msg.step, r, times, origin)
        return r

    def deliver_adversarial(self, r: int, step: int, times: np.ndarray):
        """Adversary-chosen arrivals with the re-gossip closure applied to honest nodes."""
        b = self.boards[step]
        if not b.relay[r].any():
            b.relay[r] = self.draw_delays(int(b.sender[r]), self._bound(step))
        np.minimum(b.direct[r], times, out=b.direct[r])
        direct = b.direct[r]
        honest = ~self.malicious
        first = direct[honest].min() if honest.any() else INF
        arrival = direct.copy()
        if first < INF:
            relayed = first + b.relay[r]
            arrival[honest] = np.minimum(direct[honest], relayed[honest])
        arrival[self.malicious] = np.minimum(arrival[self.malicious], self.now)
        self.set_arrivals(step, r, arrival)

    # -- ending condition ------------------------------------------------------------

    def _update_groups(self, step: int, tid: int, sender: int, arrival: np.ndarray):
        g = self.groups.get((step, tid))
        if g is None:
            g = self.groups[(step, tid)] = ThetaGroup(self.N)
        g.update(sender, arrival)
        for sp in (step, step + 1):
            if is_cf0(sp):
                self._refresh_pair(sp, tid)

    def _refresh_pair(self, sp: int, tid: int):
        ga, gb = self.groups.get((sp - 1, tid)), self.groups.get((sp, tid))
        if ga is None or gb is None:
            return
        ka, kb = ga.kth(self.t_H), gb.kth(self.t_H)
        if ka is None or kb is None:
            return
        cand = np.maximum(ka, kb)
        key = (sp, self.thetas[tid])
        better = (cand < self.end_cand) & self.protocol & ~self.halted
        self.end_cand[better] = cand[better]
        for j in np.nonzero(better)[0]:
            self.end_key[j] = key
        ties = np.nonzero((cand == self.end_cand) & ~better & (cand < INF) & self.protocol & ~self.halted)[0]
        for j in ties:
            if self.end_key[j] is None or key < self.end_key[j]:
                self.end_key[j] = key
        self._schedule_wake()

    def _triggers(self) -> np.ndarray:
        t = np.minimum(self.end_cand, self.cert_arrival)
        t[~self.protocol | self.halted] = INF
        return t

    def _schedule_wake(self):
        t = int(self._triggers().min())
        if t < self.wake_at:
            self.wake_at = t
            self.push(max(t, self.now), WAKE, "wake", t)

    def _handle_wake(self, t: int):
        if t != self.wake_at:
            return
        self.wake_at = INF
        trig = self._triggers()
        for j in np.nonzero(trig <= t)[0]:
            self._halt(int(j), t)
        self._schedule_wake()

    def _own_certificate(self, j: int, t: int) -> Certificate:
        sp, digest = self.end_key[j]
        book = TallyBook(self, j, t)
        this, prev = book[sp].theta_signers(digest), book[sp - 1].theta_signers(digest)
        theta = reconstruct_theta(self.states[j], digest, this, book.get(2), self.ctx)
        return build_certificate(theta, sp, prev, this)

    def _halt(self, j: int, t: int):
        state = self.states[j]
        if self.end_cand[j] <= self.cert_arrival[j]:
            try:
                cert = self._own_certificate(j, t)
            except ProtocolViolation:
                self._flag("protocol_violation", j)
                self.end_cand[j] = INF
                return
            self.certificates.append(cert)
        else:
            cert = self.node_cert[int(self.cert_source[j])]
            if id(cert) not in self._verified:
                self._verified[id(cert)] = verify_certificate(cert, self.sortition, self.crypto)
            if not self._verified[id(cert)]:
                self.cert_arrival[j] = INF
                return
        halt(state, cert, t)
        self.halted[j] = True
        self.halt_time[j] = t
        self.node_cert[j] = cert
        if self.trace is not None:
            cid = self._cert_ids.get(id(cert))
            if cid is None:
                cid = self._cert_ids[id(cert)] = len(self._cert_ids)
                self.trace.add(TR_CERT, struct.pack(">I", cid) + encode_certificate(cert))
            self.trace.add(TR_HALT, struct.pack(">Iq", j, t))
        if self.malicious[j] and not self.strategy.relays_certificate(self.actx, j):
            return
        arrivals = t + self.draw_delays(j, self.config.lam)
        better = (arrivals < self.cert_arrival) & ~self.halted
        self.cert_arrival[better] = arrivals[better]
        self.cert_source[better] = j
        if self.trace is not None:
            cid = self._cert_ids[id(cert)]
            for k in np.nonzero(better & self.protocol)[0]:
                self.trace.add(TR_CERT_DELIVER, struct.pack(">IIq", cid, k, int(arrivals[k])))

    # -- boundaries ------------------------------------------------------------------

    def _flag(self, name: str, node: Optional[int] = None):
        if node is None or not self.malicious[node]:
            self.flags[name] += 1

    def _handle_boundary(self, j: int, s: int, t: int):
        state = self.states[j]
        if self.halted[j]:
            return
        self.max_step = max(self.max_step, s) if not self.malicious[j] else self.max_step
        if self.trace is not None:
            self.trace.add(TR_BOUNDARY, struct.pack(">IIq", j, s, t))
        book = TallyBook(self, j, t)
        honest = not self.malicious[j]
        if honest and s >= 2:
            self._monitor(j, s, t, book)
        try:
            msg = step_boundary(state, s, book, self.ctx)
        except ProtocolViolation:
            self._flag("protocol_violation", j)
            msg = None
        if msg is not None:
            if honest and is_cgf(s):
                self._record_cgf_view(j, s, book)
            if self.malicious[j]:
                self.strategy.on_emit(self.actx, j, msg)
            else:
                self.broadcast(j, msg, t)
        if s < self.config.max_steps:
            self.push(self.schedule.boundary(int(self.alpha[j]), s + 1), BOUNDARY, "boundary", (j, s + 1))

    def _monitor(self, j: int, s: int, t: int, book: TallyBook):
        prev = self.boards.get(s - 1)
        if prev is not None and prev.rows:
            hrows = np.nonzero(prev.honest[: prev.rows])[0]
            if len(hrows) and prev.arrival[hrows, j].max() > t:
                self._flag("late_honest_delivery", j)
        tally = book.get(s - 1)
        if tally is None:
            return
        if is_value_step(s - 1):
            if self.m:
                mat = tally._value_matrix()
                for c, i in zip(*np.nonzero(mat >= self.t_H)):
                    self.threshold_seen.setdefault((s - 1, int(c)), set()).add(int(i))
        else:
            zeros, ones = tally.bit_counts(self.m)
            for c in range(self.m):
                if zeros[c] >= self.t_H:
                    self.threshold_seen.setdefault((s - 1, c), set()).add(0)
                if ones[c] >= self.t_H:
                    self.threshold_seen.setdefault((s - 1, c), set()).add(1)

    def _record_cgf_view(self, j: int, s: int, book: TallyBook):
        tally = book[s - 1]
        zeros, ones = tally.bit_counts(self.m)
        state = self.states[j]
        flipped = np.array(
            [not state.f[c] and zeros[c] < self.t_H and ones[c] < self.t_H for c in range(self.m)], bool
        )
        r = tally.min_row()
        owner = -1 if r is None else int(tally.board.sender[r])
        self.cgf_views.setdefault(s, []).append((j, flipped, owner))

    # -- main loop ------------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.config
        if self.trace is not None:
            self.trace.add(TR_HEADER, cfg.to_json().encode())
            for i in range(self.N):
                obs = self.states[i].O if i in self.states else self.scenario.observations[i]
                body = struct.pack(">I??q", i, bool(self.malicious[i]), bool(self.protocol[i]), int(self.alpha[i]))
                self.trace.add(TR_NODE, body + _encode_values(obs))
        for j in self.states:
            self.push(self.schedule.boundary(int(self.alpha[j]), 1), BOUNDARY, "boundary", (j, 1))
        self.strategy.setup(self.actx)
        self._schedule_adversary(1)
        honest = ~self.malicious
        while self.heap:
            t, prio, _, kind, data = heapq.heappop(self.heap)
            self.now = t
            if kind == "wake":
                self._handle_wake(data)
            elif kind == "adversary":
                self.strategy.on_step(self.actx, data)
                if data < cfg.max_steps and not self.halted[honest].all():
                    self._schedule_adversary(data + 1)
            else:
                self._handle_boundary(data[0], data[1], t)
            if self.halted[self.protocol].all():
                break
        return self._finish()

    def _schedule_adversary(self, step: int):
        when = self.strategy.action_time(self.actx, step)
        if when is not None:
            self.push(max(int(when), self.now), ADVERSARY, "adversary", step)

    # -- wrap-up ------------------------------------------------------------------

    def _finish(self) -> RunResult:
        met = self.metrics
        cfg = self.config
        H = self.honest_idx
        met.flags = self.flags
        met.all_halted = bool(self.halted[H].all())
        met.timeout = not met.all_halted
        met.max_step = self.max_step
        if self.halted[H].any():
            times = self.halt_time[H][self.halted[H]]
            met.T = int(times.min())
            met.halt_max = int(times.max())
            if met.all_halted and met.halt_max > met.T + cfg.lam:
                self.flags["halt_window"] += 1
        outputs = {self.states[int(j)].output for j in H if self.halted[j]}
        met.outputs = len(outputs)
        if len(outputs) > 1:
            self.flags["conflicting_outputs"] += 1
        if len(outputs) == 1:
            out = next(iter(outputs))
            met.output_digest = self.crypto.hash(_encode_values(out)).data.hex()
        met.bytes_total = float(self.bytes_total)
        met.bytes_honest = float(self.bytes_honest)
        met.cgf_loops = sum(
            1 for s, b in self.boards.items() if is_cgf(s) and b.rows and b.honest[: b.rows].any()
        )
        self._check_players()
        self._check_thresholds()
        self._check_grades()
        self._check_finalization()
        self._check_certifiable()
        met.equivocators_seen = sum(len(b.multi) for b in self.boards.values())
        met.cgf_rounds = self._cgf_rounds()
        met.cases = adv.classify_cases(self)
        met.config_clean = check_assumptions(cfg.N, cfg.h, cfg.n, cfg.epsilon).satisfied
        return RunResult(
            met,
            self.states,
            self.certificates,
            self.trace.getvalue() if self.trace is not None else None,
            self.sortition,
            self.crypto,
            frozenset(int(i) for i in self.malicious_idx),
        )

    def _check_players(self):
        met = self.metrics
        top = max(self.max_step, max((s for s, b in self.boards.items() if b.rows), default=0))
        for s in range(1, top + 1):
            sel = self.selected(s)
            hp = int(sel[~self.malicious].sum())
            mp = int(sel[self.malicious].sum())
            met.honest_players.append(hp)
            met.malicious_players.append(mp)
            if not (hp > self.t_H and hp + 2 * mp < 2 * self.t_H):
                met.assumption_violations.append(s)

    def _check_thresholds(self):
        for key, seen in self.threshold_seen.items():
            if len(seen) > 1:
                self.flags["conflicting_thresholds"] += 1

    def _check_grades(self):
        honest = [self.states[int(j)] for j in self.honest_idx if self.states[int(j)].step >= 3]
        for c in range(self.m):
            if any(st.g[c] == 2 for st in honest):
                values = {st.O[c] for st in honest}
                if len(values) != 1 or BOTTOM in values or any(st.g[c] < 1 for st in honest):
                    self.flags["grade_dichotomy"] += 1

    def _check_finalization(self):
        met = self.metrics
        honest = [self.states[int(j)] for j in self.honest_idx]
        met.T_c, met.T_c_last = [], []
        for c in range(self.m):
            bits = {st.v[c] for st in honest if st.f[c]}
            if len(bits) > 1:
                self.flags["conflicting_finalization"] += 1
            for st in honest:
                if st.f[c] and st.output is not None:
                    expected = BOTTOM if st.v[c] == 1 else st.O[c]
                    if st.output[c] != expected:
                        self.flags["conflicting_finalization"] += 1
                        break
            times = [self.schedule.boundary(st.alpha, st.finalized_at[c]) for st in honest if st.f[c]]
            met.T_c.append(min(times) if times else None)
            met.T_c_last.append(max(times) if len(times) == len(honest) else None)

    def _check_certifiable(self):
        """At most one theta may gather t_H signers at both steps of any Coin-Fixed-To-0 pair."""
        certifiable = set()
        for (step, tid), g in self.groups.items():
            if is_cf0(step) and g.k >= self.t_H:
                prev = self.groups.get((step - 1, tid))
                if prev is not None and prev.k >= self.t_H:
                    certifiable.add(tid)
        if len(certifiable) > 1:
            self.flags["conflicting_certificates"] += 1

    def _cgf_rounds(self) -> List[Tuple]:
        rounds = []
        for s, views in sorted(self.cgf_views.items()):
            prev, cur = self.boards.get(s - 1), self.boards.get(s)
            if prev is None or cur is None:
                continue
            hp = np.nonzero(prev.honest[: prev.rows])[0]
            hc = np.nonzero(cur.honest[: cur.rows])[0]
            all_rows = np.arange(prev.rows)
            glob = min(all_rows, key=lambda r: (prev.hash_values[r], prev.messages[r].sender)) if prev.rows else None
            honest_min = glob is not None and not self.malicious[prev.sender[glob]]
            flipped = np.array([v[1] for v in views])
            owners = {v[2] for v in views}
            for c in range(self.m):
                before = set(prev.payload[hp, c].tolist())
                after = set(cur.payload[hc, c].tolist())
                nflip = int(flipped[:, c].sum())
                rounds.append(
                    (s, c, len(before) <= 1, nflip, len(views) - nflip, bool(honest_min), len(owners) == 1, len(after) <= 1)
                )
        return rounds


def _graph_delays(N: int, rng: np.random.Generator) -> np.ndarray:
    """Shortest-path latencies on a random connected graph, scaled to at most 1."""
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import shortest_path

    rows, cols = [], []
    for i in range(N):
        rows.append(i)
        cols.append((i + 1) % N)
    extra = rng.integers(0, N, size=(2 * N, 2))
    for a, b in extra:
        if a != b:
            rows.append(int(a))
            cols.append(int(b))
    w = rng.uniform(0.1, 1.0, size=len(rows))
    g = csr_matrix((w, (rows, cols)), shape=(N, N))
    dist = shortest_path(g, directed=False)
    return dist / max(dist.max(), 1e-12)


# --- adversary view --------------------------------------------------------------------


class AdversaryContext:
    """What strategies may see and do: malicious keys, public data, every message."""

    def __init__(self, sim: Simulation):
        self._sim = sim
        self.N, self.m, self.t_H = sim.N, sim.m, sim.t_H
        self.schedule = sim.schedule
        self.lam, self.Lambda = sim.config.lam, sim.config.Lambda
        self.crypto = sim.crypto
        self.sortition = sim.sortition
        self.malicious = [int(i) for i in sim.malicious_idx]
        self.honest = [int(i) for i in sim.honest_idx]
        self.rng = derive_rng(sim.config.seed, 5)
        self._creds: Dict[Tuple[int, int], object] = {}

    @property
    def now(self) -> int:
        return self._sim.now

    @property
    def scenario(self):
        return self._sim.scenario

    def keys(self, node: int) -> KeyPair:
        if node not in self.malicious:
            raise PermissionError("strategies only hold malicious keys")
        return self._sim.keys[node]

    def pk(self, node: int) -> bytes:
        return self._sim.keys[node].pk

    def credential(self, node: int, step: int):
        key = (node, step)
        if key not in self._creds:
            self._creds[key] = make_credential(self.keys(node), self.sortition, step, self.crypto)
        return self._creds[key]

    def malicious_players(self, step: int) -> List[int]:
        return [i for i in self.malicious if self.credential(i, step) is not None]

    def boundary(self, node: int, step: int) -> int:
        return self.schedule.boundary(int(self._sim.alpha[node]), step)

    def halted(self, node: int) -> bool:
        return bool(self._sim.halted[node])

    def active_honest(self) -> List[int]:
        return [i for i in self.honest if not self._sim.halted[i]]

    def messages(self, step: int, honest_only: bool = False) -> List[Tuple[int, StepMessage]]:
        b = self._sim.boards.get(step)
        if b is None:
            return []
        return [
            (int(b.sender[r]), b.messages[r])
            for r in range(b.rows)
            if not honest_only or b.honest[r]
        ]

    def honest_bit_counts(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        b = self._sim.boards.get(step)
        if b is None or not b.rows:
            return np.zeros(self.m, int), np.zeros(self.m, int)
        rows = b.payload[: b.rows][b.honest[: b.rows]][:, : self.m]
        ones = rows.sum(axis=0)
        return len(rows) - ones, ones

    def honest_value_counts(self, step: int, c: int) -> Dict:
        out: Dict = {}
        for _, msg in self.messages(step, honest_only=True):
            out[msg.payload[c]] = out.get(msg.payload[c], 0) + 1
        return out

    def min_credential_owner(self, step: int) -> Optional[int]:
        b = self._sim.boards.get(step)
        if b is None or not b.rows:
            return None
        r = min(range(b.rows), key=lambda r: (b.hash_values[r], b.messages[r].sender))
        return int(b.sender[r])

    def credential_key(self, cred) -> Tuple[int, bytes]:
        return (self.crypto.hash(cred.sig).value, cred.player)

    def build(self, node: int, step: int, payload, theta=None) -> Optional[StepMessage]:
        cred = self.credential(node, step)
        if cred is None:
            return None
        return build_message(self.keys(node), cred, tuple(payload), self.crypto, theta)

    def send(self, node: int, msg: StepMessage, times: Optional[Mapping[int, int]] = None) -> Optional[int]:
        """Deliver ``msg``; ``times`` maps recipients to arrival instants (>= now).

        Without ``times`` the message is broadcast like an honest one from now.
        Honest nodes absent from ``times`` still get it through re-gossip once
        any honest node has it.
        """
        sim = self._sim
        if times is None:
            return sim.broadcast(node, msg, sim.now)
        r = sim.accept(msg, node)
        if r is None:
            return None
        arr = np.full(self.N, INF, np.int64)
        for k, t in times.items():
            arr[k] = max(int(t), sim.now)
        sim.deliver_adversarial(r, msg.step, arr)
        return r

    def withhold(self, node: int, msg: StepMessage) -> Optional[int]:
        """Share only with malicious peers."""
        return self.send(node, msg, {})

    def release(self, msg: StepMessage, at: Optional[int] = None):
        """Hand a previously withheld message to every honest node at ``at``."""
        sim = self._sim
        r = sim.boards[msg.step].by_msg[msg]
        t = sim.now if at is None else max(int(at), sim.now)
        arr = np.full(self.N, INF, np.int64)
        arr[~sim.malicious] = t
        sim.deliver_adversarial(r, msg.step, arr)

    def puppet_state(self, node: int) -> NodeState:
        if node not in self.malicious:
            raise PermissionError("only malicious node states are visible")
        return self._sim.states[node]

    def straddle(self, node: int, msg: StepMessage, targets: Iterable[int], next_step: int) -> Optional[int]:
        """Deliver exactly at each target's step-``next_step`` boundary."""
        return self.send(node, msg, {k: self.boundary(k, next_step) for k in targets})

    def latest_boundaries(self, step: int, fraction: float) -> List[int]:
        """Honest, non-halted nodes with the latest step boundaries, ``fraction`` of them."""
        nodes = self.active_honest()
        nodes.sort(key=lambda k: (-self.boundary(k, step), k))
        return nodes[: int(round(fraction * len(nodes)))]


# --- public entry points ------------------------------------------------------------------


def run(config: SimConfig, strategy: Optional[adv.Strategy] = None) -> RunResult:
    return Simulation(config, strategy).run()


def replay(trace: bytes) -> Dict[int, bytes]:
    """Re-execute every protocol node from a trace with plain tallies; returns state snapshots.

    This path shares only the protocol rules with the simulator: tallies are
    built message by message and the ending condition is re-checked after each
    instant's arrivals.
    """
    records = read_trace(trace)
    config = SimConfig.from_json(records[0][1].decode())
    crypto = make_crypto(config)
    sortition = SortitionParams(config.N, config.n, reference_string(config, crypto))
    ctx = ProtocolContext(sortition, crypto, config.m, config.grade_policy, config.equivocation_policy)
    keys = node_keys(config.seed, config.N, crypto)
    states: Dict[int, NodeState] = {}
    messages: Dict[int, StepMessage] = {}
    certs: Dict[int, Certificate] = {}
    events: Dict[int, list] = {}
    own: Dict[Tuple[int, int], StepMessage] = {}
    order = 0
    for kind, body in records[1:]:
        order += 1
        if kind == TR_NODE:
            i, mal, proto, alpha = struct.unpack_from(">I??q", body)
            obs = _read_values(_Reader(body[14:]))
            if proto:
                states[i] = NodeState(i, keys[i], alpha, obs)
        elif kind == TR_MESSAGE:
            mid, origin, _ = struct.unpack_from(">IIq", body)
            messages[mid] = decode_message(body[16:])
        elif kind == TR_DELIVER:
            mid, node, t = struct.unpack(">IIq", body)
            events.setdefault(node, []).append((t, 0, order, messages[mid]))
        elif kind == TR_SELF:
            mid, node, _ = struct.unpack(">IIq", body)
            own[(node, messages[mid].step)] = messages[mid]
        elif kind == TR_CERT:
            (cid,) = struct.unpack_from(">I", body)
            certs[cid] = decode_certificate(body[4:])
        elif kind == TR_CERT_DELIVER:
            cid, node, t = struct.unpack(">IIq", body)
            events.setdefault(node, []).append((t, 1, order, certs[cid]))
    sched = config.schedule
    out = {}
    for i, state in states.items():
        inbox: Dict[int, Tally] = state.inboxes
        evs = sorted(events.get(i, []), key=lambda e: (e[0], e[2]))
        s = 1
        pos = 0
        while not state.halted:
            beta = sched.boundary(state.alpha, s) if s <= config.max_steps else None
            next_t = evs[pos][0] if pos < len(evs) else None
            if next_t is not None and (beta is None or next_t <= beta):
                t = next_t
                batch = []
                while pos < len(evs) and evs[pos][0] == t:
                    batch.append(evs[pos])
                    pos += 1
                for _, kind, _, obj in batch:
                    if kind == 0:
                        _inbox(inbox, obj.step, ctx).add(obj)
                check_ending(state, _Inboxes(inbox, ctx), ctx, t)
                for _, kind, _, obj in batch:
                    if kind == 1 and not state.halted:
                        on_certificate_received(state, obj, ctx, t)
                continue
            if beta is None:
                break
            try:
                step_boundary(state, s, _Inboxes(inbox, ctx), ctx)
            except ProtocolViolation:
                pass
            mine = own.get((i, s))
            if mine is not None:
                _inbox(inbox, s, ctx).add(mine)
                check_ending(state, _Inboxes(inbox, ctx), ctx, beta)
            s += 1
        out[i] = snapshot(state)
    return out


def _inbox(inbox: Dict[int, Tally], step: int, ctx: ProtocolContext) -> Tally:
    t = inbox.get(step)
    if t is None:
        t = inbox[step] = Tally(step, ctx.equivocation_policy)
    return t


class _Inboxes(Mapping):
    """Step -> Tally view that yields an empty tally for steps never heard from."""

    def __init__(self, inbox: Dict[int, Tally], ctx: ProtocolContext):
        self.inbox, self.ctx = inbox, ctx

    def __getitem__(self, step):
        return self.inbox.get(step) or Tally(step, self.ctx.equivocation_policy)

    def get(self, step, default=None):
        return self.inbox.get(step, default)

    def __iter__(self):
        return iter(sorted(self.inbox))

    def __len__(self):
        return len(self.inbox)

    def __contains__(self, step):
        return step in self.inbox


def final_snapshots(result: RunResult) -> Dict[int, bytes]:
    return {i: snapshot(st) for i, st in result.states.items()}


# --- aggregation -----------------------------------------------------------------------


@dataclass
class Aggregate:
    runs: int
    mean_T: Optional[float]
    step_histogram: Dict[int, int]
    cgf_histogram: Dict[int, int]
    mean_cgf: float
    cgf_ci: float
    mean_bytes: float
    violations: Dict[str, int]
    flagged_runs: int
    assumption_clean_runs: int
    timeouts: int

    def to_dict(self) -> dict:
        return asdict(self)


def collect_statistics(runs: Sequence[RunMetrics]) -> Aggregate:
    if not runs:
        raise ValueError("need at least one run")
    ws = np.array([r.cgf_loops for r in runs], float)
    Ts = [r.T for r in runs if r.T is not None]
    hist: Dict[int, int] = {}
    cgf: Dict[int, int] = {}
    for r in runs:
        hist[r.last_broadcast_step] = hist.get(r.last_broadcast_step, 0) + 1
        cgf[r.cgf_loops] = cgf.get(r.cgf_loops, 0) + 1
    violations = {k: sum(r.flags.get(k, 0) for r in runs) for k in SAFETY_FLAGS}
    ci = 3 * float(ws.std(ddof=1)) / math.sqrt(len(ws)) if len(ws) > 1 else 0.0
    return Aggregate(
        len(runs),
        float(np.mean(Ts)) if Ts else None,
        dict(sorted(hist.items())),
        dict(sorted(cgf.items())),
        float(ws.mean()),
        ci,
        float(np.mean([r.bytes_total for r in runs])),
        violations,
        sum(1 for r in runs if r.safety_flagged),
        sum(1 for r in runs if r.assumption_clean),
        sum(1 for r in runs if r.timeout),
    )
