"""Byzantine strategies and observation scenarios.

Strategies come in two flavours. Puppet strategies let malicious nodes run the
ordinary state machine and only intercept what they emit (honest, crash,
censor). Full-control strategies drive malicious players directly once per
step, after every honest message of that step is out and just before the next
step's boundaries (equivocator, finalization delayer, coin grinder).

The steering strategies rely on one primitive: deliver a vote exactly at the
next-step boundary of the honest nodes whose boundaries come last. Nodes with
earlier boundaries have already moved on when re-gossip could reach them, so
the adversary decides which honest nodes see a threshold and which do not.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .cob_node import CF0, CF1, CGF, step_kind
from .protocol_types import BOTTOM, StepMessage, is_value_step, theta_list
from .sortition import concat


# --- scenarios ---------------------------------------------------------------------


@dataclass(frozen=True)
class Rule:
    kind: str  # "u" or "s"
    first: Optional[str]
    second: Optional[str] = None
    fraction: float = 1.0


@dataclass
class Scenario:
    spec: str
    rules: Tuple[Rule, ...]
    observations: List[Tuple]
    values: List[Dict[str, bytes]]
    ell: int

    def value(self, c: int, label: Optional[str]):
        return BOTTOM if label is None else self.values[c][label]


def _label(tok: str) -> Optional[str]:
    return None if tok in ("bot", "⊥", "none") else tok


def parse_scenario(spec: str) -> Tuple[Rule, ...]:
    """``u:x`` unanimous, ``u:bot`` unanimous bottom, ``s:x:y:0.7`` split (70% see x).

    Rules are comma separated, one per component; the last rule repeats.
    """
    rules = []
    for part in spec.split(","):
        tok = part.strip().split(":")
        if tok[0] == "u" and len(tok) == 2:
            rules.append(Rule("u", _label(tok[1])))
        elif tok[0] == "s" and len(tok) == 4:
            frac = float(tok[3])
            if not 0 <= frac <= 1:
                raise ValueError(f"split fraction out of range in {part!r}")
            rules.append(Rule("s", _label(tok[1]), _label(tok[2]), frac))
        else:
            raise ValueError(f"cannot parse scenario rule {part!r}")
    if not rules:
        raise ValueError("empty scenario")
    return tuple(rules)


def ambiguous_scenario(ell: int, m: int, fraction: float = 0.7) -> str:
    """``ell`` split components followed by unanimous ones."""
    if not 0 <= ell <= m:
        raise ValueError("need 0 <= ell <= m")
    rules = [f"s:x:y:{fraction}"] * ell + ["u:x"] * (m - ell)
    return ",".join(rules) if rules else "u:x"


def make_scenario(spec: str, m: int, N: int, seed: int, crypto, malicious: Optional[np.ndarray] = None) -> Scenario:
    """Assign observations to all N nodes, independently of who is malicious.

    Ambiguity is measured over honest nodes only.
    """
    rules = parse_scenario(spec)
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 6])
    values: List[Dict[str, bytes]] = []
    columns = []
    for c in range(m):
        rule = rules[min(c, len(rules) - 1)]
        labels = {rule.first, rule.second} - {None}
        values.append({lab: crypto.hash(concat(b"value", seed & 0xFFFFFFFFFFFFFFFF, c, lab)).data for lab in sorted(labels)})
        first = BOTTOM if rule.first is None else values[c][rule.first]
        if rule.kind == "u":
            columns.append([first] * N)
            continue
        second = BOTTOM if rule.second is None else values[c][rule.second]
        k = int(round(rule.fraction * N))
        order = rng.permutation(N)
        col = [second] * N
        for i in order[:k]:
            col[i] = first
        columns.append(col)
    observations = [tuple(columns[c][i] for c in range(m)) for i in range(N)]
    honest = range(N) if malicious is None else [i for i in range(N) if not malicious[i]]
    ell = sum(1 for c in range(m) if len({columns[c][i] for i in honest}) > 1)
    return Scenario(spec, rules, observations, values, ell)


# --- strategy interface ---------------------------------------------------------------


class Strategy:
    """Protocol-faithful baseline; subclasses override the hooks they need."""

    name = "honest"
    puppets = True

    def __init__(self, **params):
        self.params = params

    def setup(self, ctx):
        pass

    def alpha(self, ctx, node: int, drawn: int) -> int:
        return drawn

    def observe(self, ctx, node: int, assigned: Tuple) -> Tuple:
        return assigned

    def on_emit(self, ctx, node: int, msg: StepMessage):
        ctx.send(node, msg)

    def action_time(self, ctx, step: int) -> Optional[int]:
        return None

    def on_step(self, ctx, step: int):
        pass

    def relays_certificate(self, ctx, node: int) -> bool:
        return True


class Honest(Strategy):
    name = "honest"


class Crash(Strategy):
    """Faithful until ``after_step``, silent afterwards."""

    name = "crash"

    def __init__(self, after_step: int = 3, **params):
        super().__init__(after_step=after_step, **params)
        self.after_step = int(after_step)

    def on_emit(self, ctx, node, msg):
        if msg.step <= self.after_step:
            ctx.send(node, msg)

    def relays_certificate(self, ctx, node):
        return ctx.puppet_state(node).step <= self.after_step


class Censor(Strategy):
    """Report bottom on targeted components in steps 1-2 and vote 1 on them afterwards."""

    name = "censor"

    def __init__(self, components="all", **params):
        super().__init__(components=components, **params)
        self.components = components

    def _targets(self, m: int) -> List[int]:
        if self.components == "all":
            return list(range(m))
        return [c for c in self.components if 0 <= c < m]

    def on_emit(self, ctx, node, msg):
        targets = self._targets(ctx.m)
        payload = list(msg.payload)
        if is_value_step(msg.step):
            for c in targets:
                payload[c] = BOTTOM
            out = ctx.build(node, msg.step, payload)
        else:
            for c in targets:
                payload[c] = 1
            out = ctx.build(node, msg.step, payload, theta_list(payload, ctx.puppet_state(node).O))
        ctx.send(node, out)


class Equivocator(Strategy):
    """Send two conflicting variants of every message, each to half of the honest nodes."""

    name = "equivocator"
    puppets = False

    def setup(self, ctx):
        order = list(ctx.rng.permutation(ctx.honest))
        half = len(order) // 2
        self.halves = (order[:half], order[half:])
        self.alt = [ctx.crypto.hash(concat(b"equivocate", c)).data for c in range(ctx.m)]

    def action_time(self, ctx, step):
        return ctx.schedule.deadline(step)

    def on_step(self, ctx, s):
        bound = ctx.Lambda if is_value_step(s) else ctx.lam
        ref = [ctx.scenario.value(c, ctx.scenario.rules[min(c, len(ctx.scenario.rules) - 1)].first) for c in range(ctx.m)]
        for node in ctx.malicious_players(s):
            if is_value_step(s):
                a = ctx.build(node, s, ref)
                b = ctx.build(node, s, [self.alt[c] if c % 2 == 0 else BOTTOM for c in range(ctx.m)])
            else:
                zeros, ones = [0] * ctx.m, [1] * ctx.m
                a = ctx.build(node, s, zeros, theta_list(zeros, ref))
                b = ctx.build(node, s, ones, theta_list(ones, ref))
            for msg, half in ((a, self.halves[0]), (b, self.halves[1])):
                delays = ctx.rng.integers(1, max(bound, 1) + 1, size=len(half))
                ctx.send(node, msg, {k: ctx.now + int(d) for k, d in zip(half, delays)})


class Splitter(Strategy):
    """Keep honest nodes split on every component for as long as the counts allow.

    At each step the adversary picks, per component, the bit its votes should
    push (forced by the next step's fixed-coin rule, free before a genuine coin
    flip) and how many honest nodes should see the push, so that the count it
    needs one step later lands in [t_H - M, t_H).
    """

    name = "splitter"
    puppets = False

    def setup(self, ctx):
        self.hp_est = ctx.sortition.n * len(ctx.honest) / ctx.N
        self.ref: List[Optional[bytes]] = [None] * ctx.m
        self.withheld: List[Tuple[Optional[int], StepMessage]] = []
        self.frozen = set()

    def action_time(self, ctx, step):
        return ctx.schedule.deadline(step + 1) - 1

    # -- helpers ---------------------------------------------------------------

    def pushed_bit(self, s_next: int) -> Optional[int]:
        kind = step_kind(s_next)
        return 1 if kind == CF0 else 0 if kind == CF1 else None

    def desired_bit(self, s: int) -> Optional[int]:
        """The bit whose step-``s`` count should land just under t_H."""
        return self.pushed_bit(s + 1)

    def window_mid(self, ctx, s: int) -> float:
        return ctx.t_H - len(ctx.malicious_players(s)) / 2

    def fraction(self, ctx, s_next: int, same: bool) -> float:
        f = self.window_mid(ctx, s_next) / self.hp_est
        f = min(max(f, 0.05), 0.95)
        return f if same else 1 - f

    def deliver_all(self, ctx, node, msg):
        ctx.send(node, msg, {k: ctx.now for k in ctx.honest})

    def feasible(self, count: int, other: int, M: int, t_H: int) -> bool:
        return count < t_H <= count + M and other < t_H

    # -- main hook ---------------------------------------------------------------

    def on_step(self, ctx, s):
        for item in [w for w in self.withheld if w[0] == s]:
            self.withheld.remove(item)
            ctx.release(item[1], ctx.now)
        players = ctx.malicious_players(s)
        if not players or not ctx.active_honest():
            return
        if is_value_step(s):
            self.value_step(ctx, s, players)
        else:
            self.bit_step(ctx, s, players)

    def value_step(self, ctx, s, players):
        M, t_H = len(players), ctx.t_H
        payload, feasible = [], []
        for c in range(ctx.m):
            counts = ctx.honest_value_counts(s, c)
            cands = sorted((x for x in counts if x is not BOTTOM), key=lambda x: (-counts[x], x))
            x = cands[0] if cands else self.ref[c]
            if x is not None and (s == 2 or self.ref[c] is None):
                self.ref[c] = x
            payload.append(x)
            X = counts.get(x, 0) if x is not None else 0
            rest = max((k for v, k in counts.items() if v != x and v is not BOTTOM), default=0)
            if x is not None and self.feasible(X, rest, M, t_H):
                feasible.append(c)
        if s == 1:
            f = self.fraction(ctx, 2, True)
        else:
            # targets grade 2 and vote 0 at step 3
            f = self.fraction(ctx, 3, self.desired_bit(3) == 0)
        targets = ctx.latest_boundaries(s + 1, f)
        for node in players:
            msg = ctx.build(node, s, payload)
            if feasible:
                ctx.straddle(node, msg, targets, s + 1)
            else:
                self.deliver_all(ctx, node, msg)

    def plan_bits(self, ctx, s, M):
        zeros, ones = ctx.honest_bit_counts(s)
        t_H = ctx.t_H
        forced = self.pushed_bit(s + 1)
        bits, feasible, fracs = [], [], []
        for c in range(ctx.m):
            z, o = int(zeros[c]), int(ones[c])
            majority = 0 if z >= o else 1
            if c in self.frozen:
                bits.append(majority)
                continue
            if forced is None:
                options = [b for b in (0, 1) if self.feasible((z, o)[b], (o, z)[b], M, t_H)]
                p = max(options, key=lambda b: ((z, o)[b], -b)) if options else None
            else:
                p = forced if self.feasible((z, o)[forced], (o, z)[forced], M, t_H) else None
            if p is None:
                bits.append(majority)
                continue
            bits.append(p)
            feasible.append(c)
            want = self.desired_bit(s + 1)
            fracs.append(self.fraction(ctx, s + 1, want is None or want == p))
        return bits, feasible, fracs

    def theta(self, bits):
        return theta_list(bits, self.ref)

    def bit_step(self, ctx, s, players):
        bits, feasible, fracs = self.plan_bits(ctx, s, len(players))
        targets = ctx.latest_boundaries(s + 1, float(np.mean(fracs))) if fracs else []
        self.send_bits(ctx, s, players, bits, feasible, targets)

    def send_bits(self, ctx, s, players, bits, feasible, targets):
        for node in players:
            msg = ctx.build(node, s, bits, self.theta(bits))
            if feasible:
                ctx.straddle(node, msg, targets, s + 1)
            else:
                self.deliver_all(ctx, node, msg)


class FinalizationDelayer(Splitter):
    """Privately complete a finalizing threshold and keep it from honest nodes.

    ``bit`` selects the qualifying steps (0: votes of steps 3, 6, ...; 1: votes
    of steps 4, 7, ...). ``release`` is "immediate", "never", or an integer k:
    the withheld votes reach honest nodes k steps after the one in which they
    were cast.
    """

    name = "finalization-delayer"

    def __init__(self, bit: int = 0, release="never", **params):
        super().__init__(bit=bit, release=release, **params)
        self.bit = int(bit)
        self.release_policy = release

    def theta(self, bits):
        # Sign the all-values list whatever the bits say, so pushed 1-votes never
        # help certify the bottom list before the qualifying step.
        return tuple(self.ref)

    def qualifying(self, s: int) -> bool:
        return s >= 3 and (s % 3 == 0 if self.bit == 0 else s % 3 == 1)

    def desired_bit(self, s):
        if self.qualifying(s):
            return self.bit
        return super().desired_bit(s)

    def bit_step(self, ctx, s, players):
        if not self.qualifying(s):
            return super().bit_step(ctx, s, players)
        zeros, ones = ctx.honest_bit_counts(s)
        M, t_H, b = len(players), ctx.t_H, self.bit
        counts = (zeros, ones)
        hit = [
            c for c in range(ctx.m)
            if c not in self.frozen and self.feasible(int(counts[b][c]), int(counts[1 - b][c]), M, t_H)
        ]
        if not hit:
            return super().bit_step(ctx, s, players)
        bits = [b if c in hit else (0 if zeros[c] >= ones[c] else 1) for c in range(ctx.m)]
        self.frozen.update(hit)
        when = None
        if self.release_policy == "immediate":
            when = s
        elif self.release_policy != "never":
            when = s + int(self.release_policy)
        for node in players:
            msg = ctx.build(node, s, bits, self.theta(bits))
            if when == s:
                self.deliver_all(ctx, node, msg)
                continue
            ctx.withhold(node, msg)
            if when is not None:
                self.withheld.append((when, msg))


class CoinGrinder(Splitter):
    """Splitter that, when it owns the smallest credential before a genuine coin
    flip, shows that credential to only part of the honest flippers."""

    name = "coin-grinder"

    def bit_step(self, ctx, s, players):
        if step_kind(s + 1) != CGF:
            return super().bit_step(ctx, s, players)
        bits, feasible, fracs = self.plan_bits(ctx, s, len(players))
        f = float(np.mean(fracs)) if fracs else 0.5
        targets = ctx.latest_boundaries(s + 1, f)
        honest_min = min(
            (ctx.credential_key(msg.credential) for _, msg in ctx.messages(s, honest_only=True)), default=None
        )
        mal = {node: ctx.credential_key(ctx.credential(node, s)) for node in players}
        grinder = min(mal, key=mal.get)
        if honest_min is not None and honest_min < mal[grinder]:
            return self.send_bits(ctx, s, players, bits, feasible, targets)
        others = [k for k in ctx.active_honest() if k not in set(targets)]
        others.sort(key=lambda k: (-ctx.boundary(k, s + 1), k))
        reveal = others[: len(others) // 2]
        rest = [p for p in players if p != grinder]
        self.send_bits(ctx, s, rest, bits, feasible, targets)
        msg = ctx.build(grinder, s, bits, self.theta(bits))
        ctx.straddle(grinder, msg, list(targets) + reveal, s + 1)


STRATEGIES = {
    "honest": Honest,
    "crash": Crash,
    "censor": Censor,
    "equivocator": Equivocator,
    "splitter": Splitter,
    "finalization-delayer": FinalizationDelayer,
    "delayer": FinalizationDelayer,
    "coin-grinder": CoinGrinder,
    "grinder": CoinGrinder,
}


def make_strategy(name: str, params: Optional[dict] = None) -> Strategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown adversary strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    return cls(**(params or {}))


# --- case classification ----------------------------------------------------------------


def shadow_finalizable(sim, c: int) -> Optional[Tuple[int, int]]:
    """First (s', bit) at which t_H distinct players signed the finalizing bit on
    component c, counting every valid message including withheld ones."""
    top = max(sim.boards, default=0)
    for sp in range(4, top + 2):
        r = (sp - 1) % 3
        if r == 2:
            continue
        b = 0 if r == 0 else 1
        board = sim.boards.get(sp - 1)
        if board is None or not board.rows or not sim.m:
            continue
        rows = np.nonzero(board.payload[: board.rows, c] == b)[0]
        if len(set(board.sender[rows].tolist())) >= sim.t_H:
            return sp, b
    return None


def classify_cases(sim) -> List[Tuple[str, int, int, int]]:
    """Per component: (label, s_hat, shadow bit, first honest finalization step).

    The label is 2.1.x when some honest node finalized at s_hat, 2.2.x
    otherwise; x is a for a zero-threshold and b for a one-threshold.
    "certified" means every honest node halted on a certificate before
    reaching s_hat, so no finalization was ever needed.
    """
    out = []
    honest = [sim.states[int(j)] for j in sim.honest_idx]
    reached = max((st.step for st in honest), default=0)
    for c in range(sim.m):
        first = min((st.finalized_at[c] for st in honest if st.f[c]), default=-1)
        found = shadow_finalizable(sim, c)
        if found is None:
            out.append(("none", -1, -1, first))
            continue
        sp, b = found
        if first == -1 and reached < sp:
            out.append(("certified", sp, b, first))
            continue
        case = "2.1" if first == sp else "2.2"
        out.append((f"{case}.{'a' if b == 0 else 'b'}", sp, b, first))
    return out
