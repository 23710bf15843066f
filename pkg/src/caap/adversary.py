"""Channel-level attacks on the transition protocol and context-manipulation probes."""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from caap.context import ContextVector, degrade_context, perturb_context
from caap.costmodel import (
    ATTACK_MAGNITUDE,
    NOMINAL_CHANNEL,
    NOMINAL_CONTEXT,
    NOMINAL_HARDWARE,
    PROFILE_ORDER,
    Normalizer,
    WeightVector,
    objective_arrays,
    profile_losses,
)
from caap.errors import ProtocolError
from caap.protocol import (
    EndpointState,
    KeyRing,
    TransitionMessage,
    VerifyOutcome,
    acknowledge,
    check_deadline,
    commit,
    propose_upgrade,
    sign_proposal,
    verify_proposal,
)


class AttackKind(str, enum.Enum):
    REPLAY_OLD_VERSION = "ReplayOldVersion"
    FORCED_DOWNGRADE = "ForcedDowngrade"
    COUNTER_TAMPER = "CounterTamper"
    MESSAGE_LOSS = "MessageLoss"
    ASYMMETRIC_UPDATE = "AsymmetricUpdate"
    CONTEXT_MANIPULATION = "ContextManipulation"


@dataclass(frozen=True)
class AttackScenario:
    kind: AttackKind
    magnitude: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")

    @property
    def label(self) -> str:
        if self.kind is AttackKind.CONTEXT_MANIPULATION:
            return f"{self.kind.value}({self.magnitude:g})"
        return self.kind.value


#: One scenario per row of the failure-mode table, plus context injection.
FAILURE_TABLE = (
    AttackScenario(AttackKind.REPLAY_OLD_VERSION),
    AttackScenario(AttackKind.MESSAGE_LOSS),
    AttackScenario(AttackKind.ASYMMETRIC_UPDATE),
    AttackScenario(AttackKind.COUNTER_TAMPER),
    AttackScenario(AttackKind.FORCED_DOWNGRADE),
)

MITIGATION = {
    AttackKind.REPLAY_OLD_VERSION: ("one-time nonce bound to context digest", "rejected as stale"),
    AttackKind.MESSAGE_LOSS: ("proposal/ack commit with deadline", "neither side half-upgraded"),
    AttackKind.ASYMMETRIC_UPDATE: ("signed acknowledgement required", "proposer rolls back, peers resync"),
    AttackKind.COUNTER_TAMPER: ("authentication tag over version", "message discarded"),
    AttackKind.FORCED_DOWNGRADE: ("version never decreases", "cannot succeed"),
    AttackKind.CONTEXT_MANIPULATION: ("context digest comparison", "rejected as mismatched"),
}


@dataclass(frozen=True)
class ChannelSchedule:
    """How the channel treats one upgrade session.

    Honest by default: every message is delivered once after ``one_way_ms``.
    Attack fields say which messages the adversary drops, delays, rewrites
    or injects. ``max_retries`` is the proposer's re-proposal budget after a
    timeout.
    """

    one_way_ms: float = 10.0
    drop_acks: int = 0
    late_acks: int = 0
    late_by_ms: float = 0.0
    tamper_version: bool = False
    rewrite_version_to: int | None = None
    replay_after_commit: bool = False
    inject_signed_downgrade: bool = False
    context_magnitude: float = 0.0
    context_seed: int = 0
    max_retries: int = 3


def apply_attack(scenario: AttackScenario, schedule: ChannelSchedule, current_version: int = 2) -> ChannelSchedule:
    """Return ``schedule`` with the adversary behaviour of ``scenario``."""
    k = scenario.kind
    if k is AttackKind.REPLAY_OLD_VERSION:
        return replace(schedule, replay_after_commit=True)
    if k is AttackKind.FORCED_DOWNGRADE:
        return replace(schedule, rewrite_version_to=max(0, current_version - 1), inject_signed_downgrade=True)
    if k is AttackKind.COUNTER_TAMPER:
        return replace(schedule, tamper_version=True)
    if k is AttackKind.MESSAGE_LOSS:
        return replace(schedule, drop_acks=1)
    if k is AttackKind.ASYMMETRIC_UPDATE:
        # past the 2*RTT deadline, then delivered anyway
        return replace(schedule, late_acks=1, late_by_ms=4.0 * schedule.one_way_ms + 1.0)
    if scenario.magnitude == 0:
        return schedule
    return replace(schedule, context_magnitude=scenario.magnitude)


def _flip_version_byte(payload: bytes) -> bytes:
    b = bytearray(payload)
    b[2 + 7] ^= 0x01  # low byte of the 8-byte version field, after its length prefix
    return bytes(b)


@dataclass
class SessionResult:
    proposer_outcomes: list[str] = field(default_factory=list)
    receiver_outcomes: list[VerifyOutcome] = field(default_factory=list)
    attack_outcomes: list[VerifyOutcome] = field(default_factory=list)
    rollbacks: int = 0
    late_ack_ignored: int = 0
    refused_locally: bool = False
    committed: bool = False
    round_trips: int = 0


def run_session(proposer: EndpointState, receiver: EndpointState, v_next: int, schedule: ChannelSchedule,
                rng: np.random.Generator, start_ms: float = 0.0) -> SessionResult:
    """Drive one upgrade attempt (with retries) over an adversarial channel."""
    res = SessionResult()
    honest_view = receiver.context
    if schedule.context_magnitude > 0:
        receiver.context = perturb_context(receiver.context, schedule.context_magnitude, schedule.context_seed)
    t = start_ms
    drops, lates = schedule.drop_acks, schedule.late_acks
    late_ack = None
    try:
        for attempt in range(1 + schedule.max_retries):
            try:
                msg, _ = propose_upgrade(proposer, v_next, proposer.context, rng, t)
            except ProtocolError:
                res.refused_locally = True
                break
            res.round_trips += 1
            payload = msg.encode()
            if schedule.tamper_version:
                payload = _flip_version_byte(payload)
            if schedule.rewrite_version_to is not None:
                forged = replace(msg, proposed_version=schedule.rewrite_version_to)
                payload = forged.encode()
            t_recv = t + schedule.one_way_ms
            outcome, _ = verify_proposal(receiver, payload, t_recv)
            res.receiver_outcomes.append(outcome)
            deadline = proposer.pending.deadline_ms
            ack_at = None
            if outcome is VerifyOutcome.ACCEPT:
                ack, _ = acknowledge(receiver, TransitionMessage.decode(payload), t_recv)
                if drops > 0:
                    drops -= 1
                else:
                    ack_at = t_recv + schedule.one_way_ms
                    if lates > 0:
                        lates -= 1
                        ack_at += schedule.late_by_ms
                        late_ack = (ack_at, ack)
                        ack_at = None
            if ack_at is not None and ack_at <= deadline:
                commit(proposer, ack, ack_at)
                res.committed = proposer.pending is None and proposer.current_version == v_next
                t = ack_at
                break
            # no ack in time: proposer gives up at the deadline
            t = deadline + 1e-3
            check_deadline(proposer, t)
            res.rollbacks += 1
            if late_ack is not None:
                at, ack = late_ack
                late_ack = None
                t = max(t, at)
                try:
                    commit(proposer, ack, at)
                except ProtocolError:
                    res.late_ack_ignored += 1
            if outcome is not VerifyOutcome.ACCEPT and proposer.current_version == receiver.current_version:
                # rejected outright; retrying the same message content cannot help
                if schedule.context_magnitude > 0 or schedule.tamper_version or schedule.rewrite_version_to is not None:
                    break
        if schedule.replay_after_commit and res.committed:
            outcome, _ = verify_proposal(receiver, msg.encode(), t + schedule.one_way_ms)
            res.attack_outcomes.append(outcome)
        if schedule.inject_signed_downgrade:
            low = max(0, receiver.current_version - 1)
            coerced = sign_proposal(proposer, low, proposer.context, rng)
            outcome, _ = verify_proposal(receiver, coerced, t + schedule.one_way_ms)
            res.attack_outcomes.append(outcome)
            try:
                propose_upgrade(proposer, low, proposer.context, rng, t)
            except ProtocolError:
                res.refused_locally = True
    finally:
        receiver.context = honest_view
    return res


@dataclass
class AttackOutcome:
    scenario: str
    detected: bool
    proposer_version: int
    receiver_version: int
    start_version: int
    notes: str = ""

    @property
    def regressed(self) -> bool:
        return min(self.proposer_version, self.receiver_version) < self.start_version

    @property
    def in_sync(self) -> bool:
        return self.proposer_version == self.receiver_version


def make_pair(seed: int = 0, start_version: int = 2, rtt_ms: float = 20.0, bucket_ms: int = 100):
    """Two endpoints sharing keys and the same context snapshot."""
    rng = np.random.default_rng(seed)
    secret = rng.bytes(32)
    x = perturb_context(NOMINAL_CONTEXT, 0.2, int(rng.integers(0, 2**31)))
    x = replace(x, timestamp_ms=int(rng.integers(0, 10**7)))
    keys = KeyRing(secret)
    a = EndpointState("proposer", keys, start_version, x, bucket_ms, rtt_ms)
    b = EndpointState("receiver", keys, start_version, x, bucket_ms, rtt_ms)
    return a, b


def _monotone(history: Sequence[int]) -> bool:
    return all(b >= a for a, b in zip(history, history[1:]))


def run_scenario(scenario: AttackScenario, proposer: EndpointState, receiver: EndpointState,
                 rng: np.random.Generator, schedule: ChannelSchedule | None = None) -> AttackOutcome:
    start = min(proposer.current_version, receiver.current_version)
    schedule = schedule or ChannelSchedule(one_way_ms=proposer.rtt_ms / 2)
    schedule = apply_attack(scenario, replace(schedule, context_seed=int(rng.integers(0, 2**31))), proposer.current_version)
    res = run_session(proposer, receiver, proposer.current_version + 1, schedule, rng)
    k = scenario.kind
    pv, rv = proposer.current_version, receiver.current_version
    sync = pv == rv
    monotone = _monotone(proposer.history) and _monotone(receiver.history)
    if k is AttackKind.REPLAY_OLD_VERSION:
        detected = bool(res.attack_outcomes) and all(o is VerifyOutcome.REJECT_STALE_NONCE for o in res.attack_outcomes)
    elif k is AttackKind.FORCED_DOWNGRADE:
        detected = (
            all(o is not VerifyOutcome.ACCEPT for o in res.receiver_outcomes)
            and all(o is VerifyOutcome.REJECT_DOWNGRADE for o in res.attack_outcomes)
            and res.refused_locally and pv == rv == start
        )
    elif k is AttackKind.COUNTER_TAMPER:
        detected = all(o is VerifyOutcome.REJECT_BAD_SIGNATURE for o in res.receiver_outcomes) and pv == rv == start
    elif k is AttackKind.MESSAGE_LOSS:
        detected = res.rollbacks >= 1 and sync
    elif k is AttackKind.ASYMMETRIC_UPDATE:
        detected = res.rollbacks >= 1 and res.late_ack_ignored >= 1 and sync
    elif scenario.magnitude > 0:
        detected = all(o is VerifyOutcome.REJECT_CONTEXT_MISMATCH for o in res.receiver_outcomes) and pv == rv == start
    else:
        detected = False
    detected = detected and monotone
    notes = ";".join(o.value for o in res.receiver_outcomes + res.attack_outcomes)
    return AttackOutcome(scenario.label, detected, pv, rv, start, notes)


def run_attack_suite(pair_factory: Callable[[int], tuple[EndpointState, EndpointState]],
                     scenarios: Iterable[AttackScenario], seeds: Iterable[int]) -> list[AttackOutcome]:
    """Run every scenario for every seed, each from a fresh endpoint pair."""
    scenarios = list(scenarios)
    out = []
    for seed in seeds:
        for i, sc in enumerate(scenarios):
            a, b = pair_factory(seed)
            out.append(run_scenario(sc, a, b, np.random.default_rng([seed, i])))
    return out


def scripted_attempts(steps: Sequence[str], seed: int = 0, start_version: int = 2) -> list[int]:
    """Replay a scripted list of "up"/"down" attempts on one endpoint pair.

    An "up" is an honest proposal of the next version. A "down" is a
    validly signed proposal of a lower version from a peer that skips its own
    local check. Returns 1 per accepted attempt and 0 per rejected one.
    """
    a, b = make_pair(seed, start_version)
    rng = np.random.default_rng(seed)
    out = []
    for step in steps:
        if step == "up":
            res = run_session(a, b, a.current_version + 1, ChannelSchedule(one_way_ms=a.rtt_ms / 2), rng)
            out.append(int(res.committed and res.receiver_outcomes[-1] is VerifyOutcome.ACCEPT))
        elif step == "down":
            msg = sign_proposal(a, max(0, a.current_version - 1), a.context, rng)
            outcome, _ = verify_proposal(b, msg)
            out.append(int(outcome is VerifyOutcome.ACCEPT))
        else:
            raise ValueError(f"unknown step {step!r}")
    return out


OUTCOME_COLUMNS = ("scenario", "mitigation", "expected_outcome", "runs", "detected", "regressions", "desynced")


def outcome_table(outcomes: Sequence[AttackOutcome]) -> list[dict]:
    """Aggregate outcomes per scenario into failure-table style rows."""
    rows: dict[str, dict] = {}
    for o in outcomes:
        kind = AttackKind(o.scenario.split("(")[0])
        mitigation, expected = MITIGATION[kind]
        r = rows.setdefault(o.scenario, {
            "scenario": o.scenario, "mitigation": mitigation, "expected_outcome": expected,
            "runs": 0, "detected": 0, "regressions": 0, "desynced": 0,
        })
        r["runs"] += 1
        r["detected"] += int(o.detected)
        r["regressions"] += int(o.regressed)
        r["desynced"] += int(not o.in_sync)
    return list(rows.values())


def outcome_csv(outcomes: Sequence[AttackOutcome]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=OUTCOME_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in outcome_table(outcomes):
        w.writerow(row)
    return buf.getvalue()


# --------------------------------------------------------------------------
# Context manipulation against the selector


@dataclass(frozen=True)
class OrderingReport:
    magnitude: float
    honest_order: tuple[str, ...]
    attacked_order: tuple[str, ...]
    preserved: bool
    # per-profile loss at the manipulated context, normalised as at the honest one
    attacked_costs: tuple[float, ...]
    honest_costs: tuple[float, ...]


def loss_selector(w: WeightVector = WeightVector(), ch=NOMINAL_CHANNEL, hw=NOMINAL_HARDWARE):
    """Selector callable: context -> per-profile loss, as the optimizer sees it."""
    return lambda x: profile_losses(x, w, ch, hw)


def frozen_costs(x_honest: ContextVector, x: ContextVector, w: WeightVector = WeightVector(),
                 ch=NOMINAL_CHANNEL, hw=NOMINAL_HARDWARE) -> np.ndarray:
    """Losses at ``x`` using the normalisation of the honest context, so an
    attack that slows every profile shows up as a cost increase."""
    F0 = objective_arrays(x_honest.numeric()[None, :], ch, hw)[0]
    F = objective_arrays(x.numeric()[None, :], ch, hw)[0]
    norm = Normalizer.over(F0)
    sign = np.array([1.0, 1.0, 1.0, -1.0])
    return np.array([np.dot(w.as_array() * sign, norm.apply(f)) for f in F])


def selection_bias_probe(selector: Callable[[ContextVector], np.ndarray] | None = None,
                         magnitudes: Sequence[float] = (0.0, ATTACK_MAGNITUDE),
                         x: ContextVector = NOMINAL_CONTEXT,
                         w: WeightVector = WeightVector()) -> list[OrderingReport]:
    """Compare the selector's profile ordering at ``x`` with the ordering under
    a directed degradation of SNR, PER and CPU load by each magnitude."""
    selector = selector or loss_selector(w)
    honest = np.asarray(selector(x))
    h_order = tuple(PROFILE_ORDER[i].value for i in np.argsort(honest, kind="stable"))
    out = []
    for m in magnitudes:
        xa = degrade_context(x, m)
        attacked = np.asarray(selector(xa))
        a_order = tuple(PROFILE_ORDER[i].value for i in np.argsort(attacked, kind="stable"))
        out.append(OrderingReport(
            float(m), h_order, a_order, a_order == h_order,
            tuple(float(v) for v in frozen_costs(x, xa, w)), tuple(float(v) for v in frozen_costs(x, x, w)),
        ))
    return out


def first_inversion(selector=None, x: ContextVector = NOMINAL_CONTEXT, step: float = 0.01, limit: float = 1.0) -> float | None:
    """Smallest grid magnitude at which the ordering breaks, if any."""
    grid = np.round(np.arange(0.0, limit + step / 2, step), 10)
    for r in selection_bias_probe(selector, grid, x):
        if not r.preserved:
            return r.magnitude
    return None


def parse_scenario(label: str) -> AttackScenario:
    """``"MessageLoss"`` or ``"ContextManipulation(0.05)"`` -> scenario."""
    label = label.strip()
    name, _, rest = label.partition("(")
    try:
        kind = AttackKind(name)
    except ValueError:
        raise ValueError(f"unknown attack {name!r}") from None
    if not rest:
        return AttackScenario(kind)
    if not rest.endswith(")"):
        raise ValueError(f"malformed scenario {label!r}")
    return AttackScenario(kind, float(rest[:-1]))
