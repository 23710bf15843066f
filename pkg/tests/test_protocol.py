from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caap.costmodel import NOMINAL_CONTEXT
from caap.errors import ProtocolError
from caap.protocol import (
    NONCE_RETENTION,
    NONCE_SIZE,
    TAG_SIZE,
    Ack,
    EndpointState,
    HmacSigner,
    KeyRing,
    TransitionMessage,
    VerifyOutcome,
    acknowledge,
    check_deadline,
    commit,
    propose_upgrade,
    rollback,
    sign_proposal,
    verify_proposal,
)

X = replace(NOMINAL_CONTEXT, timestamp_ms=1000)
SECRET = b"shared-test-secret"


def pair(v=2):
    keys = KeyRing(SECRET)
    a = EndpointState("A", keys, current_version=v, context=X)
    b = EndpointState("B", keys, current_version=v, context=X)
    return a, b


def rng(seed=0):
    return np.random.default_rng(seed)


def handshake(a, b, v, r, t=0.0):
    msg, _ = propose_upgrade(a, v, X, r, t)
    out, _ = verify_proposal(b, msg.encode(), t + 10)
    assert out is VerifyOutcome.ACCEPT
    ack, _ = acknowledge(b, msg, t + 10)
    commit(a, ack.encode(), t + 20)
    return msg, ack


# --- signer ------------------------------------------------------------------

def test_signer_round_trip_and_tag_length():
    s = HmacSigner(b"k")
    tag = s.sign(b"hello")
    assert len(tag) == TAG_SIZE and s.verify(b"hello", tag)
    assert not s.verify(b"hellp", tag)
    assert not s.verify(b"hello", tag[:-1])


def test_keys_differ_per_version():
    k = KeyRing(SECRET)
    assert k.signer(2).sign(b"m") != k.signer(3).sign(b"m")
    assert KeyRing(SECRET).signer(2).sign(b"m") == k.signer(2).sign(b"m")


# --- propose -----------------------------------------------------------------

def test_upgrade_proposal_is_signed_under_current_version():
    a, _ = pair()
    msg, st_ = propose_upgrade(a, 3, X, rng())
    assert msg.proposed_version == 3 and len(msg.nonce) == NONCE_SIZE
    assert a.keys.signer(2).verify(msg.signed_bytes(), msg.signature)
    assert st_.pending is not None and st_.pending.deadline_ms == 40.0


def test_equal_version_rekey_is_allowed():
    a, b = pair()
    handshake(a, b, 2, rng())
    assert a.current_version == b.current_version == 2


def test_local_downgrade_refused_before_sending():
    a, _ = pair()
    with pytest.raises(ProtocolError):
        propose_upgrade(a, 1, X, rng())
    assert a.pending is None and a.current_version == 2


def test_second_pending_proposal_refused():
    a, _ = pair()
    propose_upgrade(a, 3, X, rng())
    with pytest.raises(ProtocolError):
        propose_upgrade(a, 4, X, rng(1))


# --- verify ------------------------------------------------------------------

def test_valid_upgrade_accepted():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    assert verify_proposal(b, msg)[0] is VerifyOutcome.ACCEPT
    assert b.current_version == 2  # staged, not committed


def test_replayed_message_is_stale():
    a, b = pair()
    msg, _ = handshake(a, b, 3, rng())
    b.grace_version = 2  # still reachable under the old key
    assert verify_proposal(b, msg)[0] is VerifyOutcome.REJECT_STALE_NONCE
    assert b.current_version == 3


def test_replay_of_unacked_proposal_is_stale():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    verify_proposal(b, msg)
    b.staged = None
    assert verify_proposal(b, msg)[0] is VerifyOutcome.REJECT_STALE_NONCE


def test_modified_version_field_breaks_signature():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    assert verify_proposal(b, replace(msg, proposed_version=4))[0] is VerifyOutcome.REJECT_BAD_SIGNATURE


def test_validly_signed_downgrade_rejected():
    a, b = pair()
    msg = sign_proposal(a, 1, X, rng())
    assert verify_proposal(b, msg)[0] is VerifyOutcome.REJECT_DOWNGRADE
    assert b.current_version == 2


def test_context_mismatch_rejected():
    a, b = pair()
    b.context = replace(X, snr_db=X.snr_db + 1)
    msg, _ = propose_upgrade(a, 3, X, rng())
    assert verify_proposal(b, msg)[0] is VerifyOutcome.REJECT_CONTEXT_MISMATCH


def test_same_bucket_context_matches():
    a, b = pair()
    b.context = replace(X, timestamp_ms=X.timestamp_ms + 50)
    msg, _ = propose_upgrade(a, 3, X, rng())
    assert verify_proposal(b, msg)[0] is VerifyOutcome.ACCEPT


def test_check_order_signature_before_monotonicity():
    a, b = pair()
    msg = sign_proposal(a, 1, X, rng())
    assert verify_proposal(b, replace(msg, signature=bytes(TAG_SIZE)))[0] is VerifyOutcome.REJECT_BAD_SIGNATURE


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200))
def test_verification_is_total_on_arbitrary_bytes(data):
    _, b = pair()
    out, _ = verify_proposal(b, data)
    assert out in set(VerifyOutcome) and out is not VerifyOutcome.ACCEPT
    assert b.current_version == 2


def test_non_message_input_rejected():
    _, b = pair()
    assert verify_proposal(b, None)[0] is VerifyOutcome.REJECT_BAD_SIGNATURE


@settings(max_examples=300, deadline=None)
@given(pos=st.integers(0, 8 * (8 + 32 + 16) - 1), seed=st.integers(0, 2 ** 32 - 1))
def test_any_flipped_signed_bit_is_detected(pos, seed):
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng(seed))
    fields = bytearray(msg.proposed_version.to_bytes(8, "big") + msg.context_digest + msg.nonce)
    fields[pos // 8] ^= 1 << (pos % 8)
    tampered = TransitionMessage(int.from_bytes(fields[:8], "big"), bytes(fields[8:40]), bytes(fields[40:]), msg.signature)
    assert verify_proposal(b, tampered)[0] is VerifyOutcome.REJECT_BAD_SIGNATURE


def test_wire_round_trip():
    a, _ = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    assert TransitionMessage.decode(msg.encode()) == msg
    ack = Ack(msg.nonce, 3, bytes(TAG_SIZE))
    assert Ack.decode(ack.encode()) == ack
    with pytest.raises(ProtocolError):
        Ack.decode(msg.encode())
    with pytest.raises(ProtocolError):
        TransitionMessage.decode(msg.encode() + b"\x00")


# --- acknowledge and commit ----------------------------------------------------

def test_ack_echoes_nonce_and_commits_receiver():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    verify_proposal(b, msg)
    ack, _ = acknowledge(b, msg)
    assert ack.nonce == msg.nonce and ack.confirmed_version == 3
    assert b.keys.signer(2).verify(ack.signed_bytes(), ack.signature)
    assert b.current_version == 3


def test_second_ack_for_same_proposal_fails():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    verify_proposal(b, msg)
    acknowledge(b, msg)
    with pytest.raises(ProtocolError):
        acknowledge(b, msg)


def test_valid_ack_commits_proposer():
    a, b = pair()
    handshake(a, b, 3, rng())
    assert a.current_version == b.current_version == 3
    assert a.pending is None


def test_ack_with_wrong_nonce_rolls_back():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng())
    verify_proposal(b, msg)
    ack, _ = acknowledge(b, msg)
    bad = Ack(bytes(NONCE_SIZE), 3)
    bad = Ack(bad.nonce, 3, a.keys.signer(2).sign(bad.signed_bytes()))
    commit(a, bad, 5)
    assert a.current_version == 2 and a.pending is None
    assert any("rollback" in line for line in a.log)


def test_commit_without_pending_errors_and_keeps_state():
    a, _ = pair()
    with pytest.raises(ProtocolError):
        commit(a, Ack(bytes(NONCE_SIZE), 3, bytes(TAG_SIZE)))
    assert a.current_version == 2


def test_late_ack_rolls_back():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng(), now_ms=0)
    verify_proposal(b, msg)
    ack, _ = acknowledge(b, msg)
    commit(a, ack, now_ms=41)
    assert a.current_version == 2 and a.pending is None


# --- rollback --------------------------------------------------------------------

def test_lost_ack_deadline_keeps_old_version():
    a, _ = pair()
    propose_upgrade(a, 3, X, rng(), now_ms=0)
    assert not check_deadline(a, 40)
    assert check_deadline(a, 40.5)
    assert a.current_version == 2 and a.pending is None


def test_rollback_without_pending_is_noop():
    a, _ = pair()
    before = list(a.log)
    assert rollback(a) is a and a.log == before


def test_reproposal_after_rollback_succeeds():
    a, b = pair()
    propose_upgrade(a, 3, X, rng(0))
    rollback(a)
    msg, _ = handshake(a, b, 3, rng(1))
    assert a.current_version == b.current_version == 3


def test_retry_resyncs_after_receiver_committed_alone():
    a, b = pair()
    msg, _ = propose_upgrade(a, 3, X, rng(0), now_ms=0)
    verify_proposal(b, msg, 10)
    acknowledge(b, msg, 10)  # ack lost in flight
    check_deadline(a, 100)
    assert (a.current_version, b.current_version) == (2, 3)
    handshake(a, b, 3, rng(1), t=100)
    assert a.current_version == b.current_version == 3


def test_set_version_never_decreases():
    a, _ = pair()
    with pytest.raises(ProtocolError):
        a.set_version(1)


def test_nonce_window_is_bounded_fifo():
    _, b = pair()
    for i in range(NONCE_RETENTION + 5):
        b.remember(i.to_bytes(NONCE_SIZE, "big"))
    assert len(b.seen) == len(b.seen_set) == NONCE_RETENTION
    assert (0).to_bytes(NONCE_SIZE, "big") not in b.seen_set


# --- trace properties ------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-2, 3), st.sampled_from(["ok", "drop", "replay", "tamper", "late"])), max_size=12),
       st.integers(0, 2 ** 16))
def test_versions_monotone_and_replays_inert(plan, seed):
    a, b = pair()
    r = rng(seed)
    old = []
    t = 0.0
    for delta, fate in plan:
        t += 100
        v = a.current_version + delta
        try:
            msg, _ = propose_upgrade(a, v, X, r, t)
        except ProtocolError:
            continue
        if fate == "tamper":
            msg = replace(msg, proposed_version=msg.proposed_version + 1)
        out, _ = verify_proposal(b, msg, t + 10)
        if out is VerifyOutcome.ACCEPT:
            ack, _ = acknowledge(b, msg, t + 10)
            old.append(msg)
            if fate == "ok":
                commit(a, ack, t + 20)
            elif fate == "late":
                commit(a, ack, t + 50)
        check_deadline(a, t + 60)
        if fate == "replay" and old:
            snap = (b.current_version, b.staged)
            assert verify_proposal(b, old[0], t + 70)[0] is not VerifyOutcome.ACCEPT
            assert (b.current_version, b.staged) == snap
        assert a.pending is None and b.staged is None
        # a proposer only moves on a receiver's ack, so it never runs ahead
        assert a.current_version <= b.current_version
    for hist in (a.history, b.history):
        assert all(y >= x for x, y in zip(hist, hist[1:]))
