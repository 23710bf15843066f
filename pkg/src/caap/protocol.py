"""Two-endpoint monotonic version transition with two-phase confirmation.

Wire encoding (all integers big-endian). Every field is preceded by a
2-byte length:

    TransitionMessage: version (8) | context digest (32) | nonce (16) | tag (32)
    Ack:               b"ACK" (3) | version (8) | nonce (16) | tag (32)

The tag of a proposal covers the encoding of the first three fields; the
tag of an ack covers its first three. Tags are HMAC-SHA256 under a key
derived per version from a pre-shared secret.

Receivers verify in a fixed order: tag, monotonicity, context digest,
nonce freshness. The receiver commits when it emits the ack, the proposer
when a valid ack arrives before the deadline (twice the round-trip
estimate). A proposer that times out rolls back; if the receiver had
already committed, the proposer's retry of the same version reconciles
the pair (see ``EndpointState.grace_version``).
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import os
import struct
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field

from caap.context import DIGEST_SIZE, ContextVector, context_hash
from caap.errors import ProtocolError

VERSION_SIZE = 8
NONCE_SIZE = 16
TAG_SIZE = 32
NONCE_RETENTION = 10_000
_ACK_MAGIC = b"ACK"


class VerifyOutcome(str, enum.Enum):
    ACCEPT = "Accept"
    REJECT_DOWNGRADE = "RejectDowngrade"
    REJECT_STALE_NONCE = "RejectStaleNonce"
    REJECT_CONTEXT_MISMATCH = "RejectContextMismatch"
    REJECT_BAD_SIGNATURE = "RejectBadSignature"
    REJECT_TIMEOUT = "RejectTimeout"


class Signer(ABC):
    tag_size: int

    @abstractmethod
    def sign(self, data: bytes) -> bytes: ...

    @abstractmethod
    def verify(self, data: bytes, tag: bytes) -> bool: ...


class HmacSigner(Signer):
    tag_size = TAG_SIZE

    def __init__(self, key: bytes):
        self._key = bytes(key)

    def sign(self, data: bytes) -> bytes:
        return hmac.new(self._key, data, hashlib.sha256).digest()

    def verify(self, data: bytes, tag: bytes) -> bool:
        return len(tag) == self.tag_size and hmac.compare_digest(self.sign(data), tag)


class KeyRing:
    """Pre-shared per-version signing keys derived from one secret."""

    def __init__(self, secret: bytes):
        self._secret = bytes(secret)
        self._cache: dict[int, HmacSigner] = {}

    def signer(self, version: int) -> Signer:
        if version not in self._cache:
            key = hmac.new(self._secret, b"caap-version" + version.to_bytes(VERSION_SIZE, "big"), hashlib.sha256).digest()
            self._cache[version] = HmacSigner(key)
        return self._cache[version]


def _field(b: bytes) -> bytes:
    return struct.pack(">H", len(b)) + b


def _read_fields(data: bytes, sizes: tuple[int, ...]) -> list[bytes]:
    out, pos = [], 0
    for size in sizes:
        if pos + 2 > len(data):
            raise ProtocolError("truncated message")
        (n,) = struct.unpack_from(">H", data, pos)
        pos += 2
        if n != size or pos + n > len(data):
            raise ProtocolError(f"field length {n}, expected {size}")
        out.append(data[pos:pos + n])
        pos += n
    if pos != len(data):
        raise ProtocolError("trailing bytes")
    return out


def _version_bytes(v: int) -> bytes:
    if not 0 <= v < 2 ** 64:
        raise ProtocolError(f"version {v} outside unsigned 64-bit range")
    return v.to_bytes(VERSION_SIZE, "big")


@dataclass(frozen=True)
class TransitionMessage:
    proposed_version: int
    context_digest: bytes
    nonce: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _field(_version_bytes(self.proposed_version)) + _field(self.context_digest) + _field(self.nonce)

    def encode(self) -> bytes:
        return self.signed_bytes() + _field(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "TransitionMessage":
        v, d, n, s = _read_fields(bytes(data), (VERSION_SIZE, DIGEST_SIZE, NONCE_SIZE, TAG_SIZE))
        return cls(int.from_bytes(v, "big"), d, n, s)


@dataclass(frozen=True)
class Ack:
    nonce: bytes
    confirmed_version: int
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        return _field(_ACK_MAGIC) + _field(_version_bytes(self.confirmed_version)) + _field(self.nonce)

    def encode(self) -> bytes:
        return self.signed_bytes() + _field(self.signature)

    @classmethod
    def decode(cls, data: bytes) -> "Ack":
        magic, v, n, s = _read_fields(bytes(data), (len(_ACK_MAGIC), VERSION_SIZE, NONCE_SIZE, TAG_SIZE))
        if magic != _ACK_MAGIC:
            raise ProtocolError("not an ack")
        return cls(n, int.from_bytes(v, "big"), s)


@dataclass
class Pending:
    message: TransitionMessage
    deadline_ms: float
    signed_under: int


@dataclass
class EndpointState:
    """Protocol state of one endpoint. Single owner; mutated in place.

    ``grace_version`` is the version this endpoint left when it last
    committed as a receiver. Until a proposal signed under the new version
    arrives, proposals signed under the grace version are still
    authenticated, so a proposer that missed the ack can re-propose and
    converge. It never relaxes the monotonic check.
    """

    name: str
    keys: KeyRing
    current_version: int = 1
    context: ContextVector | None = None
    bucket_ms: int = 100
    rtt_ms: float = 20.0
    seen: deque = field(default_factory=lambda: deque(maxlen=NONCE_RETENTION))
    seen_set: set = field(default_factory=set)
    pending: Pending | None = None
    staged: tuple[TransitionMessage, int] | None = None
    grace_version: int | None = None
    log: list[str] = field(default_factory=list)
    history: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.current_version < 0:
            raise ValueError("version must be non-negative")
        self.history.append(self.current_version)

    def note(self, now_ms: float, event: str, detail: str = "") -> None:
        self.log.append(f"{now_ms:.3f} {self.name} {event} {detail}".rstrip())

    def remember(self, nonce: bytes) -> None:
        if len(self.seen) == self.seen.maxlen:
            self.seen_set.discard(self.seen[0])
        self.seen.append(nonce)
        self.seen_set.add(nonce)

    def set_version(self, v: int) -> None:
        if v < self.current_version:
            raise ProtocolError(f"{self.name}: refusing to move from {self.current_version} to {v}")
        self.current_version = v
        self.history.append(v)

    def digest(self) -> bytes:
        if self.context is None:
            raise ProtocolError(f"{self.name}: no local context view")
        return context_hash(self.context, self.bucket_ms)


def _nonce(rng) -> bytes:
    if rng is None:
        return os.urandom(NONCE_SIZE)
    return bytes(rng.bytes(NONCE_SIZE))


def sign_proposal(state: EndpointState, version: int, x: ContextVector, rng=None) -> TransitionMessage:
    """Build and sign a proposal without any local policy checks.

    Used by :func:`propose_upgrade` and by tests that model a misbehaving
    peer holding valid keys.
    """
    digest = context_hash(x, state.bucket_ms)
    unsigned = TransitionMessage(version, digest, _nonce(rng))
    tag = state.keys.signer(state.current_version).sign(unsigned.signed_bytes())
    return TransitionMessage(version, digest, unsigned.nonce, tag)


def propose_upgrade(state: EndpointState, v_next: int, x: ContextVector, rng=None, now_ms: float = 0.0):
    """Sign a proposal for ``v_next`` and mark it pending."""
    if v_next < state.current_version:
        state.note(now_ms, "refuse", f"downgrade {state.current_version}->{v_next}")
        raise ProtocolError(f"refusing to propose {v_next} below active version {state.current_version}")
    if state.pending is not None:
        raise ProtocolError("a proposal is already pending")
    msg = sign_proposal(state, v_next, x, rng)
    state.pending = Pending(msg, now_ms + 2.0 * state.rtt_ms, state.current_version)
    state.note(now_ms, "send-proposal", f"v={v_next} nonce={msg.nonce.hex()}")
    return msg, state


def verify_proposal(state: EndpointState, msg, now_ms: float = 0.0):
    """Check an incoming proposal; never raises on hostile input."""
    if isinstance(msg, (bytes, bytearray)):
        try:
            msg = TransitionMessage.decode(msg)
        except ProtocolError:
            return _reject(state, now_ms, VerifyOutcome.REJECT_BAD_SIGNATURE, "malformed")
    if not isinstance(msg, TransitionMessage):
        return _reject(state, now_ms, VerifyOutcome.REJECT_BAD_SIGNATURE, "malformed")
    try:
        data = msg.signed_bytes()
    except ProtocolError:
        return _reject(state, now_ms, VerifyOutcome.REJECT_BAD_SIGNATURE, "malformed")
    candidates = [state.current_version]
    if state.grace_version is not None:
        candidates.append(state.grace_version)
    signed_under = next((v for v in candidates if state.keys.signer(v).verify(data, msg.signature)), None)
    if signed_under is None:
        return _reject(state, now_ms, VerifyOutcome.REJECT_BAD_SIGNATURE)
    if msg.proposed_version < state.current_version:
        return _reject(state, now_ms, VerifyOutcome.REJECT_DOWNGRADE, f"{state.current_version}->{msg.proposed_version}")
    if state.context is None or not hmac.compare_digest(msg.context_digest, state.digest()):
        return _reject(state, now_ms, VerifyOutcome.REJECT_CONTEXT_MISMATCH)
    if msg.nonce in state.seen_set:
        return _reject(state, now_ms, VerifyOutcome.REJECT_STALE_NONCE)
    state.remember(msg.nonce)
    if signed_under == state.current_version:
        state.grace_version = None
    state.staged = (msg, signed_under)
    state.note(now_ms, "recv-proposal", f"Accept v={msg.proposed_version}")
    return VerifyOutcome.ACCEPT, state


def _reject(state, now_ms, outcome: VerifyOutcome, detail: str = ""):
    state.note(now_ms, "recv-proposal", f"{outcome.value} {detail}".rstrip())
    return outcome, state


def acknowledge(state: EndpointState, msg: TransitionMessage, now_ms: float = 0.0):
    """Sign the ack for the staged proposal and commit to its version."""
    if state.staged is None or state.staged[0].nonce != msg.nonce:
        raise ProtocolError("no staged proposal for this message")
    staged, signed_under = state.staged
    unsigned = Ack(staged.nonce, staged.proposed_version)
    ack = Ack(unsigned.nonce, unsigned.confirmed_version, state.keys.signer(signed_under).sign(unsigned.signed_bytes()))
    state.staged = None
    if staged.proposed_version != state.current_version:
        state.grace_version = state.current_version
    state.set_version(staged.proposed_version)
    state.note(now_ms, "send-ack", f"commit v={staged.proposed_version}")
    return ack, state


def commit(state: EndpointState, ack, now_ms: float = 0.0) -> EndpointState:
    """Adopt the pending version on a valid, timely ack; otherwise roll back."""
    if state.pending is None:
        state.note(now_ms, "recv-ack", "ignored: nothing pending")
        raise ProtocolError("no pending proposal")
    pend = state.pending
    if now_ms > pend.deadline_ms:
        state.note(now_ms, "recv-ack", VerifyOutcome.REJECT_TIMEOUT.value)
        return rollback(state, now_ms, "ack after deadline")
    if isinstance(ack, (bytes, bytearray)):
        try:
            ack = Ack.decode(ack)
        except ProtocolError:
            return rollback(state, now_ms, "malformed ack")
    try:
        valid = state.keys.signer(pend.signed_under).verify(ack.signed_bytes(), ack.signature)
    except ProtocolError:
        valid = False
    if not valid or ack.nonce != pend.message.nonce or ack.confirmed_version != pend.message.proposed_version:
        state.note(now_ms, "recv-ack", "invalid")
        return rollback(state, now_ms, "invalid ack")
    state.pending = None
    state.set_version(pend.message.proposed_version)
    state.note(now_ms, "commit", f"v={state.current_version}")
    return state


def check_deadline(state: EndpointState, now_ms: float) -> bool:
    """Roll back a pending proposal whose deadline has passed."""
    if state.pending is not None and now_ms > state.pending.deadline_ms:
        state.note(now_ms, "timeout", VerifyOutcome.REJECT_TIMEOUT.value)
        rollback(state, now_ms, "deadline expired")
        return True
    return False


def rollback(state: EndpointState, now_ms: float = 0.0, reason: str = "") -> EndpointState:
    if state.pending is None:
        return state
    state.pending = None
    state.note(now_ms, "rollback", f"stay v={state.current_version} {reason}".rstrip())
    return state
