"""Shared domain vocabulary: identities, wallets, messages, amounts, errors.

Everything here is an immutable value with no I/O; the engines own all
mutation. Wire encoding is UTF-8 JSON with snake_case field names, token
amounts as decimal strings and 32-byte identifiers as base58.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

U64_MAX = 2**64 - 1
MAX_BODY_BYTES = 64 * 1024

AGENT_ID_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")
# an @-token counts as a mention only when delimited by non-id characters
MENTION_RE = re.compile(r"(?<![A-Za-z0-9_-])@([A-Za-z0-9_-]{1,64})(?![A-Za-z0-9_-])")

_B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_B58_INDEX = {c: i for i, c in enumerate(_B58_ALPHABET)}


class ErrorCode(str, Enum):
    InvalidInputLength = "InvalidInputLength"
    EmptyAgents = "EmptyAgents"
    TooManyAgents = "TooManyAgents"
    InvalidVaultMint = "InvalidVaultMint"
    ZeroCap = "ZeroCap"
    CapTooSmall = "CapTooSmall"
    ZeroAmount = "ZeroAmount"
    UnknownAgent = "UnknownAgent"
    UnknownThread = "UnknownThread"
    UnknownSession = "UnknownSession"
    NotParticipant = "NotParticipant"
    ThreadClosed = "ThreadClosed"
    DuplicateAgent = "DuplicateAgent"
    DuplicateSession = "DuplicateSession"
    AlreadyClaimed = "AlreadyClaimed"
    AlreadyRefunded = "AlreadyRefunded"
    CapExceeded = "CapExceeded"
    DeadlinePassed = "DeadlinePassed"
    DeadlineNotReached = "DeadlineNotReached"
    BadSignature = "BadSignature"
    InsufficientVault = "InsufficientVault"
    Unauthorized = "Unauthorized"
    Timeout = "Timeout"
    UnknownTool = "UnknownTool"


class CoralError(Exception):
    """Protocol-level failure; `code.value` is the exact wire error name."""

    def __init__(self, code: ErrorCode, detail: str = ""):
        super().__init__(f"{code.value}: {detail}" if detail else code.value)
        self.code = code
        self.detail = detail


def validate_agent_id(value: str) -> str:
    if not isinstance(value, str) or not AGENT_ID_RE.match(value):
        raise CoralError(
            ErrorCode.InvalidInputLength,
            f"agent id must match [A-Za-z0-9_-]{{1,64}}, got {value!r}",
        )
    return value


def b58encode(raw: bytes) -> str:
    n = int.from_bytes(raw, "big")
    out = []
    while n:
        n, rem = divmod(n, 58)
        out.append(_B58_ALPHABET[rem])
    pad = 0
    for byte in raw:
        if byte == 0:
            pad += 1
        else:
            break
    return "1" * pad + "".join(reversed(out))


def b58decode(text: str, length: Optional[int] = None) -> bytes:
    n = 0
    for c in text:
        if c not in _B58_INDEX:
            raise ValueError(f"invalid base58 character {c!r}")
        n = n * 58 + _B58_INDEX[c]
    raw = n.to_bytes((n.bit_length() + 7) // 8, "big")
    pad = len(text) - len(text.lstrip("1"))
    raw = b"\x00" * pad + raw
    if length is not None and len(raw) != length:
        raise ValueError(f"expected {length} bytes, decoded {len(raw)}")
    return raw


@dataclass(frozen=True, order=True)
class WalletAddress:
    """Fixed 32-byte account identifier, base58 on the wire and in logs."""

    raw: bytes

    def __post_init__(self):
        if not isinstance(self.raw, bytes) or len(self.raw) != 32:
            raise ValueError("wallet address must be exactly 32 bytes")

    @property
    def base58(self) -> str:
        return b58encode(self.raw)

    @classmethod
    def from_base58(cls, text: str) -> "WalletAddress":
        return cls(b58decode(text, length=32))

    def __str__(self) -> str:
        return self.base58


def checked_amount(value: int) -> int:
    """Validate a token amount as an unsigned 64-bit integer."""
    if not isinstance(value, int) or isinstance(value, bool):
        raise CoralError(ErrorCode.ZeroAmount, f"amount must be an integer, got {value!r}")
    if value < 0 or value > U64_MAX:
        raise CoralError(ErrorCode.ZeroAmount, f"amount {value} outside u64 range")
    return value


def checked_add(a: int, b: int) -> int:
    total = checked_amount(a) + checked_amount(b)
    if total > U64_MAX:
        raise CoralError(ErrorCode.ZeroAmount, f"u64 overflow: {a} + {b}")
    return total


def checked_sub(a: int, b: int) -> int:
    if checked_amount(b) > checked_amount(a):
        raise CoralError(ErrorCode.InsufficientVault, f"u64 underflow: {a} - {b}")
    return a - b


def parse_amount(value) -> int:
    """Parse a wire-format amount (decimal string, or int from trusted code)."""
    if isinstance(value, str):
        if not value.isdigit():
            raise CoralError(ErrorCode.ZeroAmount, f"malformed amount {value!r}")
        value = int(value)
    return checked_amount(value)


@dataclass(frozen=True)
class AgentRecord:
    id: str
    public_key: bytes  # Ed25519 point, 32 bytes
    capabilities: str
    payment_wallet: WalletAddress
    registered_at: int

    def to_wire(self) -> dict:
        return {
            "id": self.id,
            "public_key": b58encode(self.public_key),
            "capabilities": self.capabilities,
            "payment_wallet": self.payment_wallet.base58,
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "AgentRecord":
        return cls(
            id=obj["id"],
            public_key=b58decode(obj["public_key"], length=32),
            capabilities=obj["capabilities"],
            payment_wallet=WalletAddress.from_base58(obj["payment_wallet"]),
            registered_at=int(obj["registered_at"]),
        )


@dataclass(frozen=True)
class Message:
    thread: str
    seq: int
    sender: str
    body: str
    mentions: tuple[str, ...]
    sent_at: int

    def to_wire(self) -> dict:
        return {
            "thread": self.thread,
            "seq": self.seq,
            "sender": self.sender,
            "body": self.body,
            "mentions": list(self.mentions),
            "sent_at": self.sent_at,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "Message":
        return cls(
            thread=obj["thread"],
            seq=int(obj["seq"]),
            sender=obj["sender"],
            body=obj["body"],
            mentions=tuple(obj["mentions"]),
            sent_at=int(obj["sent_at"]),
        )


class ThreadState(str, Enum):
    Open = "Open"
    Closed = "Closed"


@dataclass(frozen=True)
class ThreadSnapshot:
    id: str
    creator: str
    participants: frozenset[str]
    messages: tuple[Message, ...]
    state: ThreadState
    summary: Optional[str] = None

    def to_wire(self) -> dict:
        return {
            "id": self.id,
            "creator": self.creator,
            "participants": sorted(self.participants),
            "messages": [m.to_wire() for m in self.messages],
            "state": self.state.value,
            "summary": self.summary,
        }


@dataclass(frozen=True)
class MentionEvent:
    recipient: str
    message: Message

    def to_wire(self) -> dict:
        return {"recipient": self.recipient, "message": self.message.to_wire()}

    @classmethod
    def from_wire(cls, obj: dict) -> "MentionEvent":
        return cls(recipient=obj["recipient"], message=Message.from_wire(obj["message"]))


def parse_mentions(body: str, participants: Iterable[str]) -> list[str]:
    """Extract participant ids referenced as @<id> tokens in the body.

    Returns first-occurrence order, deduplicated; @-tokens naming
    non-participants are ignored.
    """
    members = set(participants)
    seen: list[str] = []
    for match in MENTION_RE.finditer(body):
        candidate = match.group(1)
        if candidate in members and candidate not in seen:
            seen.append(candidate)
    return seen
