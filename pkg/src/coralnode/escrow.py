"""Session-vault escrow over a deterministic simulated token ledger.

A session locks a budget in a single vault account; listed agents may each
withdraw at most once, up to a per-agent cap, before the claim deadline;
after the deadline the authority (or its delegated operator) sweeps the
remainder back. Every token movement lands on an append-only, densely
indexed ledger that can be replayed to reconstruct all balances.
"""

from __future__ import annotations

import csv
import hashlib
import io
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from .clock import ManualClock
from .types import (
    CoralError,
    ErrorCode,
    WalletAddress,
    b58encode,
    checked_add,
    checked_amount,
    checked_sub,
    validate_agent_id,
)

MAX_AGENTS = 32
MIN_CAP_LAMPORTS = 1000
DEFAULT_CLAIM_WINDOW_SECONDS = 21_600  # six hours

AUDIT_CSV_HEADER = ["index", "kind", "session_id", "from", "to", "amount", "memo", "timestamp"]


class EntryKind(str, Enum):
    Mint = "Mint"
    Deposit = "Deposit"
    Claim = "Claim"
    Refund = "Refund"


@dataclass(frozen=True)
class LedgerEntry:
    index: int
    kind: EntryKind
    session_id: Optional[str]
    src: WalletAddress
    dst: WalletAddress
    amount: int
    memo: str
    timestamp: int
    signature: Optional[bytes] = None

    def to_wire(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "session_id": self.session_id,
            "from": self.src.base58,
            "to": self.dst.base58,
            "amount": str(self.amount),
            "memo": self.memo,
            "timestamp": self.timestamp,
            "signature": b58encode(self.signature) if self.signature else None,
        }

    def csv_row(self) -> list[str]:
        return [
            str(self.index),
            self.kind.value,
            self.session_id or "",
            self.src.base58,
            self.dst.base58,
            str(self.amount),
            self.memo,
            str(self.timestamp),
        ]


# the faucet "wallet" from which simulated mints originate
FAUCET = WalletAddress(b"\x00" * 32)


class TokenLedger:
    """Simulated chain: per-(wallet, mint) balances plus the immutable entry list."""

    def __init__(self, clock: ManualClock):
        self.clock = clock
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []
        self._balances: dict[tuple[str, str], int] = {}

    def balance(self, wallet: WalletAddress, mint: str) -> int:
        with self._lock:
            return self._balances.get((wallet.base58, mint), 0)

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def mint(self, to: WalletAddress, mint: str, amount: int, memo: str = "") -> LedgerEntry:
        if checked_amount(amount) == 0:
            raise CoralError(ErrorCode.ZeroAmount, "cannot mint zero")
        with self._lock:
            key = (to.base58, mint)
            self._balances[key] = checked_add(self._balances.get(key, 0), amount)
            entry = LedgerEntry(
                index=len(self._entries),
                kind=EntryKind.Mint,
                session_id=None,
                src=FAUCET,
                dst=to,
                amount=amount,
                memo=memo,
                timestamp=self.clock.now(),
            )
            self._entries.append(entry)
            return entry

    def transfer(
        self,
        src: WalletAddress,
        dst: WalletAddress,
        mint: str,
        amount: int,
        kind: EntryKind,
        session_id: str,
        signature: Optional[bytes] = None,
    ) -> LedgerEntry:
        """Move tokens and append the audit entry atomically. Zero-amount
        transfers are allowed only for Refund entries (empty-vault sweep)."""
        checked_amount(amount)
        with self._lock:
            src_key = (src.base58, mint)
            src_balance = self._balances.get(src_key, 0)
            if amount > src_balance:
                raise CoralError(
                    ErrorCode.InsufficientVault,
                    f"{src.base58} holds {src_balance}, needs {amount}",
                )
            dst_key = (dst.base58, mint)
            self._balances[src_key] = checked_sub(src_balance, amount)
            self._balances[dst_key] = checked_add(self._balances.get(dst_key, 0), amount)
            entry = LedgerEntry(
                index=len(self._entries),
                kind=kind,
                session_id=session_id,
                src=src,
                dst=dst,
                amount=amount,
                memo=f"session:{session_id}",
                timestamp=self.clock.now(),
                signature=signature,
            )
            self._entries.append(entry)
            return entry

    def audit_csv(self, session_id: Optional[str] = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(AUDIT_CSV_HEADER)
        for entry in self.entries():
            if session_id is None or entry.memo == f"session:{session_id}":
                writer.writerow(entry.csv_row())
        return buf.getvalue()


def vault_wallet(session_id: str) -> WalletAddress:
    """Program-derived vault account for a session: one vault per session."""
    return WalletAddress(hashlib.sha256(b"coral-vault:" + session_id.encode("utf-8")).digest())


def claim_signing_payload(session_id: str, agent_id: str, amount: int, mint: str) -> bytes:
    """Canonical byte string an agent's developer key must sign to claim."""
    return f"coral-claim|{session_id}|{agent_id}|{amount}|{mint}".encode("utf-8")


@dataclass(frozen=True)
class SessionSnapshot:
    session_id: str
    authority: WalletAddress
    operator: WalletAddress
    mint: str
    claim_deadline: int
    agent_ids: tuple[str, ...]
    payment_wallets: tuple[WalletAddress, ...]
    developer_pubkeys: tuple[bytes, ...]
    max_caps: tuple[int, ...]
    claimed: tuple[bool, ...]
    vault_balance: int
    deposited_total: int
    claimed_total: int
    refunded: bool
    refunded_amount: int

    def to_wire(self) -> dict:
        return {
            "session_id": self.session_id,
            "authority": self.authority.base58,
            "operator": self.operator.base58,
            "mint": self.mint,
            "claim_deadline": self.claim_deadline,
            "agent_ids": list(self.agent_ids),
            "payment_wallets": [w.base58 for w in self.payment_wallets],
            "developer_pubkeys": [b58encode(k) for k in self.developer_pubkeys],
            "max_caps": [str(c) for c in self.max_caps],
            "claimed": list(self.claimed),
            "vault_balance": str(self.vault_balance),
            "deposited_total": str(self.deposited_total),
            "claimed_total": str(self.claimed_total),
            "refunded": self.refunded,
            "refunded_amount": str(self.refunded_amount),
        }


class _Session:
    def __init__(self, snapshot_fields: dict):
        self.__dict__.update(snapshot_fields)
        self.lock = threading.Lock()

    def snapshot(self) -> SessionSnapshot:
        return SessionSnapshot(
            session_id=self.session_id,
            authority=self.authority,
            operator=self.operator,
            mint=self.mint,
            claim_deadline=self.claim_deadline,
            agent_ids=tuple(self.agent_ids),
            payment_wallets=tuple(self.payment_wallets),
            developer_pubkeys=tuple(self.developer_pubkeys),
            max_caps=tuple(self.max_caps),
            claimed=tuple(self.claimed),
            vault_balance=self.vault_balance,
            deposited_total=self.deposited_total,
            claimed_total=self.claimed_total,
            refunded=self.refunded,
            refunded_amount=self.refunded_amount,
        )


def verify_claim_signature(public_key: bytes, payload: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


class EscrowEngine:
    def __init__(
        self,
        ledger: TokenLedger,
        clock: ManualClock,
        max_agents: int = MAX_AGENTS,
        min_cap: int = MIN_CAP_LAMPORTS,
        claim_window: int = DEFAULT_CLAIM_WINDOW_SECONDS,
    ):
        self.ledger = ledger
        self.clock = clock
        self.max_agents = max_agents
        self.min_cap = min_cap
        self.claim_window = claim_window
        self._sessions: dict[str, _Session] = {}
        self._sessions_lock = threading.Lock()
        # observers get (agent_id, claim-info dict) after a successful claim
        self.on_claimed: list[Callable[[str, dict], None]] = []

    # -- lifecycle ---------------------------------------------------------

    def init_session(
        self,
        authority: WalletAddress,
        operator: WalletAddress,
        session_id: str,
        mint: str,
        agent_ids: list[str],
        payment_wallets: list[WalletAddress],
        developer_pubkeys: list[bytes],
        max_caps: list[int],
        vault_mint: Optional[str] = None,
    ) -> SessionSnapshot:
        """Create a session vault. Validation order is fixed: input lengths,
        emptiness, agent-count bound, vault mint, zero caps, minimum caps."""
        if not session_id:
            raise CoralError(ErrorCode.InvalidInputLength, "empty session_id")
        if (
            len(agent_ids) != len(payment_wallets)
            or len(agent_ids) != len(developer_pubkeys)
            or len(agent_ids) != len(max_caps)
        ):
            raise CoralError(ErrorCode.InvalidInputLength, "parallel lists differ in length")
        if len(agent_ids) == 0:
            raise CoralError(ErrorCode.EmptyAgents, "at least one agent required")
        if len(agent_ids) > self.max_agents:
            raise CoralError(ErrorCode.TooManyAgents, f"{len(agent_ids)} > {self.max_agents}")
        if vault_mint is not None and vault_mint != mint:
            raise CoralError(ErrorCode.InvalidVaultMint, f"{vault_mint} != {mint}")
        for cap in max_caps:
            if checked_amount(cap) == 0:
                raise CoralError(ErrorCode.ZeroCap, "cap must be positive")
            if cap < self.min_cap:
                raise CoralError(ErrorCode.CapTooSmall, f"cap {cap} < {self.min_cap}")
        for agent_id in agent_ids:
            validate_agent_id(agent_id)
        fields = dict(
            session_id=session_id,
            authority=authority,
            operator=operator,
            mint=mint,
            claim_deadline=self.clock.now() + self.claim_window,
            agent_ids=list(agent_ids),
            payment_wallets=list(payment_wallets),
            developer_pubkeys=list(developer_pubkeys),
            max_caps=list(max_caps),
            claimed=[False] * len(agent_ids),
            vault_balance=0,
            deposited_total=0,
            claimed_total=0,
            refunded=False,
            refunded_amount=0,
        )
        with self._sessions_lock:
            if session_id in self._sessions:
                raise CoralError(ErrorCode.DuplicateSession, session_id)
            session = _Session(fields)
            self._sessions[session_id] = session
        return session.snapshot()

    def _session(self, session_id: str) -> _Session:
        with self._sessions_lock:
            try:
                return self._sessions[session_id]
            except KeyError:
                raise CoralError(ErrorCode.UnknownSession, session_id) from None

    def deposit(
        self,
        depositor: WalletAddress,
        session_id: str,
        amount: int,
        depositor_mint: Optional[str] = None,
    ) -> LedgerEntry:
        if checked_amount(amount) == 0:
            raise CoralError(ErrorCode.ZeroAmount, "deposit must be positive")
        session = self._session(session_id)
        with session.lock:
            if session.refunded:
                raise CoralError(ErrorCode.AlreadyRefunded, session_id)
            if depositor_mint is not None and depositor_mint != session.mint:
                raise CoralError(ErrorCode.InvalidVaultMint, f"{depositor_mint} != {session.mint}")
            entry = self.ledger.transfer(
                src=depositor,
                dst=vault_wallet(session_id),
                mint=session.mint,
                amount=amount,
                kind=EntryKind.Deposit,
                session_id=session_id,
            )
            session.vault_balance = checked_add(session.vault_balance, amount)
            session.deposited_total = checked_add(session.deposited_total, amount)
            return entry

    def claim(self, session_id: str, agent_id: str, amount: int, signature: bytes) -> LedgerEntry:
        session = self._session(session_id)
        with session.lock:
            if session.refunded:
                raise CoralError(ErrorCode.AlreadyRefunded, session_id)
            if self.clock.now() >= session.claim_deadline:
                raise CoralError(ErrorCode.DeadlinePassed, f"deadline {session.claim_deadline}")
            try:
                idx = session.agent_ids.index(agent_id)
            except ValueError:
                raise CoralError(ErrorCode.UnknownAgent, agent_id) from None
            if session.claimed[idx]:
                raise CoralError(ErrorCode.AlreadyClaimed, agent_id)
            if checked_amount(amount) == 0:
                raise CoralError(ErrorCode.ZeroAmount, "claim must be positive")
            if amount > session.max_caps[idx]:
                raise CoralError(ErrorCode.CapExceeded, f"{amount} > {session.max_caps[idx]}")
            payload = claim_signing_payload(session_id, agent_id, amount, session.mint)
            if not verify_claim_signature(session.developer_pubkeys[idx], payload, signature):
                raise CoralError(ErrorCode.BadSignature, agent_id)
            if amount > session.vault_balance:
                raise CoralError(
                    ErrorCode.InsufficientVault, f"{amount} > vault {session.vault_balance}"
                )
            entry = self.ledger.transfer(
                src=vault_wallet(session_id),
                dst=session.payment_wallets[idx],
                mint=session.mint,
                amount=amount,
                kind=EntryKind.Claim,
                session_id=session_id,
                signature=signature,
            )
            session.claimed[idx] = True
            session.vault_balance = checked_sub(session.vault_balance, amount)
            session.claimed_total = checked_add(session.claimed_total, amount)
        info = {
            "session_id": session_id,
            "agent_id": agent_id,
            "amount": str(amount),
            "ledger_index": entry.index,
        }
        for observer in self.on_claimed:
            observer(agent_id, info)
        return entry

    def refund_leftover(self, caller: WalletAddress, session_id: str) -> LedgerEntry:
        session = self._session(session_id)
        with session.lock:
            if session.refunded:
                raise CoralError(ErrorCode.AlreadyRefunded, session_id)
            if caller not in (session.authority, session.operator):
                raise CoralError(ErrorCode.Unauthorized, caller.base58)
            if self.clock.now() < session.claim_deadline:
                raise CoralError(
                    ErrorCode.DeadlineNotReached, f"deadline {session.claim_deadline}"
                )
            amount = session.vault_balance
            entry = self.ledger.transfer(
                src=vault_wallet(session_id),
                dst=session.authority,
                mint=session.mint,
                amount=amount,
                kind=EntryKind.Refund,
                session_id=session_id,
            )
            session.vault_balance = 0
            session.refunded = True
            session.refunded_amount = amount
            return entry

    # -- queries -----------------------------------------------------------

    def get_session(self, session_id: str) -> SessionSnapshot:
        session = self._session(session_id)
        with session.lock:
            return session.snapshot()

    def audit_log(self, session_id: Optional[str] = None) -> list[LedgerEntry]:
        entries = self.ledger.entries()
        if session_id is None:
            return entries
        memo = f"session:{session_id}"
        return [e for e in entries if e.memo == memo]

    def session_ids(self) -> list[str]:
        with self._sessions_lock:
            return sorted(self._sessions)

    def dump_state(self) -> dict:
        return {
            "sessions": [self.get_session(sid).to_wire() for sid in self.session_ids()],
            "ledger": [e.to_wire() for e in self.ledger.entries()],
        }
