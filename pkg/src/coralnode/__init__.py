"""Coral-style coordination node: thread/mention messaging plus escrow payments."""

from .clock import ManualClock
from .escrow import (
    DEFAULT_CLAIM_WINDOW_SECONDS,
    MAX_AGENTS,
    MIN_CAP_LAMPORTS,
    EscrowEngine,
    TokenLedger,
)
from .threads import ThreadEngine
from .types import CoralError, ErrorCode, WalletAddress, parse_mentions

__all__ = [
    "ManualClock",
    "EscrowEngine",
    "TokenLedger",
    "ThreadEngine",
    "CoralError",
    "ErrorCode",
    "WalletAddress",
    "parse_mentions",
    "MAX_AGENTS",
    "MIN_CAP_LAMPORTS",
    "DEFAULT_CLAIM_WINDOW_SECONDS",
]
