"""Thread engine: agent registry, thread lifecycle and mention routing.

Transport independent. The contract: mutations on one thread are serialized,
distinct threads proceed in parallel, registry changes are serialized
globally, and wait_for_mentions blocks only its caller (condition-variable
wakeup, no polling loop).
"""

from __future__ import annotations

import threading
import uuid
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import ManualClock
from .types import (
    MAX_BODY_BYTES,
    AgentRecord,
    CoralError,
    ErrorCode,
    MentionEvent,
    Message,
    ThreadSnapshot,
    ThreadState,
    WalletAddress,
    parse_mentions,
    validate_agent_id,
)

SSE_RETENTION = 1024


@dataclass
class StreamEntry:
    """A numbered per-agent notification retained for SSE resume."""

    event_id: int
    kind: str  # "mention" | "claimed"
    payload: dict


class _MentionBox:
    """Per-agent notification state: a consume-once queue for blocking waits
    plus a bounded retained ring for SSE resume. One condition drives both."""

    def __init__(self):
        self.cond = threading.Condition()
        self.pending: deque[MentionEvent] = deque()
        self.retained: deque[StreamEntry] = deque(maxlen=SSE_RETENTION)
        self.next_event_id = 1

    def push(self, kind: str, payload: dict, event: Optional[MentionEvent] = None) -> None:
        with self.cond:
            entry = StreamEntry(self.next_event_id, kind, payload)
            self.next_event_id += 1
            self.retained.append(entry)
            if event is not None:
                self.pending.append(event)
            self.cond.notify_all()


class _Thread:
    def __init__(self, thread_id: str, creator: str, participants: set[str]):
        self.id = thread_id
        self.creator = creator
        self.participants = participants
        self.messages: list[Message] = []
        self.state = ThreadState.Open
        self.summary: Optional[str] = None
        self.lock = threading.Lock()

    def snapshot(self) -> ThreadSnapshot:
        return ThreadSnapshot(
            id=self.id,
            creator=self.creator,
            participants=frozenset(self.participants),
            messages=tuple(self.messages),
            state=self.state,
            summary=self.summary,
        )


class ThreadEngine:
    def __init__(self, clock: ManualClock):
        self.clock = clock
        self._registry_lock = threading.RLock()
        self._agents: dict[str, AgentRecord] = {}
        self._boxes: dict[str, _MentionBox] = {}
        self._threads: dict[str, _Thread] = {}
        self._threads_lock = threading.Lock()
        # observers see every delivered mention (used for audit records)
        self.on_mention: list[Callable[[MentionEvent], None]] = []

    # -- registry ----------------------------------------------------------

    def register_agent(
        self,
        agent_id: str,
        public_key: bytes,
        capabilities: str,
        payment_wallet: WalletAddress,
    ) -> AgentRecord:
        validate_agent_id(agent_id)
        if not isinstance(public_key, bytes) or len(public_key) != 32:
            raise CoralError(ErrorCode.BadSignature, "public key must be 32 bytes")
        with self._registry_lock:
            if agent_id in self._agents:
                raise CoralError(ErrorCode.DuplicateAgent, agent_id)
            record = AgentRecord(
                id=agent_id,
                public_key=public_key,
                capabilities=capabilities,
                payment_wallet=payment_wallet,
                registered_at=self.clock.now(),
            )
            self._agents[agent_id] = record
            self._boxes[agent_id] = _MentionBox()
            return record

    def list_agents(self) -> list[AgentRecord]:
        with self._registry_lock:
            return sorted(self._agents.values(), key=lambda r: (r.registered_at, r.id))

    def get_agent(self, agent_id: str) -> AgentRecord:
        with self._registry_lock:
            try:
                return self._agents[agent_id]
            except KeyError:
                raise CoralError(ErrorCode.UnknownAgent, agent_id) from None

    def _box(self, agent_id: str) -> _MentionBox:
        with self._registry_lock:
            if agent_id not in self._boxes:
                raise CoralError(ErrorCode.UnknownAgent, agent_id)
            return self._boxes[agent_id]

    # -- thread lifecycle --------------------------------------------------

    def create_thread(
        self, creator: str, participants: list[str], thread_id: Optional[str] = None
    ) -> ThreadSnapshot:
        with self._registry_lock:
            for agent_id in [creator, *participants]:
                if agent_id not in self._agents:
                    raise CoralError(ErrorCode.UnknownAgent, agent_id)
        members = set(participants) | {creator}
        thread = _Thread(thread_id or str(uuid.uuid4()), creator, members)
        with self._threads_lock:
            if thread.id in self._threads:
                raise CoralError(ErrorCode.UnknownThread, f"duplicate thread id {thread.id}")
            self._threads[thread.id] = thread
        return thread.snapshot()

    def _thread(self, thread_id: str) -> _Thread:
        with self._threads_lock:
            try:
                return self._threads[thread_id]
            except KeyError:
                raise CoralError(ErrorCode.UnknownThread, thread_id) from None

    def get_thread(self, thread_id: str) -> ThreadSnapshot:
        thread = self._thread(thread_id)
        with thread.lock:
            return thread.snapshot()

    def add_participant(self, thread_id: str, caller: str, agent_id: str) -> frozenset[str]:
        thread = self._thread(thread_id)
        with thread.lock:
            if thread.state is ThreadState.Closed:
                raise CoralError(ErrorCode.ThreadClosed, thread_id)
            if caller not in thread.participants:
                raise CoralError(ErrorCode.NotParticipant, caller)
            self.get_agent(agent_id)  # UnknownAgent if unregistered
            thread.participants.add(agent_id)
            return frozenset(thread.participants)

    def remove_participant(self, thread_id: str, caller: str, agent_id: str) -> frozenset[str]:
        thread = self._thread(thread_id)
        with thread.lock:
            if thread.state is ThreadState.Closed:
                raise CoralError(ErrorCode.ThreadClosed, thread_id)
            if caller not in thread.participants:
                raise CoralError(ErrorCode.NotParticipant, caller)
            if agent_id not in thread.participants:
                raise CoralError(ErrorCode.NotParticipant, agent_id)
            if len(thread.participants) == 1:
                raise CoralError(ErrorCode.EmptyAgents, "open thread needs >= 1 participant")
            thread.participants.discard(agent_id)
            return frozenset(thread.participants)

    def send_message(
        self,
        thread_id: str,
        sender: str,
        body: str,
        mentions: Optional[list[str]] = None,
    ) -> Message:
        if len(body.encode("utf-8")) > MAX_BODY_BYTES:
            raise CoralError(ErrorCode.InvalidInputLength, "body exceeds 64 KiB")
        thread = self._thread(thread_id)
        with thread.lock:
            if thread.state is ThreadState.Closed:
                raise CoralError(ErrorCode.ThreadClosed, thread_id)
            if sender not in thread.participants:
                raise CoralError(ErrorCode.NotParticipant, sender)
            if mentions is None:
                mentions = parse_mentions(body, thread.participants)
            else:
                for mention in mentions:
                    if mention not in thread.participants:
                        raise CoralError(ErrorCode.NotParticipant, mention)
                mentions = list(dict.fromkeys(mentions))
            message = Message(
                thread=thread.id,
                seq=len(thread.messages) + 1,
                sender=sender,
                body=body,
                mentions=tuple(mentions),
                sent_at=self.clock.now(),
            )
            thread.messages.append(message)
            for recipient in message.mentions:
                event = MentionEvent(recipient=recipient, message=message)
                self._box(recipient).push("mention", event.to_wire(), event)
                for observer in self.on_mention:
                    observer(event)
            return message

    def close_thread(
        self, thread_id: str, caller: str, summary: Optional[str] = None
    ) -> ThreadSnapshot:
        thread = self._thread(thread_id)
        with thread.lock:
            if thread.state is ThreadState.Closed:
                raise CoralError(ErrorCode.ThreadClosed, thread_id)
            if caller not in thread.participants:
                raise CoralError(ErrorCode.NotParticipant, caller)
            thread.state = ThreadState.Closed
            thread.summary = summary
            return thread.snapshot()

    # -- notifications -----------------------------------------------------

    def wait_for_mentions(self, agent_id: str, timeout: float) -> list[MentionEvent]:
        """Return all queued mention events, blocking until at least one
        arrives. Raises Timeout rather than returning an empty list."""
        box = self._box(agent_id)
        with box.cond:
            if not box.pending:
                box.cond.wait_for(lambda: bool(box.pending), timeout=timeout)
            if not box.pending:
                raise CoralError(ErrorCode.Timeout, f"no mentions within {timeout}s")
            events = list(box.pending)
            box.pending.clear()
            return events

    def notify_claimed(self, agent_id: str, payload: dict) -> None:
        """Escrow hook: surface a Claimed event on the agent's stream."""
        with self._registry_lock:
            box = self._boxes.get(agent_id)
        if box is not None:
            box.push("claimed", payload)

    def events_since(self, agent_id: str, last_event_id: int) -> list[StreamEntry]:
        box = self._box(agent_id)
        with box.cond:
            return [e for e in box.retained if e.event_id > last_event_id]

    def wait_for_stream(self, agent_id: str, last_event_id: int, timeout: float) -> list[StreamEntry]:
        """Block until a retained event newer than last_event_id exists."""
        box = self._box(agent_id)
        with box.cond:
            box.cond.wait_for(
                lambda: box.retained and box.retained[-1].event_id > last_event_id,
                timeout=timeout,
            )
            return [e for e in box.retained if e.event_id > last_event_id]

    # -- introspection -----------------------------------------------------

    def thread_ids(self) -> list[str]:
        with self._threads_lock:
            return sorted(self._threads)

    def dump_state(self) -> dict:
        """Deterministic full-state dump (agents + threads), for recovery checks."""
        with self._registry_lock:
            agents = [r.to_wire() for r in self.list_agents()]
        threads = []
        for thread_id in self.thread_ids():
            threads.append(self.get_thread(thread_id).to_wire())
        return {"agents": agents, "threads": threads}
