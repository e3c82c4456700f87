"""Client session for the coral coordination server.

Speaks only the public HTTP/SSE wire surface: tool calls via
`POST /tools/<name>`, notifications via the per-agent SSE stream with
last-event-id resume, and escrow claims signed with the locally held key.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

import httpx
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

logger = logging.getLogger("coral_sdk")

_B58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_B58_INDEX = {c: i for i, c in enumerate(_B58_ALPHABET)}


def b58encode(raw: bytes) -> str:
    n = int.from_bytes(raw, "big")
    out = []
    while n:
        n, rem = divmod(n, 58)
        out.append(_B58_ALPHABET[rem])
    pad = len(raw) - len(raw.lstrip(b"\x00"))
    return "1" * pad + "".join(reversed(out))


class CoralApiError(Exception):
    """Server-side rejection; `code` is the wire error name, verbatim."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


@dataclass
class MentionEvent:
    event_id: Optional[int]
    recipient: str
    thread: str
    sender: str
    body: str
    seq: int

    @classmethod
    def from_payload(cls, event_id, payload: dict) -> "MentionEvent":
        message = payload["message"]
        return cls(event_id=event_id, recipient=payload["recipient"],
                   thread=message["thread"], sender=message["sender"],
                   body=message["body"], seq=message["seq"])


class ClientSession:
    """One registered agent identity bound to one server."""

    def __init__(self, server: str, agent_id: str, token: str,
                 signing_key: Ed25519PrivateKey, http: httpx.Client):
        self.server = server
        self.agent_id = agent_id
        self.token = token
        self.signing_key = signing_key
        self.http = http
        self.last_event_id = 0

    # -- registration ------------------------------------------------------

    @classmethod
    def connect_and_register(cls, server: str, agent_id: str, capabilities: str = "",
                             retries: int = 3, retry_delay: float = 0.5) -> "ClientSession":
        """Generate a keypair locally, register, and keep the bearer token."""
        signing_key = Ed25519PrivateKey.generate()
        public_key = signing_key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        http = httpx.Client(base_url=server, timeout=90.0)
        last_error: Optional[Exception] = None
        for attempt in range(1, retries + 1):
            try:
                response = http.post("/tools/register_agent", json={
                    "caller": agent_id,
                    "args": {"id": agent_id, "capabilities": capabilities,
                             "public_key": b58encode(public_key)},
                })
                break
            except httpx.TransportError as exc:
                last_error = exc
                time.sleep(retry_delay)
        else:
            http.close()
            raise ConnectionError(
                f"server {server} unreachable after {retries} attempts: {last_error}")
        payload = response.json()
        if response.status_code != 200:
            http.close()
            raise CoralApiError(payload.get("error", "?"), payload.get("detail", ""))
        result = payload["result"]
        return cls(server=server, agent_id=agent_id, token=result["token"],
                   signing_key=signing_key, http=http)

    def close(self) -> None:
        self.http.close()

    # -- tool calls --------------------------------------------------------

    def call(self, tool: str, args: dict | None = None) -> dict:
        response = self.http.post(
            f"/tools/{tool}",
            json={"caller": self.agent_id, "args": args or {}},
            headers={"Authorization": f"Bearer {self.token}"},
        )
        payload = response.json()
        if response.status_code != 200:
            raise CoralApiError(payload.get("error", "?"), payload.get("detail", ""))
        return payload["result"]

    def list_agents(self) -> list[dict]:
        return self.call("list_agents")["agents"]

    def create_thread(self, participants: list[str]) -> dict:
        return self.call("create_thread", {"participants": participants})

    def send_message(self, thread: str, body: str,
                     mentions: Optional[list[str]] = None) -> dict:
        args = {"thread": thread, "body": body}
        if mentions is not None:
            args["mentions"] = mentions
        return self.call("send_message", args)

    def wait_for_mentions(self, timeout: float = 30.0) -> list[MentionEvent]:
        result = self.call("wait_for_mentions", {"timeout": timeout})
        return [MentionEvent.from_payload(None, e) for e in result["events"]]

    # -- escrow ------------------------------------------------------------

    def claim_payment(self, escrow_session_id: str, amount: int) -> dict:
        """Sign the canonical claim payload with the local key and submit."""
        session = self.call("get_session", {"session_id": escrow_session_id})
        payload = (f"coral-claim|{escrow_session_id}|{self.agent_id}"
                   f"|{amount}|{session['mint']}").encode("utf-8")
        signature = self.signing_key.sign(payload)
        return self.call("claim", {
            "session_id": escrow_session_id,
            "agent_id": self.agent_id,
            "amount": str(amount),
            "signature": b58encode(signature),
        })

    # -- mention loop ------------------------------------------------------

    def on_mention(self, handler: Callable[[MentionEvent], Optional[str]],
                   poll_fallback: bool = True) -> "MentionLoop":
        """Start a background loop invoking `handler` once per mention in
        arrival order; the returned text (if any) is posted back into the
        same thread. The loop prefers SSE and resumes from last_event_id."""
        loop = MentionLoop(self, handler, poll_fallback=poll_fallback)
        loop.start()
        return loop


class MentionLoop:
    def __init__(self, session: ClientSession, handler, poll_fallback: bool = True):
        self.session = session
        self.handler = handler
        self.poll_fallback = poll_fallback
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True,
                                        name=f"mentions-{session.agent_id}")

    def start(self) -> None:
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)

    @property
    def running(self) -> bool:
        return self._thread.is_alive()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                self._stream_once()
            except httpx.HTTPError as exc:
                logger.info("stream dropped for %s (%s)", self.session.agent_id,
                            type(exc).__name__)
                if self.poll_fallback:
                    self._poll_once()
                else:
                    time.sleep(0.2)

    def _stream_once(self) -> None:
        url = f"/agents/{self.session.agent_id}/events"
        params = {"token": self.session.token,
                  "last_event_id": self.session.last_event_id}
        with self.session.http.stream("GET", url, params=params, timeout=None) as response:
            if response.status_code != 200:
                raise httpx.HTTPStatusError("subscribe refused", request=response.request,
                                            response=response)
            event_type, event_id, data = None, None, None
            for line in response.iter_lines():
                if self._stop.is_set():
                    return
                if line.startswith("event: "):
                    event_type = line.removeprefix("event: ")
                elif line.startswith("id: "):
                    event_id = int(line.removeprefix("id: "))
                elif line.startswith("data: "):
                    data = line.removeprefix("data: ")
                elif line == "":
                    if event_type == "mention" and event_id is not None:
                        if event_id > self.session.last_event_id:
                            self.session.last_event_id = event_id
                            self._dispatch(MentionEvent.from_payload(
                                event_id, json.loads(data)))
                    elif event_type == "claimed" and event_id is not None:
                        self.session.last_event_id = max(
                            self.session.last_event_id, event_id)
                    event_type, event_id, data = None, None, None

    def _poll_once(self) -> None:
        try:
            for event in self.session.wait_for_mentions(timeout=1.0):
                self._dispatch(event)
        except (CoralApiError, httpx.HTTPError):
            time.sleep(0.2)

    def _dispatch(self, event: MentionEvent) -> None:
        if event.sender == self.session.agent_id:
            return  # never react to our own messages
        mentions = None  # handler replies carry their own @-mentions
        try:
            reply = self.handler(event)
        except Exception as exc:  # handler bugs must not kill the loop
            logger.exception("handler failed for %s", self.session.agent_id)
            reply = f"[{self.session.agent_id} error] {type(exc).__name__}: {exc}"
            mentions = [event.sender]
        if reply:
            try:
                self.session.send_message(event.thread, reply, mentions=mentions)
            except CoralApiError as exc:
                logger.warning("reply rejected: %s", exc)
