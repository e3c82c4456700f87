"""Runtime onboarding of external text endpoints as proxy agents.

Each settings entry names an HTTP endpoint. After a connectivity probe the
endpoint is registered as a normal agent; a background loop then forwards
every mention body to the endpoint as a text POST and posts the response
back into the originating thread. Forwarding failures become error-text
replies, so one dead endpoint never stalls the mesh.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional
from urllib.parse import urlparse

import httpx

from .types import AGENT_ID_RE, CoralError, ErrorCode

logger = logging.getLogger("coralnode.coraliser")

DEFAULT_TIMEOUT = 10.0
POLL_SECONDS = 0.25


class ProxyStatus(str, Enum):
    Validating = "Validating"
    Live = "Live"
    Unreachable = "Unreachable"


@dataclass(frozen=True)
class SettingsEntry:
    name: str
    endpoint_url: str
    auth_header: Optional[str] = None
    timeout: float = DEFAULT_TIMEOUT
    description: str = ""


@dataclass
class CoraliserSettings:
    entries: list[SettingsEntry] = field(default_factory=list)


class SettingsError(Exception):
    pass


def load_settings(path: str) -> CoraliserSettings:
    """Parse and validate a settings file (JSON array of entries)."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        logger.warning("coraliser settings file %s is empty", path)
        return CoraliserSettings()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SettingsError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, list):
        raise SettingsError(f"{path}: expected a JSON array of entries")
    entries: list[SettingsEntry] = []
    seen: set[str] = set()
    for i, obj in enumerate(raw):
        name = obj.get("name", "")
        if not AGENT_ID_RE.match(name or ""):
            raise SettingsError(f"{path}: entry {i}: invalid agent name {name!r}")
        if name in seen:
            raise CoralError(ErrorCode.DuplicateAgent, f"duplicate settings name {name}")
        seen.add(name)
        url = obj.get("endpoint_url", "")
        parsed = urlparse(url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise SettingsError(f"{path}: entry {i}: invalid endpoint_url {url!r}")
        entries.append(
            SettingsEntry(
                name=name,
                endpoint_url=url,
                auth_header=obj.get("auth_header"),
                timeout=float(obj.get("timeout", DEFAULT_TIMEOUT)),
                description=obj.get("description", ""),
            )
        )
    return CoraliserSettings(entries=entries)


class ProxyAgent:
    """In-process proxy: waits for mentions, forwards, replies."""

    def __init__(self, entry: SettingsEntry, node):
        self.entry = entry
        self.node = node
        self.status = ProxyStatus.Validating
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def probe(self) -> bool:
        try:
            response = httpx.get(self.entry.endpoint_url, timeout=self.entry.timeout,
                                 headers=self._headers())
            return response.status_code < 500
        except httpx.HTTPError:
            return False

    def _headers(self) -> dict:
        return {"Authorization": self.entry.auth_header} if self.entry.auth_header else {}

    def start(self) -> "ProxyAgent":
        if not self.probe():
            self.status = ProxyStatus.Unreachable
            logger.warning("endpoint %s unreachable; %s not registered",
                           self.entry.endpoint_url, self.entry.name)
            return self
        status, body = self.node.execute(
            "register_agent",
            {"id": self.entry.name, "capabilities": self.entry.description},
            caller=None, token=None, request_id=None,
        )
        if status != 200:
            error = json.loads(body).get("error")
            if error != ErrorCode.DuplicateAgent.value:
                raise CoralError(ErrorCode(error), f"registering {self.entry.name}")
            # already present from log replay; reuse the existing identity
        self.status = ProxyStatus.Live
        self._thread = threading.Thread(target=self._loop, daemon=True,
                                        name=f"proxy-{self.entry.name}")
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def _loop(self) -> None:
        while not self._stop.is_set():
            try:
                events = self.node.threads.wait_for_mentions(self.entry.name, POLL_SECONDS)
            except CoralError as exc:
                if exc.code is ErrorCode.Timeout:
                    continue
                logger.error("proxy %s wait failed: %s", self.entry.name, exc)
                return
            for event in events:
                if event.message.sender == self.entry.name:
                    continue  # never react to our own replies
                self._handle(event)

    def _handle(self, event) -> None:
        reply = self._forward(event.message.body)
        token = self.node.tokens.get(self.entry.name)
        status, body = self.node.execute(
            "send_message",
            {"thread": event.message.thread, "body": reply},
            caller=self.entry.name, token=token, request_id=None,
        )
        if status != 200:
            logger.warning("proxy %s reply to %s rejected: %s",
                           self.entry.name, event.message.thread, body)

    def _forward(self, body: str) -> str:
        try:
            response = httpx.post(
                self.entry.endpoint_url,
                content=body.encode("utf-8"),
                headers=self._headers(),
                timeout=self.entry.timeout,
            )
            if response.status_code >= 400:
                return f"[{self.entry.name} error] endpoint returned {response.status_code}"
            return response.text
        except httpx.TimeoutException:
            return f"[{self.entry.name} error] Timeout contacting endpoint"
        except httpx.HTTPError as exc:
            return f"[{self.entry.name} error] {type(exc).__name__}"


def spawn_proxy_agent(entry: SettingsEntry, node) -> ProxyAgent:
    return ProxyAgent(entry, node).start()


def spawn_all(settings: CoraliserSettings, node) -> list[ProxyAgent]:
    return [spawn_proxy_agent(entry, node) for entry in settings.entries]
