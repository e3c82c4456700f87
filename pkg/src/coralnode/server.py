"""HTTP binding for the thread and escrow engines.

Tool calls ride on `POST /tools/<name>`; mention/claimed notifications go out
over `GET /agents/<id>/events` as server-sent events. Every state change is
appended to a write-ahead JSONL log before the response is sent, and the log
is replayed into fresh engines on startup.
"""

from __future__ import annotations

import hashlib
import json
import logging
import secrets
import sys
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

import click
import uvicorn
from fastapi import FastAPI, Header, Query, Request
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse

from . import coraliser as coraliser_mod
from .clock import ManualClock, system_now
from .escrow import (
    DEFAULT_CLAIM_WINDOW_SECONDS,
    MAX_AGENTS,
    MIN_CAP_LAMPORTS,
    EscrowEngine,
    TokenLedger,
)
from .eventlog import EventLog, LogCorruptError, read_records
from .threads import ThreadEngine
from .types import (
    CoralError,
    ErrorCode,
    WalletAddress,
    b58decode,
    b58encode,
    parse_amount,
)

logger = logging.getLogger("coralnode")

# tools whose effects must hit the write-ahead log before the response
MUTATING_TOOLS = {
    "register_agent",
    "create_thread",
    "add_participant",
    "remove_participant",
    "send_message",
    "close_thread",
    "init_session",
    "deposit",
    "claim",
    "refund_leftover",
    "mint",
    "advance_clock",
}

READ_TOOLS = {"list_agents", "wait_for_mentions", "get_session", "audit_log", "get_thread"}

# agent-scoped tools require the bearer token issued at registration
AGENT_TOOLS = {
    "create_thread",
    "add_participant",
    "remove_participant",
    "send_message",
    "close_thread",
    "wait_for_mentions",
}

TEST_TOOLS = {"mint", "advance_clock"}

MAX_WAIT_SECONDS = 60.0


@dataclass
class NodeConfig:
    host: str = "127.0.0.1"
    port: int = 5555
    log_path: Optional[str] = None
    claim_window: int = DEFAULT_CLAIM_WINDOW_SECONDS
    max_agents: int = MAX_AGENTS
    min_cap: int = MIN_CAP_LAMPORTS
    heartbeat_interval: float = 15.0
    enable_test_clock: bool = False
    coraliser_settings: Optional[str] = None


def _derive_wallet(tag: str, name: str) -> WalletAddress:
    return WalletAddress(hashlib.sha256(f"{tag}:{name}".encode("utf-8")).digest())


def _derive_agent_pubkey(agent_id: str) -> bytes:
    # deterministic sim keypair; private half recoverable from the same seed
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

    seed = hashlib.sha256(f"agent-key:{agent_id}".encode("utf-8")).digest()
    key = Ed25519PrivateKey.from_private_bytes(seed)
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


class CoralNode:
    """Engines + write-ahead log + auth tokens + idempotency cache."""

    def __init__(self, config: NodeConfig):
        self.config = config
        self.clock = ManualClock(0)
        self.ledger = TokenLedger(self.clock)
        self.threads = ThreadEngine(self.clock)
        self.escrow = EscrowEngine(
            self.ledger,
            self.clock,
            max_agents=config.max_agents,
            min_cap=config.min_cap,
            claim_window=config.claim_window,
        )
        self.escrow.on_claimed.append(self.threads.notify_claimed)
        self.tokens: dict[str, str] = {}
        self._idempotency: dict[tuple[str, str], tuple[int, str]] = {}
        self._wal_lock = threading.Lock()
        self.log: Optional[EventLog] = None
        if config.log_path:
            self._replay(config.log_path)
            self.log = EventLog(config.log_path)
        if not config.enable_test_clock:
            self.clock.set_at_least(system_now())

    # -- persistence -------------------------------------------------------

    def _replay(self, path: str) -> None:
        import os

        if not os.path.exists(path):
            return
        count = 0
        for record in read_records(path):
            self.clock.set_at_least(record["clock"])
            try:
                self._apply(record["tool"], record["args"])
            except CoralError:
                # the original call failed the same way; state unchanged
                pass
            count += 1
        if count:
            logger.info("replayed %d log records from %s", count, path)

    def _touch_clock(self) -> None:
        if not self.config.enable_test_clock:
            self.clock.set_at_least(system_now())

    # -- dispatch ----------------------------------------------------------

    def execute(self, tool: str, args: dict, caller: Optional[str], token: Optional[str],
                request_id: Optional[str]) -> tuple[int, str]:
        """Run one tool call; returns (status, response-body JSON string)."""
        try:
            if tool not in MUTATING_TOOLS and tool not in READ_TOOLS:
                raise CoralError(ErrorCode.UnknownTool, tool)
            if tool in TEST_TOOLS and not self.config.enable_test_clock:
                raise CoralError(ErrorCode.Unauthorized, f"{tool} requires test mode")
            if tool in AGENT_TOOLS:
                caller = self._authenticate(caller, token)

            cache_key = (caller or "", request_id) if request_id else None
            if cache_key is not None and cache_key in self._idempotency:
                return self._idempotency[cache_key]

            if tool in MUTATING_TOOLS:
                args = self._resolve(tool, args, caller)
                with self._wal_lock:
                    self._touch_clock()
                    if self.log is not None:
                        self.log.append({"clock": self.clock.now(), "tool": tool, "args": args})
                    result = self._apply(tool, args)
            else:
                result = self._apply(tool, args, caller=caller)
            status, body = 200, json.dumps({"ok": True, "result": result}, sort_keys=True)
        except CoralError as exc:
            status = 408 if exc.code is ErrorCode.Timeout else 400
            body = json.dumps({"error": exc.code.value, "detail": exc.detail}, sort_keys=True)
            cache_key = None  # never cache failures
        if request_id and cache_key is not None:
            self._idempotency[cache_key] = (status, body)
        return status, body

    def _authenticate(self, caller: Optional[str], token: Optional[str]) -> str:
        if not caller:
            raise CoralError(ErrorCode.Unauthorized, "caller agent id required")
        if not token or self.tokens.get(caller) != token:
            raise CoralError(ErrorCode.Unauthorized, f"bad token for {caller}")
        return caller

    def _resolve(self, tool: str, args: dict, caller: Optional[str]) -> dict:
        """Pin all nondeterminism (ids, tokens, defaults) into the logged args."""
        args = dict(args)
        if tool == "register_agent":
            agent_id = args.get("id", "")
            args.setdefault("public_key", b58encode(_derive_agent_pubkey(agent_id)))
            args.setdefault("payment_wallet", _derive_wallet("wallet", agent_id).base58)
            args.setdefault("token", secrets.token_hex(16))
        elif tool == "create_thread":
            args["creator"] = caller
            import uuid

            args.setdefault("thread_id", str(uuid.uuid4()))
        elif tool in ("add_participant", "remove_participant", "send_message", "close_thread"):
            args["caller"] = caller
        elif tool == "init_session":
            agent_ids = args.get("agent_ids", [])
            if "payment_wallets" not in args:
                args["payment_wallets"] = [
                    self.threads.get_agent(a).payment_wallet.base58 for a in agent_ids
                ]
            if "developer_pubkeys" not in args:
                args["developer_pubkeys"] = [
                    b58encode(self.threads.get_agent(a).public_key) for a in agent_ids
                ]
            args.setdefault("operator", args.get("authority"))
        return args

    def _apply(self, tool: str, args: dict, caller: Optional[str] = None) -> Any:
        handler = getattr(self, f"_tool_{tool}")
        if tool in READ_TOOLS:
            return handler(args, caller)
        return handler(args)

    # -- tool handlers (mutating) -----------------------------------------

    def _tool_register_agent(self, args: dict) -> dict:
        record = self.threads.register_agent(
            agent_id=args["id"],
            public_key=b58decode(args["public_key"]),
            capabilities=args.get("capabilities", ""),
            payment_wallet=WalletAddress.from_base58(args["payment_wallet"]),
        )
        self.tokens[record.id] = args["token"]
        return {"record": record.to_wire(), "token": args["token"]}

    def _tool_create_thread(self, args: dict) -> dict:
        snapshot = self.threads.create_thread(
            creator=args["creator"],
            participants=list(args.get("participants", [])),
            thread_id=args["thread_id"],
        )
        return snapshot.to_wire()

    def _tool_add_participant(self, args: dict) -> dict:
        members = self.threads.add_participant(args["thread"], args["caller"], args["agent"])
        return {"participants": sorted(members)}

    def _tool_remove_participant(self, args: dict) -> dict:
        members = self.threads.remove_participant(args["thread"], args["caller"], args["agent"])
        return {"participants": sorted(members)}

    def _tool_send_message(self, args: dict) -> dict:
        message = self.threads.send_message(
            thread_id=args["thread"],
            sender=args["caller"],
            body=args.get("body", ""),
            mentions=args.get("mentions"),
        )
        return message.to_wire()

    def _tool_close_thread(self, args: dict) -> dict:
        snapshot = self.threads.close_thread(args["thread"], args["caller"], args.get("summary"))
        return snapshot.to_wire()

    def _tool_init_session(self, args: dict) -> dict:
        snapshot = self.escrow.init_session(
            authority=WalletAddress.from_base58(args["authority"]),
            operator=WalletAddress.from_base58(args["operator"]),
            session_id=args["session_id"],
            mint=args["mint"],
            agent_ids=list(args["agent_ids"]),
            payment_wallets=[WalletAddress.from_base58(w) for w in args["payment_wallets"]],
            developer_pubkeys=[b58decode(k) for k in args["developer_pubkeys"]],
            max_caps=[parse_amount(c) for c in args["max_caps"]],
            vault_mint=args.get("vault_mint"),
        )
        return snapshot.to_wire()

    def _tool_deposit(self, args: dict) -> dict:
        entry = self.escrow.deposit(
            depositor=WalletAddress.from_base58(args["depositor"]),
            session_id=args["session_id"],
            amount=parse_amount(args["amount"]),
            depositor_mint=args.get("depositor_mint"),
        )
        return entry.to_wire()

    def _tool_claim(self, args: dict) -> dict:
        entry = self.escrow.claim(
            session_id=args["session_id"],
            agent_id=args["agent_id"],
            amount=parse_amount(args["amount"]),
            signature=b58decode(args.get("signature", "")),
        )
        return entry.to_wire()

    def _tool_refund_leftover(self, args: dict) -> dict:
        entry = self.escrow.refund_leftover(
            caller=WalletAddress.from_base58(args["caller"]),
            session_id=args["session_id"],
        )
        return entry.to_wire()

    def _tool_mint(self, args: dict) -> dict:
        entry = self.ledger.mint(
            to=WalletAddress.from_base58(args["to"]),
            mint=args["mint"],
            amount=parse_amount(args["amount"]),
            memo=args.get("memo", "faucet"),
        )
        return entry.to_wire()

    def _tool_advance_clock(self, args: dict) -> dict:
        now = self.clock.advance(int(args.get("seconds", 0)))
        return {"now": now}

    # -- tool handlers (read) ---------------------------------------------

    def _tool_list_agents(self, args: dict, caller: Optional[str]) -> dict:
        return {"agents": [r.to_wire() for r in self.threads.list_agents()]}

    def _tool_wait_for_mentions(self, args: dict, caller: Optional[str]) -> dict:
        timeout = min(float(args.get("timeout", 30)), MAX_WAIT_SECONDS)
        events = self.threads.wait_for_mentions(caller, timeout)
        return {"events": [e.to_wire() for e in events]}

    def _tool_get_session(self, args: dict, caller: Optional[str]) -> dict:
        return self.escrow.get_session(args["session_id"]).to_wire()

    def _tool_audit_log(self, args: dict, caller: Optional[str]) -> dict:
        entries = self.escrow.audit_log(args.get("session"))
        return {"entries": [e.to_wire() for e in entries]}

    def _tool_get_thread(self, args: dict, caller: Optional[str]) -> dict:
        return self.threads.get_thread(args["thread"]).to_wire()

    # -- state dump --------------------------------------------------------

    def dump_state(self) -> dict:
        state = self.threads.dump_state()
        state.update(self.escrow.dump_state())
        return state


def _sse_format(event: str, data: str, event_id: Optional[int] = None) -> str:
    lines = [f"event: {event}"]
    if event_id is not None:
        lines.append(f"id: {event_id}")
    lines.append(f"data: {data}")
    return "\n".join(lines) + "\n\n"


def create_app(node: CoralNode) -> FastAPI:
    app = FastAPI(title="coral-server")
    app.state.node = node

    @app.get("/health")
    def health():
        return {"status": "ok", "now": node.clock.now()}

    @app.post("/tools/{tool_name}")
    async def tool_call(tool_name: str, request: Request,
                        authorization: Optional[str] = Header(default=None)):
        try:
            payload = await request.json()
        except Exception:
            payload = {}
        token = None
        if authorization and authorization.startswith("Bearer "):
            token = authorization.removeprefix("Bearer ")
        args = payload.get("args")
        if args is None:
            args = {k: v for k, v in payload.items() if k not in ("caller", "request_id")}
        caller = payload.get("caller")
        request_id = payload.get("request_id")
        import anyio

        status, body = await anyio.to_thread.run_sync(
            node.execute, tool_name, args, caller, token, request_id
        )
        return PlainTextResponse(body, status_code=status, media_type="application/json")

    @app.get("/agents/{agent_id}/events")
    def sse_events(agent_id: str,
                   token: Optional[str] = Query(default=None),
                   last_event_id: int = Query(default=0),
                   last_event_id_header: Optional[str] = Header(default=None, alias="Last-Event-ID")):
        try:
            node._authenticate(agent_id, token)
            node.threads.get_agent(agent_id)
        except CoralError as exc:
            return JSONResponse({"error": exc.code.value, "detail": exc.detail}, status_code=400)
        if last_event_id_header:
            last_event_id = int(last_event_id_header)

        def stream():
            last = last_event_id
            while True:
                entries = node.threads.wait_for_stream(
                    agent_id, last, timeout=node.config.heartbeat_interval
                )
                if entries:
                    for entry in entries:
                        yield _sse_format(entry.kind, json.dumps(entry.payload), entry.event_id)
                    last = entries[-1].event_id
                else:
                    yield _sse_format("heartbeat", json.dumps({"now": node.clock.now()}))

        return StreamingResponse(stream(), media_type="text/event-stream")

    @app.get("/audit")
    def audit(session: Optional[str] = Query(default=None)):
        return PlainTextResponse(node.ledger.audit_csv(session), media_type="text/csv")

    @app.get("/threads/{thread_id}")
    def read_thread(thread_id: str):
        try:
            return node.threads.get_thread(thread_id).to_wire()
        except CoralError as exc:
            return JSONResponse({"error": exc.code.value, "detail": exc.detail}, status_code=400)

    @app.get("/debug/state")
    def debug_state():
        return node.dump_state()

    return app


@dataclass
class RunningServer:
    node: CoralNode
    server: uvicorn.Server
    thread: threading.Thread
    proxies: list = field(default_factory=list)

    @property
    def port(self) -> int:
        return self.node.config.port

    @property
    def address(self) -> str:
        return f"http://{self.node.config.host}:{self.node.config.port}"

    def stop(self) -> None:
        for proxy in self.proxies:
            proxy.stop()
        self.server.should_exit = True
        self.thread.join(timeout=10)


def serve(config: NodeConfig, wait_ready: bool = True) -> RunningServer:
    """Start the server in a background thread; returns a handle."""
    if config.enable_test_clock and config.host not in ("127.0.0.1", "localhost", "::1"):
        raise ValueError("test clock cannot be enabled on a public bind address")
    node = CoralNode(config)
    app = create_app(node)
    uv_config = uvicorn.Config(app, host=config.host, port=config.port, log_level="warning")
    server = uvicorn.Server(uv_config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    if wait_ready:
        import time

        deadline = time.monotonic() + 10
        while not server.started:
            if time.monotonic() > deadline or not thread.is_alive():
                raise RuntimeError("server failed to start")
            time.sleep(0.02)
    proxies = []
    if config.coraliser_settings:
        settings = coraliser_mod.load_settings(config.coraliser_settings)
        proxies = coraliser_mod.spawn_all(settings, node)
    return RunningServer(node=node, server=server, thread=thread, proxies=proxies)


@click.command(context_settings={"auto_envvar_prefix": "CORAL"})
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=5555, show_default=True)
@click.option("--log", "log_path", default=None, help="Append-only event log path.")
@click.option("--claim-window", default=DEFAULT_CLAIM_WINDOW_SECONDS, show_default=True)
@click.option("--max-agents", default=MAX_AGENTS, show_default=True)
@click.option("--min-cap", default=MIN_CAP_LAMPORTS, show_default=True)
@click.option("--heartbeat", default=15.0, show_default=True)
@click.option("--coraliser-settings", default=None, help="Settings file of proxy agents.")
@click.option("--enable-test-clock", is_flag=True,
              help="Expose advance_clock/mint tools; implies a frozen manual clock.")
def main(host, port, log_path, claim_window, max_agents, min_cap, heartbeat,
         coraliser_settings, enable_test_clock):
    """Run the coordination server."""
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    config = NodeConfig(
        host=host,
        port=port,
        log_path=log_path,
        claim_window=claim_window,
        max_agents=max_agents,
        min_cap=min_cap,
        heartbeat_interval=heartbeat,
        enable_test_clock=enable_test_clock,
        coraliser_settings=coraliser_settings,
    )
    try:
        handle = serve(config, wait_ready=False)
    except LogCorruptError as exc:
        click.echo(f"refusing to start: {exc}", err=True)
        sys.exit(2)
    except ValueError as exc:
        click.echo(f"refusing to start: {exc}", err=True)
        sys.exit(2)
    handle.thread.join()


if __name__ == "__main__":
    main()
