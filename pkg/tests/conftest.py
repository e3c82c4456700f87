import hashlib
import socket

import httpx
import pytest
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from coralnode.server import NodeConfig, serve
from coralnode.types import WalletAddress, b58encode


# acceptance-criterion verdict lines, echoed after the run (outside capture)
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    for line in acceptance_lines:
        terminalreporter.write_line(line)


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def make_keypair(name: str) -> tuple[Ed25519PrivateKey, bytes]:
    seed = hashlib.sha256(f"test-key:{name}".encode()).digest()
    key = Ed25519PrivateKey.from_private_bytes(seed)
    return key, key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def make_wallet(name: str) -> WalletAddress:
    return WalletAddress(hashlib.sha256(f"test-wallet:{name}".encode()).digest())


@pytest.fixture
def live_server(tmp_path):
    config = NodeConfig(
        port=free_port(),
        log_path=str(tmp_path / "events.jsonl"),
        enable_test_clock=True,
        heartbeat_interval=0.5,
    )
    handle = serve(config)
    yield handle
    handle.stop()


class ServerClient:
    """Thin helper over the tool endpoint that tracks agent bearer tokens."""

    def __init__(self, address: str):
        self.http = httpx.Client(base_url=address, timeout=30.0)
        self.tokens: dict[str, str] = {}

    def call(self, tool: str, args: dict | None = None, caller: str | None = None,
             request_id: str | None = None) -> httpx.Response:
        headers = {}
        if caller in self.tokens:
            headers["Authorization"] = f"Bearer {self.tokens[caller]}"
        body = {"args": args or {}}
        if caller:
            body["caller"] = caller
        if request_id:
            body["request_id"] = request_id
        return self.http.post(f"/tools/{tool}", json=body, headers=headers)

    def ok(self, tool: str, args: dict | None = None, caller: str | None = None,
           request_id: str | None = None) -> dict:
        response = self.call(tool, args, caller, request_id)
        assert response.status_code == 200, response.text
        return response.json()["result"]

    def register(self, agent_id: str, capabilities: str = "") -> dict:
        _, pub = make_keypair(agent_id)
        result = self.ok("register_agent", {
            "id": agent_id,
            "capabilities": capabilities,
            "public_key": b58encode(pub),
            "payment_wallet": make_wallet(agent_id).base58,
        }, caller=agent_id)
        self.tokens[agent_id] = result["token"]
        return result

    def close(self):
        self.http.close()


@pytest.fixture
def client(live_server):
    helper = ServerClient(live_server.address)
    yield helper
    helper.close()
