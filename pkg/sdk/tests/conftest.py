import socket
import subprocess
import sys
import time
from pathlib import Path

import httpx
import pytest

EXAMPLES_DIR = Path(__file__).resolve().parent.parent / "examples"
if str(EXAMPLES_DIR) not in sys.path:
    sys.path.insert(0, str(EXAMPLES_DIR))


# acceptance-criterion verdict lines, echoed after the run (outside capture)
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    for line in acceptance_lines:
        terminalreporter.write_line(line)


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def live_server(tmp_path):
    """The coordination server started as a real subprocess via its CLI."""
    port = free_port()
    proc = subprocess.Popen(
        [
            "coral-server",
            "--host", "127.0.0.1",
            "--port", str(port),
            "--log", str(tmp_path / "wal.jsonl"),
            "--heartbeat", "0.5",
            "--enable-test-clock",
        ],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
    )
    address = f"http://127.0.0.1:{port}"
    deadline = time.monotonic() + 15
    while time.monotonic() < deadline:
        if proc.poll() is not None:
            raise RuntimeError(f"server exited early: {proc.stderr.read().decode()}")
        try:
            if httpx.get(f"{address}/health", timeout=1.0).status_code == 200:
                break
        except httpx.TransportError:
            time.sleep(0.1)
    else:
        proc.terminate()
        raise RuntimeError("server did not become healthy in time")
    yield address
    proc.terminate()
    proc.wait(timeout=10)
