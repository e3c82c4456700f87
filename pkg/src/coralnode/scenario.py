"""Scripted end-to-end scenario runner and audit verifier.

A scenario is a JSON file of ordered steps, each a tool call by a named
actor with an expected outcome. The runner owns deterministic keypairs and
wallets for every actor, signs claim payloads, drives the server's test
clock, and writes a transcript plus the final audit CSV.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field
from typing import Optional

import click
import httpx
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .escrow import AUDIT_CSV_HEADER, claim_signing_payload
from .types import WalletAddress, b58encode


def _actor_signing_key(name: str) -> Ed25519PrivateKey:
    seed = hashlib.sha256(f"scenario-key:{name}".encode("utf-8")).digest()
    return Ed25519PrivateKey.from_private_bytes(seed)


def actor_pubkey(name: str) -> str:
    key = _actor_signing_key(name).public_key()
    return b58encode(key.public_bytes(Encoding.Raw, PublicFormat.Raw))


def actor_wallet(name: str) -> str:
    return WalletAddress(hashlib.sha256(f"scenario-wallet:{name}".encode()).digest()).base58


def _substitute(value, context: dict):
    """Resolve $wallet:<name>, $pubkey:<name> and $thread:<n> placeholders.

    $thread:<n> names the id of the n-th thread created so far in this run.
    """
    if isinstance(value, str):
        if value.startswith("$wallet:"):
            return actor_wallet(value.removeprefix("$wallet:"))
        if value.startswith("$pubkey:"):
            return actor_pubkey(value.removeprefix("$pubkey:"))
        if value.startswith("$thread:"):
            return context["threads"][int(value.removeprefix("$thread:"))]
        return value
    if isinstance(value, list):
        return [_substitute(v, context) for v in value]
    if isinstance(value, dict):
        return {k: _substitute(v, context) for k, v in value.items()}
    return value


@dataclass
class ScenarioResult:
    ok: bool
    failed_step: Optional[int] = None
    reason: str = ""
    transcript: list = field(default_factory=list)
    audit_csv: str = ""


def run_scenario(script: dict, server_address: str,
                 transcript_path: Optional[str] = None,
                 audit_path: Optional[str] = None) -> ScenarioResult:
    """Execute steps strictly in order; halt on the first expectation mismatch."""
    tokens: dict[str, str] = {}
    transcript: list[dict] = []
    context: dict = {"threads": []}
    client = httpx.Client(base_url=server_address, timeout=60.0)
    try:
        for index, step in enumerate(script.get("steps", [])):
            actor = step.get("actor")
            tool = step["tool"]
            args = _substitute(step.get("args", {}), context)
            expected = step.get("expected", "success")

            if step.get("clock_advance"):
                response = client.post("/tools/advance_clock",
                                       json={"args": {"seconds": step["clock_advance"]}})
                if response.status_code != 200:
                    return ScenarioResult(False, index, f"clock advance failed: {response.text}",
                                          transcript)

            if tool == "register_agent":
                args.setdefault("id", actor)
                args.setdefault("public_key", actor_pubkey(args["id"]))
                args.setdefault("payment_wallet", actor_wallet(args["id"]))
            if tool == "claim" and "signature" not in args:
                signer = _actor_signing_key(args["agent_id"])
                session = client.post("/tools/get_session",
                                      json={"args": {"session_id": args["session_id"]}}).json()
                mint = session.get("result", {}).get("mint", "")
                payload = claim_signing_payload(
                    args["session_id"], args["agent_id"], int(args["amount"]), mint
                )
                args["signature"] = b58encode(signer.sign(payload))

            headers = {}
            if actor in tokens:
                headers["Authorization"] = f"Bearer {tokens[actor]}"
            body = {"args": args, "caller": actor}
            response = client.post(f"/tools/{tool}", json=body, headers=headers)
            payload = response.json()
            transcript.append({"step": index, "actor": actor, "tool": tool,
                               "args": args, "status": response.status_code,
                               "response": payload})

            if tool == "register_agent" and response.status_code == 200:
                tokens[args["id"]] = payload["result"]["token"]
            if tool == "create_thread" and response.status_code == 200:
                context["threads"].append(payload["result"]["id"])

            observed = "success" if response.status_code == 200 else payload.get("error", "?")
            if observed != expected:
                reason = f"step {index} ({tool}): expected {expected}, observed {observed}"
                _write_outputs(transcript, "", transcript_path, None)
                return ScenarioResult(False, index, reason, transcript)

        audit_csv = client.get("/audit").text
        _write_outputs(transcript, audit_csv, transcript_path, audit_path)
        return ScenarioResult(True, transcript=transcript, audit_csv=audit_csv)
    finally:
        client.close()


def _write_outputs(transcript, audit_csv, transcript_path, audit_path):
    if transcript_path:
        with open(transcript_path, "w", encoding="utf-8") as fh:
            json.dump(transcript, fh, indent=2)
    if audit_path and audit_csv:
        with open(audit_path, "w", encoding="utf-8") as fh:
            fh.write(audit_csv)


@dataclass
class AuditReport:
    ok: bool
    failures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    totals: dict = field(default_factory=dict)


def verify_audit(csv_path: str, expectations: Optional[dict] = None) -> AuditReport:
    """Recompute per-session conservation from the CSV alone and compare
    against optional expected totals {session: {deposited, claimed, refunded}}."""
    report = AuditReport(ok=True)
    totals: dict[str, dict[str, int]] = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != AUDIT_CSV_HEADER:
            report.ok = False
            report.failures.append(f"bad header: {header}")
            return report
        for row_number, row in enumerate(reader, start=2):
            if len(row) != len(AUDIT_CSV_HEADER):
                report.ok = False
                report.failures.append(f"row {row_number}: wrong field count")
                return report
            index, kind, session_id, _src, _dst, amount, memo, timestamp = row
            if not (index.isdigit() and amount.isdigit() and timestamp.lstrip("-").isdigit()):
                report.ok = False
                report.failures.append(f"row {row_number}: malformed numeric field")
                return report
            if not session_id:
                continue
            if memo != f"session:{session_id}":
                report.ok = False
                report.failures.append(f"row {row_number}: memo/session mismatch")
                return report
            bucket = totals.setdefault(
                session_id, {"deposited": 0, "claimed": 0, "refunded": 0}
            )
            key = {"Deposit": "deposited", "Claim": "claimed", "Refund": "refunded"}.get(kind)
            if key is None:
                report.ok = False
                report.failures.append(f"row {row_number}: unknown kind {kind}")
                return report
            bucket[key] += int(amount)

    for session_id, bucket in totals.items():
        spent = bucket["claimed"] + bucket["refunded"]
        if spent > bucket["deposited"]:
            report.ok = False
            report.failures.append(
                f"session {session_id}: conservation violated "
                f"({bucket['claimed']} + {bucket['refunded']} > {bucket['deposited']})"
            )
        if bucket["refunded"] and spent != bucket["deposited"]:
            report.ok = False
            report.failures.append(
                f"session {session_id}: refunded session does not balance to zero"
            )

    if expectations:
        for session_id, expected in expectations.items():
            if session_id not in totals:
                report.warnings.append(f"session {session_id} absent from audit; vacuous pass")
                continue
            for key, value in expected.items():
                if totals[session_id].get(key) != int(value):
                    report.ok = False
                    report.failures.append(
                        f"session {session_id}: {key} = {totals[session_id].get(key)}, "
                        f"expected {value}"
                    )
    report.totals = totals
    return report


@click.group()
def main():
    """Run scripted scenarios against a live server and verify audit CSVs."""


@main.command()
@click.argument("script_path", type=click.Path(exists=True))
@click.option("--server", default="http://127.0.0.1:5555", show_default=True)
@click.option("--transcript", default=None, help="Write the transcript JSON here.")
@click.option("--audit", default=None, help="Write the final audit CSV here.")
def run(script_path, server, transcript, audit):
    with open(script_path, encoding="utf-8") as fh:
        script = json.load(fh)
    result = run_scenario(script, server, transcript_path=transcript, audit_path=audit)
    if not result.ok:
        click.echo(f"FAIL: {result.reason}", err=True)
        sys.exit(1)
    click.echo(f"OK: {len(result.transcript)} steps")


@main.command()
@click.argument("csv_path", type=click.Path(exists=True))
@click.option("--expect", multiple=True,
              help="session:field=value expectation, e.g. s1:deposited=100")
def verify(csv_path, expect):
    expectations: dict = {}
    for item in expect:
        target, value = item.split("=", 1)
        session_id, fieldname = target.rsplit(":", 1)
        expectations.setdefault(session_id, {})[fieldname] = int(value)
    report = verify_audit(csv_path, expectations or None)
    for warning in report.warnings:
        click.echo(f"warning: {warning}")
    if not report.ok:
        for failure in report.failures:
            click.echo(f"FAIL: {failure}", err=True)
        sys.exit(1)
    click.echo(f"OK: {json.dumps(report.totals, sort_keys=True)}")


if __name__ == "__main__":
    main()
