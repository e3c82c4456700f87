"""A reviewer agent paid through escrow: the requester funds a session,
asks for a review over a thread, and the reviewer claims its fee.

The server must run with --enable-test-clock so the faucet `mint` tool
is available to fund the requester's wallet.

Usage: python reviewer.py http://127.0.0.1:5555
"""

import sys

from coral_sdk import ClientSession

SESSION_ID = "review-session-1"
MINT = "USDC"
BUDGET = 100_000_000   # 100 USDC at 6 decimals
REVIEW_FEE = 40_000_000


def run_review(server: str) -> dict:
    requester = ClientSession.connect_and_register(server, "requester", "asks for reviews")
    reviewer = ClientSession.connect_and_register(server, "reviewer", "reviews changes")

    loop = reviewer.on_mention(
        lambda event: f"@requester reviewed {event.body.split()[-1]}: looks correct")
    try:
        wallet = next(a["payment_wallet"] for a in requester.list_agents()
                      if a["id"] == "requester")
        requester.call("mint", {"to": wallet, "mint": MINT, "amount": str(BUDGET)})
        requester.call("init_session", {
            "authority": wallet,
            "session_id": SESSION_ID,
            "mint": MINT,
            "agent_ids": ["reviewer"],
            "max_caps": [str(REVIEW_FEE)],
        })
        requester.call("deposit", {
            "depositor": wallet, "session_id": SESSION_ID, "amount": str(BUDGET)})

        thread = requester.create_thread(["reviewer"])
        requester.send_message(thread["id"], "@reviewer please review commit abc123")
        verdict = requester.wait_for_mentions(timeout=10.0)[0]
        print(f"verdict from {verdict.sender}: {verdict.body!r}")

        claim = reviewer.claim_payment(SESSION_ID, REVIEW_FEE)
        print(f"reviewer paid {claim['amount']} {MINT} (ledger entry {claim['index']})")
        return claim
    finally:
        loop.stop()
        requester.close()
        reviewer.close()


if __name__ == "__main__":
    run_review(sys.argv[1])
