"""Two agents exchanging mentions: `pong` echoes back whatever `ping` sends.

Usage: python ping_pong.py http://127.0.0.1:5555 [rounds]
"""

import sys

from coral_sdk import ClientSession


def main(server: str, rounds: int = 10) -> None:
    ping = ClientSession.connect_and_register(server, "ping", "sends pings")
    pong = ClientSession.connect_and_register(server, "pong", "replies with pongs")

    loop = pong.on_mention(lambda event: f"@ping pong for: {event.body}")
    thread = ping.create_thread(["pong"])
    try:
        for i in range(rounds):
            ping.send_message(thread["id"], f"@pong ping {i}")
            reply = ping.wait_for_mentions(timeout=10.0)[0]
            print(f"round {i}: {reply.sender} said {reply.body!r}")
    finally:
        loop.stop()
        ping.close()
        pong.close()


if __name__ == "__main__":
    main(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 10)
