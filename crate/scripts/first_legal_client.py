#!/usr/bin/env python3
"""Reference client for the coalsim wire protocol.

Connects to a `coalsim serve --socket PATH` server and plays the
first-legal strategy: every robot targets the lowest masked window index.
Because the in-process `first-legal` policy does the same, the per-episode
rewards printed here must match `coalsim run --policy first-legal` for the
same base seed — a quick cross-language transparency check.

Usage: first_legal_client.py SOCKET_PATH EXPECTED_EPISODES
"""
import base64
import json
import socket
import struct
import sys


def main() -> int:
    path, expected = sys.argv[1], int(sys.argv[2])
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock.connect(path)
    f = sock.makefile("rw")

    def send(msg):
        f.write(json.dumps(msg) + "\n")
        f.flush()

    episodes_done = 0
    n_robots = window = 0
    pending = []

    for line in f:
        msg = json.loads(line)
        kind = msg["kind"]
        if kind == "reset":
            assert msg["proto"] == 1, msg
            n_robots, window = msg["n_robots"], msg["window"]
            pending = []
        elif kind == "observe":
            raw = base64.b64decode(msg["payload"])
            floats = struct.unpack(f"<{len(raw) // 4}f", raw)
            # Payload layout: channel planes, then the action mask.
            mask = floats[-window * window:]
            cell = next(i for i, v in enumerate(mask) if v > 0.5)
            pending.append({"kind": "act", "episode": msg["episode"],
                            "t": msg["t"], "robot": msg["robot"], "cell": cell})
            # The server sends all observations of a step before reading
            # acts, so batching one act per robot keeps strict alternation.
            if len(pending) == n_robots:
                for act in pending:
                    send(act)
                pending = []
        elif kind == "done":
            print(f"episode {msg['episode']}: reward={msg['reward']} "
                  f"valid={msg['valid']}")
            episodes_done += 1
            if episodes_done == expected:
                return 0
        elif kind == "error":
            print("server error:", msg, file=sys.stderr)
            return 2
    print("server closed early", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
