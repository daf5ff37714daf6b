#!/usr/bin/env python3
"""Reference scorer peer speaking the line protocol.

Serves a uniform distribution over a fixed vocabulary plus "</s>". One
request per line, one reply per line:

    INIT <id> ||| <source tokens>   ->  OK <state>
    DIST <state>                    ->  DIST <state> ||| tok lp ... ||| DEFAULT lp
    ADV <state> ||| <token>         ->  OK <newstate>
    FREE <state>                    ->  OK

Any failure is reported as "ERR <message>". Runs on stdio by default or
listens on a TCP address with --tcp HOST:PORT (serving one connection).
"""

import argparse
import math
import socket
import sys


class UniformPeer:
    def __init__(self, vocab):
        self.vocab = list(dict.fromkeys(list(vocab) + ["</s>"]))
        self.lp = -math.log(len(self.vocab))
        self.next_state = 0
        self.live = set()

    def fresh(self):
        sid = self.next_state
        self.next_state += 1
        self.live.add(sid)
        return sid

    def state_of(self, head):
        sid = int(head[1])
        if sid not in self.live:
            raise KeyError(sid)
        return sid

    def handle(self, line):
        line = line.rstrip("\r\n")
        if not line.strip():
            return None
        parts = line.split(" ||| ")
        head = parts[0].split()
        if not head:
            return "ERR empty request"
        cmd = head[0]
        try:
            if cmd == "INIT":
                return "OK %d" % self.fresh()
            if cmd == "DIST":
                sid = self.state_of(head)
                pairs = " ".join("%s %.9f" % (t, self.lp) for t in self.vocab)
                return "DIST %d ||| %s ||| DEFAULT %.9f" % (sid, pairs, self.lp)
            if cmd == "ADV":
                self.state_of(head)
                return "OK %d" % self.fresh()
            if cmd == "FREE":
                self.live.discard(self.state_of(head))
                return "OK"
            return "ERR unknown command %r" % cmd
        except (IndexError, ValueError):
            return "ERR malformed request %r" % line
        except KeyError as e:
            return "ERR unknown state %s" % e.args[0]


def serve(peer, reader, writer):
    for line in reader:
        reply = peer.handle(line)
        if reply is not None:
            writer.write(reply + "\n")
            writer.flush()


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--vocab", default="a,b,c",
                        help="comma-separated vocabulary (default: a,b,c)")
    parser.add_argument("--tcp", metavar="HOST:PORT",
                        help="listen on a TCP address instead of stdio")
    args = parser.parse_args()
    peer = UniformPeer(t for t in args.vocab.split(",") if t)

    if args.tcp:
        host, port = args.tcp.rsplit(":", 1)
        server = socket.create_server((host, int(port)))
        # The chosen port goes to stderr so callers using port 0 can
        # discover it without disturbing the protocol stream.
        print("listening on %s:%d" % server.getsockname()[:2], file=sys.stderr)
        sys.stderr.flush()
        conn, _ = server.accept()
        with conn, conn.makefile("r") as reader, conn.makefile("w") as writer:
            serve(peer, reader, writer)
    else:
        serve(peer, sys.stdin, sys.stdout)


if __name__ == "__main__":
    main()
