"""Policy wire protocol: newline-delimited JSON over a stream.

The simulator drives the conversation regardless of who opened the
connection: it pushes reset/graph messages and expects an action reply for
every graph; rewards ride on the next graph message (`reward_prev`) and the
terminal `episode_end`. Message grammar (all messages carry "v": 1):

    reset        {"v":1,"type":"reset","episode":E,"seed":S}
    graph        {"v":1,"type":"graph","episode":E,"step":K,
                  "graph":{...},"reward_prev":R|null,"done":false}
    action       {"v":1,"type":"action","node_id":N}
    episode_end  {"v":1,"type":"episode_end","episode":E,
                  "reward_prev":R|null,"metrics":{...},"done":true}
    error        {"v":1,"type":"error","code":C,"detail":D}
"""
from __future__ import annotations

import json
import logging
import socket
import sys

from .exploration_graph import ExplorationGraph, graph_to_wire

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_ENDPOINT = "tcp:127.0.0.1:7788"
DEFAULT_TIMEOUT_S = 30.0
MAX_PROTOCOL_ERRORS = 3


class SessionClosed(RuntimeError):
    """Peer closed the stream or exhausted its protocol error budget."""


class ProtocolTimeout(RuntimeError):
    """Peer did not answer within the session timeout."""


def parse_endpoint(spec: str):
    """Parse 'tcp:HOST:PORT' or 'stdio' endpoint specs."""
    if spec == "stdio":
        return ("stdio",)
    if spec.startswith("tcp:"):
        _, host, port = spec.split(":")
        return ("tcp", host, int(port))
    raise ValueError(f"bad endpoint {spec!r}; expected tcp:HOST:PORT or stdio")


class PolicySession:
    """Simulator-side session over a pair of binary streams."""

    def __init__(self, reader, writer, timeout: float = DEFAULT_TIMEOUT_S):
        self._reader = reader
        self._writer = writer
        self.timeout = timeout
        self.error_count = 0
        self.episode = -1
        self.step = 0
        self.reward_prev = None

    # -- message primitives ------------------------------------------------

    def send(self, message: dict) -> None:
        data = json.dumps(message, separators=(",", ":")).encode() + b"\n"
        try:
            self._writer.write(data)
            self._writer.flush()
        except (BrokenPipeError, ConnectionResetError, OSError) as exc:
            raise SessionClosed(f"peer connection lost while sending: {exc}") from exc

    def _recv_raw(self) -> bytes:
        try:
            line = self._reader.readline()
        except socket.timeout as exc:
            raise ProtocolTimeout(f"no reply within {self.timeout} s") from exc
        except (ConnectionResetError, OSError) as exc:
            raise SessionClosed(f"peer connection lost while receiving: {exc}") from exc
        if not line:
            raise SessionClosed("peer closed the connection")
        return line

    def recv(self) -> dict:
        """Receive one message, replying with an error (and eventually
        dropping the session) on malformed input."""
        while True:
            line = self._recv_raw()
            try:
                message = json.loads(line)
                if not isinstance(message, dict) or "type" not in message:
                    raise ValueError("message must be an object with a 'type'")
            except (json.JSONDecodeError, ValueError, UnicodeDecodeError) as exc:
                self._protocol_error("malformed", str(exc))
                continue
            if message.get("v") != PROTOCOL_VERSION:
                self._protocol_error(
                    "unsupported_version", f"expected v={PROTOCOL_VERSION}, got {message.get('v')!r}"
                )
                continue
            return message

    def _protocol_error(self, code: str, detail: str) -> None:
        self.error_count += 1
        self.send_error(code, detail)
        if self.error_count >= MAX_PROTOCOL_ERRORS:
            raise SessionClosed(f"dropping session after {self.error_count} protocol errors")

    def send_error(self, code: str, detail: str) -> None:
        self.send({"v": PROTOCOL_VERSION, "type": "error", "code": code, "detail": detail})

    # -- simulator-facing API ----------------------------------------------

    def begin_episode(self, episode: int, seed: int) -> None:
        self.episode = episode
        self.step = 0
        self.reward_prev = None
        self.send({"v": PROTOCOL_VERSION, "type": "reset", "episode": episode, "seed": seed})

    def request_action(self, graph: ExplorationGraph) -> int:
        self.send(
            {
                "v": PROTOCOL_VERSION,
                "type": "graph",
                "episode": self.episode,
                "step": self.step,
                "graph": graph_to_wire(graph),
                "reward_prev": self.reward_prev,
                "done": False,
            }
        )
        while True:
            reply = self.recv()
            if reply["type"] != "action" or "node_id" not in reply:
                self._protocol_error("unexpected_message", f"expected action, got {reply['type']!r}")
                continue
            self.step += 1
            return int(reply["node_id"])

    def post_reward(self, value: float) -> None:
        self.reward_prev = value

    def end_episode(self, metrics: dict) -> None:
        self.send(
            {
                "v": PROTOCOL_VERSION,
                "type": "episode_end",
                "episode": self.episode,
                "reward_prev": self.reward_prev,
                "metrics": metrics,
                "done": True,
            }
        )
        self.reward_prev = None


def serve_policy_protocol(endpoint: str, session_handler, max_sessions: int | None = 1) -> None:
    """Listen on `endpoint` and hand each connection, as a PolicySession, to
    `session_handler`. Runs `max_sessions` sessions (None = forever)."""
    parsed = parse_endpoint(endpoint)
    if parsed[0] == "stdio":
        session = PolicySession(sys.stdin.buffer, sys.stdout.buffer)
        try:
            session_handler(session)
        except SessionClosed as exc:
            logger.info("stdio session closed: %s", exc)
        return

    _, host, port = parsed
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server:
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        logger.info("policy protocol listening on %s:%d", host, port)
        served = 0
        while max_sessions is None or served < max_sessions:
            conn, addr = server.accept()
            logger.info("peer connected from %s", addr)
            conn.settimeout(DEFAULT_TIMEOUT_S)
            with conn:
                reader = conn.makefile("rb")
                writer = conn.makefile("wb")
                session = PolicySession(reader, writer)
                try:
                    session_handler(session)
                except (SessionClosed, ProtocolTimeout) as exc:
                    logger.info("session ended: %s", exc)
            served += 1


def connect_policy_peer(endpoint: str, timeout: float = DEFAULT_TIMEOUT_S) -> PolicySession:
    """Open a client connection to a listening policy peer (the simulator
    still drives the message flow)."""
    parsed = parse_endpoint(endpoint)
    if parsed[0] != "tcp":
        raise ValueError("client connections require a tcp endpoint")
    _, host, port = parsed
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(timeout)
    return PolicySession(sock.makefile("rb"), sock.makefile("wb"), timeout=timeout)
