"""Client side of the simulator's policy wire protocol.

Newline-delimited JSON over TCP. The simulator drives: it sends reset and
graph messages; we answer every graph with an action. Rewards arrive on the
following graph message (`reward_prev`) and on episode_end.
"""
from __future__ import annotations

import json
import socket
import time

PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    pass


class SimulatorClient:
    def __init__(self, host: str, port: int, timeout: float = 60.0, retries: int = 60):
        last_exc = None
        for _ in range(retries):
            try:
                self.sock = socket.create_connection((host, port), timeout=timeout)
                break
            except OSError as exc:
                last_exc = exc
                time.sleep(0.25)
        else:
            raise ProtocolError(f"cannot reach simulator at {host}:{port}: {last_exc}")
        self.sock.settimeout(timeout)
        self.reader = self.sock.makefile("rb")
        self.writer = self.sock.makefile("wb")

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass

    def recv(self) -> dict | None:
        """Next message, or None when the simulator closes the stream."""
        line = self.reader.readline()
        if not line:
            return None
        try:
            message = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable message from simulator: {exc}") from exc
        if message.get("v") != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {message.get('v')!r}")
        if message.get("type") == "error":
            raise ProtocolError(f"simulator error {message.get('code')}: {message.get('detail')}")
        return message

    def send_action(self, node_id: int) -> None:
        data = json.dumps(
            {"v": PROTOCOL_VERSION, "type": "action", "node_id": int(node_id)},
            separators=(",", ":"),
        )
        self.writer.write(data.encode() + b"\n")
        self.writer.flush()
