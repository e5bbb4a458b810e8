import json
import socket
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest

from gnntrainer.graphs import WireGraph


def make_wire(rng: np.random.Generator, n_poses: int = None, n_frontiers: int = None) -> dict:
    """A random but structurally valid exploration-graph wire object."""
    if n_poses is None:
        n_poses = int(rng.integers(2, 8))
    if n_frontiers is None:
        n_frontiers = int(rng.integers(1, 4))
    nodes = []
    n = n_poses + n_frontiers
    for i in range(n):
        if i == n_poses - 1:
            kind, tag = "current_pose", 0.0
        elif i < n_poses:
            kind, tag = "past_pose", -1.0
        else:
            kind, tag = "frontier", 1.0
        nodes.append(
            {
                "id": i,
                "kind": kind,
                "pos": [float(rng.uniform(-5, 5)), float(rng.uniform(-5, 5))],
                "feat": [
                    float(rng.uniform(0, 1)),
                    float(rng.uniform(0, 10)),
                    float(rng.uniform(-3.1, 3.1)),
                    tag,
                ],
            }
        )
    edges = [[i - 1, i, float(rng.uniform(0.1, 2.0))] for i in range(1, n_poses)]
    for k in range(n_frontiers):
        edges.append([int(rng.integers(0, n_poses)), n_poses + k, float(rng.uniform(0.1, 5.0))])
    return {
        "v": 1,
        "nodes": nodes,
        "edges": edges,
        "actions": list(range(n_poses, n)),
    }


@pytest.fixture
def random_wire_graph():
    def build(seed=0, **kw):
        return WireGraph.from_wire(make_wire(np.random.default_rng(seed), **kw))

    return build


def free_port() -> int:
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    return port


TRAIN_WORLD = {
    "size_m": [10.0, 10.0],
    "resolution": 0.5,
    "objects": [
        {"id": 1, "rect": [2.5, 2.5, 3.5, 3.5]},
        {"id": 2, "rect": [6.5, 2.5, 7.5, 3.5]},
        {"id": 3, "rect": [2.5, 6.5, 3.5, 7.5]},
        {"id": 4, "rect": [6.5, 6.5, 7.5, 7.5]},
    ],
    "start_poses": [[5.25, 5.25, 0.0]],
}

SIM_ARGS = [
    "--sigma-trans", "0.02",
    "--sigma-rot-deg", "1.0",
    "--pm-radius", "0.6",
    "--max-steps", "80",
]


@contextmanager
def serving_simulator(tmp_path, seed=0, episodes=0, port=None, sessions=1):
    """Spawn `explore serve` in a subprocess; yields the port."""
    env_path = tmp_path / "train_world.json"
    env_path.write_text(json.dumps(TRAIN_WORLD))
    port = port or free_port()
    cmd = [
        sys.executable, "-m", "exploresim.cli", "serve",
        "--env", str(env_path),
        "--endpoint", f"tcp:127.0.0.1:{port}",
        "--seed", str(seed),
        "--episodes", str(episodes),
        "--sessions", str(sessions),
        *SIM_ARGS,
    ]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    try:
        # No readiness probe: a probe connection would consume a session.
        # SimulatorClient retries its connect until the server is up.
        time.sleep(0.3)
        if proc.poll() is not None:
            raise RuntimeError("simulator exited during startup")
        yield port
    finally:
        proc.terminate()
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
