"""Training and evaluation loops over the simulator protocol, plus
checkpointing and the running-average reward curve."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .a2c import A2CLearner, Transition, TrainerConfig
from .client import SimulatorClient
from .graphs import WireGraph
from .gunet import PolicyNetConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def save_checkpoint(path, learner: A2CLearner, episode: int) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "net_config": asdict(learner.net_config),
            "trainer_config": asdict(learner.config),
            "policy": learner.policy.state_dict(),
            "value": learner.value.state_dict(),
            "optimizer": learner.optimizer.state_dict(),
            "norm": learner.norm.state_dict(),
            "episode": episode,
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def load_checkpoint(path) -> tuple:
    state = torch.load(path, weights_only=False)
    if state.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {state.get('version')!r} not supported")
    learner = A2CLearner(
        PolicyNetConfig(**state["net_config"]), TrainerConfig(**state["trainer_config"])
    )
    learner.policy.load_state_dict(state["policy"])
    learner.value.load_state_dict(state["value"])
    learner.optimizer.load_state_dict(state["optimizer"])
    learner.norm.load_state_dict(state["norm"])
    torch.set_rng_state(state["torch_rng"])
    return learner, int(state["episode"])


class EpisodeDriver:
    """Runs protocol episodes with a pluggable action picker, collecting
    transitions and per-episode reward statistics."""

    def __init__(self, client: SimulatorClient):
        self.client = client

    def run_episode(self, pick_action, on_transition=None):
        """One reset..episode_end cycle. Returns (rewards, end_metrics) or
        None when the simulator closed before the episode started."""
        message = self.client.recv()
        if message is None:
            return None
        if message["type"] != "reset":
            raise RuntimeError(f"expected reset, got {message['type']}")
        pending = None  # (graph, action) awaiting its reward
        rewards = []
        while True:
            message = self.client.recv()
            if message is None:
                return None
            if message["type"] == "graph":
                graph = WireGraph.from_wire(message["graph"])
                if pending is not None:
                    reward = float(message["reward_prev"])
                    rewards.append(reward)
                    if on_transition is not None:
                        on_transition(
                            Transition(pending[0], pending[1], reward, done=False), graph
                        )
                action = pick_action(graph)
                self.client.send_action(action)
                pending = (graph, action)
            elif message["type"] == "episode_end":
                if pending is not None and message.get("reward_prev") is not None:
                    reward = float(message["reward_prev"])
                    rewards.append(reward)
                    if on_transition is not None:
                        on_transition(
                            Transition(pending[0], pending[1], reward, done=True), None
                        )
                return rewards, message.get("metrics", {})
            else:
                raise RuntimeError(f"unexpected message type {message['type']}")


def train(
    config: TrainerConfig,
    net_config: PolicyNetConfig,
    host: str,
    port: int,
    out_dir,
    seed: int = 0,
    checkpoint_every: int = 50,
    resume_from=None,
) -> dict:
    """Train against a serving simulator; writes reward_curve.csv and
    checkpoints under out_dir. Returns a summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(seed)
    if resume_from is not None:
        learner, start_episode = load_checkpoint(resume_from)
    else:
        learner, start_episode = A2CLearner(net_config, config), 0
    learner.train_mode(True)

    client = SimulatorClient(host, port)
    driver = EpisodeDriver(client)
    buffer: list = []
    curve = []
    running = None

    def on_transition(transition: Transition, next_graph):
        nonlocal buffer
        learner.norm.update(transition.graph.features)
        buffer.append(transition)
        if len(buffer) >= config.update_interval or transition.done:
            learner.update(buffer, next_graph)
            buffer = []

    episode = start_episode
    try:
        while episode < config.total_episodes:
            outcome = driver.run_episode(learner.sample_action, on_transition)
            if outcome is None:
                logger.warning("simulator closed at episode %d", episode)
                break
            rewards, metrics = outcome
            mean_reward = float(np.mean(rewards)) if rewards else 0.0
            running = mean_reward if running is None else 0.95 * running + 0.05 * mean_reward
            curve.append((episode, running))
            episode += 1
            if episode % checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{episode:05d}.pt", learner, episode)
            if episode % 10 == 0:
                logger.info(
                    "episode %d: mean reward %.3f (running %.3f) %s",
                    episode, mean_reward, running, metrics.get("reason", ""),
                )
    finally:
        client.close()
        save_checkpoint(out / "checkpoint_final.pt", learner, episode)
        with (out / "reward_curve.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "avg_reward"])
            writer.writerows(curve)

    return {
        "episodes": episode - start_episode,
        "final_running_reward": running,
        "checkpoint": str(out / "checkpoint_final.pt"),
        "reward_curve": str(out / "reward_curve.csv"),
    }


def evaluate(checkpoint_path, host: str, port: int, episodes: int) -> dict:
    """Greedy evaluation over the protocol; aggregates simulator metrics."""
    if episodes == 0:
        return {"episodes": 0, "mean_reward": None, "metrics": []}
    learner, _ = load_checkpoint(checkpoint_path)
    learner.train_mode(False)
    client = SimulatorClient(host, port)
    driver = EpisodeDriver(client)
    episode_rewards = []
    metrics_list = []
    try:
        for _ in range(episodes):
            outcome = driver.run_episode(learner.greedy_action)
            if outcome is None:
                break
            rewards, metrics = outcome
            episode_rewards.append(float(np.mean(rewards)) if rewards else 0.0)
            metrics_list.append(metrics)
    finally:
        client.close()
    coverage_done = sum(1 for m in metrics_list if m.get("reason") == "coverage")
    return {
        "episodes": len(episode_rewards),
        "mean_reward": float(np.mean(episode_rewards)) if episode_rewards else None,
        "coverage_termination_rate": coverage_done / len(metrics_list) if metrics_list else None,
        "mean_map_error": (
            float(np.mean([m["map_error"] for m in metrics_list])) if metrics_list else None
        ),
        "mean_distance": (
            float(np.mean([m["distance"] for m in metrics_list])) if metrics_list else None
        ),
        "metrics": metrics_list,
    }
