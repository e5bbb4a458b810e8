"""Advantage actor-critic over exploration graphs.

Loss per batch: policy term -A * log pi(a|G) with the advantage treated as
a constant, beta * A^2 driving the value net, and eta * sum pi log pi
(negative entropy, so minimizing rewards exploration). Returns are n-step
bootstrapped with n equal to the update interval.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .graphs import RunningNorm, WireGraph
from .gunet import PolicyNet, PolicyNetConfig, ValueNet, graph_tensors


@dataclass(frozen=True)
class Transition:
    graph: WireGraph
    action: int  # chosen action node id
    reward: float  # normalized reward from the simulator
    done: bool

    def __post_init__(self) -> None:
        if self.action not in self.graph.actions:
            raise ValueError(f"action {self.action} is not in the graph's action set")


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.99
    beta: float = 0.5
    eta: float = 0.01
    lr: float = 0.0001
    update_interval: int = 10
    total_episodes: int = 200  # desk default; full-scale training runs 15000

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if self.eta < 0.0:
            raise ValueError("eta must be >= 0")
        if self.update_interval < 1:
            raise ValueError("update_interval must be >= 1")


def n_step_returns(rewards, dones, bootstrap: float, gamma: float):
    """Discounted returns over a window, bootstrapping past its end.

    `bootstrap` is V of the state following the last transition (0 when it
    is terminal); a done inside the window cuts the recursion.
    """
    returns = np.zeros(len(rewards))
    acc = bootstrap
    for t in reversed(range(len(rewards))):
        if dones[t]:
            acc = 0.0
        acc = rewards[t] + gamma * acc
        returns[t] = acc
    return returns


def policy_log_prob(policy: PolicyNet, graph: WireGraph, action: int, norm=None) -> torch.Tensor:
    adj, x, mask = graph_tensors(graph, norm)
    probs = policy.action_distribution(adj, x, mask)
    return torch.log(probs[action].clamp(min=1e-300))


def policy_entropy_term(policy: PolicyNet, graph: WireGraph, norm=None) -> torch.Tensor:
    """Sum over action nodes of pi log pi (negative entropy)."""
    adj, x, mask = graph_tensors(graph, norm)
    probs = policy.action_distribution(adj, x, mask)
    active = probs[mask]
    return (active * torch.log(active.clamp(min=1e-300))).sum()


def value_of(value_net: ValueNet, graph: WireGraph, norm=None) -> torch.Tensor:
    adj, x, _ = graph_tensors(graph, norm)
    return value_net(adj, x)


class A2CLearner:
    """Owns the two nets, the optimizer, and the feature normalizer."""

    def __init__(self, net_config: PolicyNetConfig, config: TrainerConfig):
        self.net_config = net_config
        self.config = config
        self.policy = PolicyNet(net_config)
        self.value = ValueNet(net_config)
        self.norm = RunningNorm()
        self.optimizer = torch.optim.Adam(
            list(self.policy.parameters()) + list(self.value.parameters()), lr=config.lr
        )

    def train_mode(self, on: bool = True) -> None:
        self.policy.train(on)
        self.value.train(on)

    def sample_action(self, graph: WireGraph) -> int:
        adj, x, mask = graph_tensors(graph, self.norm)
        probs = self.policy.action_distribution(adj, x, mask)
        idx = int(torch.multinomial(probs, 1).item())
        return idx

    def greedy_action(self, graph: WireGraph) -> int:
        adj, x, mask = graph_tensors(graph, self.norm)
        with torch.no_grad():
            probs = self.policy.action_distribution(adj, x, mask)
        return int(torch.argmax(probs).item())

    def action_probabilities(self, graph: WireGraph) -> dict:
        """Probability per action node id (eval mode, no dropout)."""
        was_training = self.policy.training
        self.policy.eval()
        adj, x, mask = graph_tensors(graph, self.norm)
        with torch.no_grad():
            probs = self.policy.action_distribution(adj, x, mask)
        self.policy.train(was_training)
        return {a: float(probs[a]) for a in graph.actions}

    def state_value(self, graph: WireGraph) -> float:
        was_training = self.value.training
        self.value.eval()
        with torch.no_grad():
            v = value_of(self.value, graph, self.norm)
        self.value.train(was_training)
        return float(v)

    def update(self, transitions, bootstrap_graph: WireGraph | None) -> dict:
        """One optimizer step on a window of transitions.

        `bootstrap_graph` is the state following the window (None when the
        window ends an episode).
        """
        if not transitions:
            raise ValueError("empty transition batch")
        bootstrap = 0.0
        if bootstrap_graph is not None and not transitions[-1].done:
            bootstrap = self.state_value(bootstrap_graph)
        returns = n_step_returns(
            [t.reward for t in transitions],
            [t.done for t in transitions],
            bootstrap,
            self.config.gamma,
        )

        policy_terms = []
        value_terms = []
        entropy_terms = []
        for transition, ret in zip(transitions, returns):
            adj, x, mask = graph_tensors(transition.graph, self.norm)
            v = self.value(adj, x)
            advantage = torch.as_tensor(ret, dtype=torch.float64) - v
            probs = self.policy.action_distribution(adj, x, mask)
            log_prob = torch.log(probs[transition.action].clamp(min=1e-300))
            active = probs[mask]
            policy_terms.append(-advantage.detach() * log_prob)
            value_terms.append(advantage.pow(2))
            entropy_terms.append((active * torch.log(active.clamp(min=1e-300))).sum())

        policy_loss = torch.stack(policy_terms).mean()
        value_loss = torch.stack(value_terms).mean()
        entropy_loss = torch.stack(entropy_terms).mean()
        loss = policy_loss + self.config.beta * value_loss + self.config.eta * entropy_loss
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"non-finite A2C loss: policy={float(policy_loss.detach())}, "
                f"value={float(value_loss.detach())}, entropy={float(entropy_loss.detach())}"
            )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return {
            "loss": float(loss.detach()),
            "policy_loss": float(policy_loss.detach()),
            "value_loss": float(value_loss.detach()),
            "entropy_loss": float(entropy_loss.detach()),
        }
