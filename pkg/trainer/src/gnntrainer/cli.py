"""Command line entry points: gnn-trainer train | evaluate."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .a2c import TrainerConfig
from .gunet import PAPER_PRESET, PolicyNetConfig
from .train import evaluate, train


def _net_config(args) -> PolicyNetConfig:
    if args.preset == "paper":
        return PAPER_PRESET
    return PolicyNetConfig(
        depth=args.depth, hidden=args.hidden, dropout=args.dropout, pool_ratio=args.pool_ratio
    )


def cmd_train(args) -> int:
    config = TrainerConfig(
        gamma=args.gamma,
        beta=args.beta,
        eta=args.eta,
        lr=args.lr,
        update_interval=args.update_interval,
        total_episodes=args.episodes,
    )
    summary = train(
        config,
        _net_config(args),
        args.host,
        args.port,
        args.out,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
        resume_from=args.resume,
    )
    print(json.dumps(summary, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    summary = evaluate(args.checkpoint, args.host, args.port, args.episodes)
    summary.pop("metrics", None)
    print(json.dumps(summary, indent=2))
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="gnn-trainer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="A2C training against a serving simulator")
    p_train.add_argument("--host", default="127.0.0.1")
    p_train.add_argument("--port", type=int, default=7788)
    p_train.add_argument("--episodes", type=int, default=200)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--lr", type=float, default=0.0001)
    p_train.add_argument("--gamma", type=float, default=0.99)
    p_train.add_argument("--beta", type=float, default=0.5)
    p_train.add_argument("--eta", type=float, default=0.01)
    p_train.add_argument("--update-interval", type=int, default=10)
    p_train.add_argument("--checkpoint-every", type=int, default=50)
    p_train.add_argument("--resume", default=None)
    p_train.add_argument("--depth", type=int, default=3)
    p_train.add_argument("--hidden", type=int, default=64)
    p_train.add_argument("--dropout", type=float, default=0.5)
    p_train.add_argument("--pool-ratio", type=float, default=0.5)
    p_train.add_argument("--preset", choices=["desk", "paper"], default="desk")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="greedy evaluation of a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--host", default="127.0.0.1")
    p_eval.add_argument("--port", type=int, default=7788)
    p_eval.add_argument("--episodes", type=int, default=20)
    p_eval.set_defaults(func=cmd_evaluate)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
