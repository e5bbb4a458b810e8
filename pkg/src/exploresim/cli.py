"""Command line entry points: explore run | serve | metrics | bench."""
from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .protocol import DEFAULT_ENDPOINT, connect_policy_peer, serve_policy_protocol
from .runner import (
    EpisodeConfig,
    bench_decision_time,
    bench_rows_to_csv,
    compute_metrics,
    make_session_handler,
    read_episode_log,
    run_episode,
    write_episode_log,
)
from .slam import SlamParams
from .world import NoiseParams, SensorParams

logger = logging.getLogger(__name__)


def _add_episode_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--env", required=True, help="environment config (JSON)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-steps", type=int, default=200)
    parser.add_argument("--coverage-target", type=float, default=0.85)
    parser.add_argument("--alpha", type=float, default=0.05, help="reward cost weight per meter")
    parser.add_argument("--sigma-trans", type=float, default=0.01, help="motion noise std (m)")
    parser.add_argument("--sigma-rot-deg", type=float, default=0.08, help="motion noise std (deg)")
    parser.add_argument("--sigma-range", type=float, default=0.02, help="range noise std (m)")
    parser.add_argument("--max-range", type=float, default=3.0, help="sensor range (m)")
    parser.add_argument("--n-beams", type=int, default=180)
    parser.add_argument("--pm-radius", type=float, default=1.0, help="pose-matching radius (m)")


def _episode_config(args, policy: str, seed: int, episode_index: int) -> EpisodeConfig:
    noise = NoiseParams(
        sigma_trans=args.sigma_trans,
        sigma_rot=math.radians(args.sigma_rot_deg),
        sigma_range=args.sigma_range,
    )
    return EpisodeConfig(
        env_path=args.env,
        policy=policy,
        seed=seed,
        episode_index=episode_index,
        max_steps=args.max_steps,
        coverage_target=args.coverage_target,
        alpha=args.alpha,
        noise=noise,
        sensor=SensorParams(max_range=args.max_range, n_beams=args.n_beams),
        slam=SlamParams.from_noise(noise, pm_radius=args.pm_radius),
    )


def _run_one(payload) -> dict:
    config, out_dir, name = payload
    log = run_episode(config)
    if out_dir is not None:
        write_episode_log(log, out_dir, name)
    metrics = compute_metrics(log)
    return {"episode": config.episode_index, "seed": config.seed, **metrics.summary()}


def cmd_run(args) -> int:
    out_dir = Path(args.out) if args.out else None
    jobs = []
    for i in range(args.episodes):
        config = _episode_config(args, args.policy, args.seed + i, i)
        jobs.append((config, out_dir, f"episode_{i:04d}"))

    if args.policy == "external":
        session = connect_policy_peer(args.endpoint)
        for config, job_dir, name in jobs:
            session.begin_episode(config.episode_index, config.seed)
            log = run_episode(config, session=session)
            if job_dir is not None:
                write_episode_log(log, job_dir, name)
            metrics = compute_metrics(log)
            session.end_episode(metrics.summary())
            print(_format_summary(metrics.summary(), config))
        return 0

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for summary in pool.map(_run_one, jobs):
                print(_format_summary(summary))
    else:
        for job in jobs:
            print(_format_summary(_run_one(job)))
    return 0


def _format_summary(summary: dict, config: EpisodeConfig | None = None) -> str:
    if config is not None:
        summary = {"episode": config.episode_index, "seed": config.seed, **summary}
    parts = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()]
    return " ".join(parts)


def cmd_serve(args) -> int:
    config = _episode_config(args, "external", args.seed, 0)
    handler = make_session_handler(
        config, args.episodes if args.episodes > 0 else None, Path(args.out) if args.out else None
    )
    serve_policy_protocol(args.endpoint, handler, max_sessions=args.sessions)
    return 0


def cmd_metrics(args) -> int:
    in_dir = Path(args.in_dir)
    rows = []
    for path in sorted(in_dir.glob("*.jsonl")):
        log = read_episode_log(path)
        metrics = compute_metrics(log)
        rows.append(
            {
                "log": path.name,
                "policy": log.header["config"]["policy"],
                "seed": log.header["config"]["seed"],
                "reason": metrics.reason,
                "steps": metrics.steps,
                "distance": metrics.total_distance,
                "coverage": metrics.coverage,
                "map_error": metrics.final_map_error,
                "occupancy_mismatch": metrics.occupancy_mismatch,
                "odom_factors": metrics.loop_closure_counts.get("ODOM", 0),
                "ssm_factors": metrics.loop_closure_counts.get("SSM", 0),
                "pm_factors": metrics.loop_closure_counts.get("PM", 0),
                "sm_factors": metrics.loop_closure_counts.get("SM", 0),
                "mean_decision_s": metrics.per_decision_wall_time,
            }
        )
    if not rows:
        logger.error("no episode logs found in %s", in_dir)
        return 1
    with open(args.csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.csv}")
    return 0


def cmd_bench(args) -> int:
    counts = [int(c) for c in args.counts.split(",")]
    rows = bench_decision_time(counts, reps=args.reps)
    text = bench_rows_to_csv(rows)
    Path(args.csv).write_text(text)
    print(text, end="")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="explore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run episodes with a built-in or external policy")
    _add_episode_args(p_run)
    p_run.add_argument("--policy", choices=["nf", "random", "em", "external"], default="nf")
    p_run.add_argument("--episodes", type=int, default=1)
    p_run.add_argument("--out", default=None, help="directory for episode logs")
    p_run.add_argument("--parallel", type=int, default=1)
    p_run.add_argument("--endpoint", default=DEFAULT_ENDPOINT, help="policy peer (external only)")
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve", help="serve the policy protocol; episodes run on demand")
    _add_episode_args(p_serve)
    p_serve.add_argument("--endpoint", default=DEFAULT_ENDPOINT, help="tcp:HOST:PORT or stdio")
    p_serve.add_argument("--episodes", type=int, default=0, help="0 = until the peer closes")
    p_serve.add_argument("--sessions", type=int, default=1)
    p_serve.add_argument("--out", default=None, help="directory for episode logs")
    p_serve.set_defaults(func=cmd_serve)

    p_metrics = sub.add_parser("metrics", help="aggregate episode logs into a CSV")
    p_metrics.add_argument("--in", dest="in_dir", required=True)
    p_metrics.add_argument("--csv", required=True)
    p_metrics.set_defaults(func=cmd_metrics)

    p_bench = sub.add_parser("bench", help="decision-time scaling benchmark")
    p_bench.add_argument("--counts", default="2,4,8,16")
    p_bench.add_argument("--csv", required=True)
    p_bench.add_argument("--reps", type=int, default=20)
    p_bench.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
