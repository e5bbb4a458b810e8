"""Episode orchestration: the sense / optimize / map / decide / execute loop,
termination, JSONL logging, metrics, the protocol serve loop, and the
decision-time benchmark.

Episode logs are byte-deterministic for a fixed (config, seed): wall-clock
timings live in a separate sidecar, never in the log itself.
"""
from __future__ import annotations

import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .exploration_graph import build_graph, graph_to_wire, make_loop_closure_predictor
from .geometry import compose_jacobian, wrap_angle
from .mapping import (
    FREE as EST_FREE,
    OccupancyGrid,
    UNKNOWN,
    VirtualMap,
    extract_frontiers,
    integrate_scan,
    map_utility,
    transform_scan_cells,
    update_virtual_map,
)
from .planning import plan_path
from .policies import (
    BeliefSnapshot,
    ProtocolActionError,
    compute_candidate_rewards,
    em_select,
    enumerate_candidates,
    external_select,
    nearest_frontier_select,
    normalized_reward,
    random_select,
)
from .protocol import PolicySession, ProtocolTimeout, SessionClosed
from .slam import (
    Factor,
    FactorGraphState,
    FactorKind,
    SlamParams,
    detect_loop_closures,
    sequential_scan_factor,
)
from .world import (
    FREE as TRUE_FREE,
    Control,
    GroundTruthWorld,
    NoiseParams,
    SensorParams,
    apply_motion,
    load_environment,
    simulate_scan,
)

POLICIES = ("nf", "random", "em", "external")
TERMINAL_REASONS = ("coverage", "no_frontiers", "max_steps", "abort")

MIN_TURN_RAD = 0.02  # heading error below this skips the turn-in-place command


class InvariantViolation(AssertionError):
    """A per-step runtime invariant failed."""


def mean_trajectory_error(estimates, truths) -> float:
    """Mean absolute position error between estimated and true trajectories."""
    if len(estimates) != len(truths):
        raise ValueError("trajectories differ in length")
    return float(np.mean([est.distance_to(true) for est, true in zip(estimates, truths)]))


@dataclass(frozen=True)
class EpisodeConfig:
    env_path: str
    policy: str = "nf"
    seed: int = 0
    episode_index: int = 0
    max_steps: int = 200
    coverage_target: float = 0.85
    alpha: float = 0.05
    noise: NoiseParams = field(default_factory=NoiseParams)
    sensor: SensorParams = field(default_factory=SensorParams)
    slam: SlamParams | None = None  # derived from noise when omitted
    min_frontier_size: int = 2
    dilation: int = 1
    check_invariants: bool = True
    env_text: str | None = None  # inline config overriding env_path content

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if not 0.0 < self.coverage_target <= 1.0:
            raise ValueError("coverage_target must be in (0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def header_dict(self) -> dict:
        return {
            "type": "header",
            "v": 1,
            "version": __version__,
            "config": {
                "env": self.env_path,
                "policy": self.policy,
                "seed": self.seed,
                "episode": self.episode_index,
                "max_steps": self.max_steps,
                "coverage_target": self.coverage_target,
                "alpha": self.alpha,
                "noise": asdict(self.noise),
                "sensor": asdict(self.sensor),
                "min_frontier_size": self.min_frontier_size,
                "dilation": self.dilation,
            },
        }


@dataclass
class EpisodeLog:
    header: dict
    decisions: list = field(default_factory=list)
    terminal: dict | None = None
    wall_times: list = field(default_factory=list)  # sidecar; not serialized
    abort_cause: str | None = None

    def to_jsonl(self) -> str:
        out = io.StringIO()
        for record in [self.header, *self.decisions, *( [self.terminal] if self.terminal else [] )]:
            out.write(json.dumps(record, separators=(",", ":")))
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        header = None
        decisions = []
        terminal = None
        for line in text.splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            kind = record.get("type")
            if kind == "header":
                header = record
            elif kind == "decision":
                decisions.append(record)
            elif kind == "terminal":
                terminal = record
            else:
                raise ValueError(f"unknown log record type {kind!r}")
        if header is None:
            raise ValueError("log is missing its header record")
        return cls(header=header, decisions=decisions, terminal=terminal)


@dataclass(frozen=True)
class Metrics:
    final_map_error: float
    coverage_curve: tuple  # of (cumulative distance, coverage)
    total_distance: float
    coverage: float
    loop_closure_counts: dict
    occupancy_mismatch: int
    steps: int
    reason: str
    per_decision_wall_time: float | None = None

    def summary(self) -> dict:
        return {
            "map_error": self.final_map_error,
            "coverage": self.coverage,
            "distance": self.total_distance,
            "steps": self.steps,
            "reason": self.reason,
        }


def compute_metrics(log: EpisodeLog) -> Metrics:
    """Aggregate an episode log; raises on a truncated log."""
    if log.terminal is None:
        raise ValueError("truncated log: no terminal record")
    term = log.terminal
    curve = [(rec["distance"], rec["coverage"]) for rec in log.decisions]
    curve.append((term["distance"], term["coverage"]))
    coverages = [c for _, c in curve]
    if any(b + 1e-12 < a for a, b in zip(coverages, coverages[1:])):
        raise ValueError("coverage curve is not non-decreasing")
    wall = float(np.mean(log.wall_times)) if log.wall_times else None
    return Metrics(
        final_map_error=term["map_error"],
        coverage_curve=tuple(curve),
        total_distance=term["distance"],
        coverage=term["coverage"],
        loop_closure_counts=dict(term["loop_closures"]),
        occupancy_mismatch=term["occupancy_mismatch"],
        steps=term["steps"],
        reason=term["reason"],
        per_decision_wall_time=wall,
    )


class _Episode:
    """Mutable episode state; one instance per run_episode call."""

    def __init__(self, config: EpisodeConfig, world: GroundTruthWorld):
        self.config = config
        self.world = world
        self.rng = np.random.default_rng(config.seed)
        self.slam_params = config.slam or SlamParams.from_noise(config.noise)

        if not world.start_poses:
            raise ValueError("environment declares no start poses")
        self.true_pose = world.start_poses[config.episode_index % len(world.start_poses)]
        self.true_trajectory = [self.true_pose]

        self.state = FactorGraphState()
        self.state.add_pose(self.true_pose)
        self.state.add_factor(
            Factor(
                kind=FactorKind.PRIOR,
                endpoints=(0,),
                measurement=self.true_pose,
                information=self.slam_params.prior_information,
            )
        )
        self.grid = OccupancyGrid(world.width_m, world.height_m, world.resolution)
        self.vmap = VirtualMap(world.width_m, world.height_m, world.resolution)
        self.scan_history = []
        self.used_object_ids: set = set()
        self.object_first_observer: dict = {}
        self.loop_counts = {k.value: 0 for k in FactorKind if k is not FactorKind.PRIOR}
        self.distance = 0.0
        self.marginals = None
        self.cov_pred = np.zeros((3, 3))  # dead-reckoned cov between optimizations
        self.prev_utility = math.inf
        self.prev_coverage = -1.0
        self.truth_free = int(np.count_nonzero(world.grid == TRUE_FREE))

    # -- per-pose bookkeeping -------------------------------------------

    def sense_at_current(self) -> None:
        index = len(self.state.poses) - 1
        scan = simulate_scan(
            self.world, self.true_pose, self.config.sensor.max_range, self.config.sensor.n_beams
        )
        self.scan_history.append(scan)
        assert len(self.scan_history) == len(self.state.poses)

        if index > 0:
            ssm = sequential_scan_factor(
                index, self.scan_history[index - 1], scan, self.slam_params, self.rng
            )
            if ssm is not None:
                self.state.add_factor(ssm)
                self.loop_counts[FactorKind.SSM.value] += 1
            for factor in detect_loop_closures(
                self.state, index, scan, self.scan_history, self.slam_params, self.rng,
                self.used_object_ids,
            ):
                self.state.add_factor(factor)
                self.loop_counts[factor.kind.value] += 1

        for oid in sorted(scan.observed_objects):
            self.object_first_observer.setdefault(oid, index)

        est = self.state.poses[index]
        integrate_scan(self.grid, est, scan)
        free, occ = transform_scan_cells(scan, est, self.grid)
        update_virtual_map(
            self.vmap, self.cov_pred[:2, :2], free | occ, sigma_range=self.config.noise.sigma_range
        )
        # The robot's own footprint is direct evidence of free space; without
        # this, drift can strand the planner on a cell mis-marked occupied.
        cx, cy = self.grid.cell_of(est.x, est.y)
        if self.grid.in_bounds(cx, cy):
            self.grid.cells[cy, cx] = EST_FREE

    def optimize(self) -> None:
        self.state.optimize()
        self.marginals = self.state.all_marginals()
        index = len(self.state.poses) - 1
        self.cov_pred = np.array(self.marginals[index])
        # Re-offer the freshest scan at the optimized covariance.
        est = self.state.poses[index]
        scan = self.scan_history[index]
        free, occ = transform_scan_cells(scan, est, self.grid)
        update_virtual_map(
            self.vmap, self.cov_pred[:2, :2], free | occ, sigma_range=self.config.noise.sigma_range
        )
        cx, cy = self.grid.cell_of(est.x, est.y)
        if self.grid.in_bounds(cx, cy):
            self.grid.cells[cy, cx] = EST_FREE

    def execute_command(self, u: Control) -> bool:
        """One motion step: move, extend the graph, sense. Returns the
        collision flag."""
        result = apply_motion(self.world, self.true_pose, u, self.config.noise, self.rng)
        self.distance += self.true_pose.distance_to(result.pose)
        self.true_pose = result.pose
        self.true_trajectory.append(result.pose)

        prev_index = len(self.state.poses) - 1
        prev_est = self.state.poses[prev_index]
        new_est = prev_est.compose(result.odometry)
        index = self.state.add_pose(new_est)
        self.state.add_factor(
            Factor(
                kind=FactorKind.ODOMETRY,
                endpoints=(prev_index, index),
                measurement=result.odometry,
                information=self.slam_params.odom_information,
            )
        )
        self.loop_counts[FactorKind.ODOMETRY.value] += 1
        jac = compose_jacobian(prev_est, result.odometry)
        q = np.diag(
            [
                self.config.noise.sigma_trans**2,
                self.config.noise.sigma_trans**2,
                self.config.noise.sigma_rot**2,
            ]
        )
        self.cov_pred = jac @ self.cov_pred @ jac.T + 2.0 * q
        self.sense_at_current()
        return result.collided

    # -- derived quantities -----------------------------------------------

    def coverage(self) -> float:
        known = self.grid.cells != UNKNOWN
        truth_free = self.world.grid == TRUE_FREE
        return float(np.count_nonzero(known & truth_free)) / self.truth_free

    def map_error(self) -> float:
        return mean_trajectory_error(self.state.poses, self.true_trajectory)

    def occupancy_mismatch(self) -> int:
        known = self.grid.cells != UNKNOWN
        est_free = self.grid.cells == EST_FREE
        truth_free = self.world.grid == TRUE_FREE
        return int(np.count_nonzero(known & (est_free != truth_free)))

    def check_invariants(self, graph=None) -> None:
        if not self.config.check_invariants:
            return
        utility = map_utility(self.vmap)
        if utility > self.prev_utility + 1e-9:
            raise InvariantViolation(
                f"virtual-map utility increased: {self.prev_utility} -> {utility}"
            )
        self.prev_utility = utility
        cov = self.coverage()
        if cov < self.prev_coverage - 1e-12:
            raise InvariantViolation(f"coverage decreased: {self.prev_coverage} -> {cov}")
        self.prev_coverage = cov
        if np.any(self.vmap.dets <= 0.0) or np.any(self.vmap.covs[:, :, 0, 0] <= 0.0):
            raise InvariantViolation("virtual landmark covariance not positive-definite")
        if np.any(self.vmap.dets > self.vmap.initial_det() + 1e-15):
            raise InvariantViolation("virtual landmark determinant above its initial value")
        if self.marginals is not None:
            eigs = np.linalg.eigvalsh(self.marginals)
            if eigs.min() < -1e-9:
                raise InvariantViolation(f"marginal covariance not PSD (min eig {eigs.min()})")
        if graph is not None:
            graph.validate()


def run_episode(config: EpisodeConfig, session: PolicySession | None = None) -> EpisodeLog:
    """Run one episode to termination and return its log.

    External policy errors (bad action, timeout, lost peer) terminate the
    episode with reason "abort"; the cause is kept on the log.
    """
    if config.policy == "external" and session is None:
        raise ValueError("external policy requires a protocol session")
    env_text = config.env_text
    if env_text is None:
        env_text = Path(config.env_path).read_text()
    world = load_environment(env_text)
    ep = _Episode(config, world)
    log = EpisodeLog(header=config.header_dict())

    ep.sense_at_current()
    reason = None
    step = 0
    try:
        while True:
            ep.optimize()
            ep.check_invariants()
            coverage = ep.coverage()
            if coverage >= config.coverage_target:
                reason = "coverage"
                break
            if step >= config.max_steps:
                reason = "max_steps"
                break

            t0 = time.perf_counter()
            current_cell = ep.grid.cell_of(ep.state.poses[-1].x, ep.state.poses[-1].y)
            frontiers = extract_frontiers(ep.grid, config.min_frontier_size)
            plans = {
                f.id: plan_path(ep.grid, current_cell, f.waypoint_cell, config.dilation, f.id)
                for f in frontiers
            }
            positions = np.array([[p.x, p.y] for p in ep.state.poses])
            predictor = make_loop_closure_predictor(
                ep.grid,
                positions,
                len(ep.state.poses) - 1,
                ep.object_first_observer,
                {oid: cells for oid, cells in world.objects.items()},
                ep.slam_params.pm_radius,
                ep.slam_params.pm_gap_min,
                config.sensor.max_range,
                config.sensor.n_beams,
            )
            graph = build_graph(ep.state, ep.marginals, ep.vmap, frontiers, plans, predictor)
            if not graph.action_node_ids:
                reason = "no_frontiers"
                break
            ep.check_invariants(graph)
            candidates = enumerate_candidates(graph, ep.grid, current_cell, config.dilation)
            if not candidates:
                reason = "no_frontiers"
                break

            snapshot = BeliefSnapshot(
                grid=ep.grid,
                vmap=ep.vmap,
                pose_positions=positions,
                marginals=ep.marginals,
                current_pose=ep.state.poses[-1],
                current_index=len(ep.state.poses) - 1,
                noise=config.noise,
                slam_params=ep.slam_params,
                object_first_observer=ep.object_first_observer,
                object_cells=dict(world.objects),
                alpha=config.alpha,
                max_range=config.sensor.max_range,
                n_beams=config.sensor.n_beams,
            )
            rewards = compute_candidate_rewards(snapshot, candidates)
            if config.policy == "nf":
                chosen = nearest_frontier_select(candidates)
            elif config.policy == "random":
                chosen = random_select(candidates, ep.rng)
            elif config.policy == "em":
                chosen = em_select(candidates, snapshot, rewards)
            else:
                chosen = external_select(candidates, graph, session)
            breakdown = normalized_reward(snapshot, candidates, chosen, rewards)
            if session is not None and config.policy == "external":
                session.post_reward(breakdown.normalized)
            log.wall_times.append(time.perf_counter() - t0)

            est = ep.state.poses[-1]
            log.decisions.append(
                {
                    "type": "decision",
                    "step": step,
                    "graph": graph_to_wire(graph),
                    "action": chosen.node_id,
                    "reward": asdict(breakdown),
                    "true_pose": [ep.true_pose.x, ep.true_pose.y, ep.true_pose.theta],
                    "est_pose": [est.x, est.y, est.theta],
                    "coverage": coverage,
                    "map_error": ep.map_error(),
                    "distance": ep.distance,
                }
            )

            _execute_path(ep, chosen.path.cells, config)
            step += 1
    except ProtocolActionError:
        reason = "abort"
        log.abort_cause = "bad_action"
    except ProtocolTimeout:
        reason = "abort"
        log.abort_cause = "timeout"
    except SessionClosed:
        reason = "abort"
        log.abort_cause = "session_closed"

    log.terminal = {
        "type": "terminal",
        "reason": reason,
        "steps": step,
        "coverage": ep.coverage(),
        "map_error": ep.map_error(),
        "distance": ep.distance,
        "occupancy_mismatch": ep.occupancy_mismatch(),
        "loop_closures": ep.loop_counts,
        "poses": len(ep.state.poses),
    }
    return log


def _execute_path(ep: _Episode, cells, config: EpisodeConfig) -> None:
    """Drive the path cell by cell, replanning when a step becomes blocked."""
    goal = cells[-1]
    remaining = list(cells[1:])
    while remaining:
        nxt = remaining[0]
        if ep.grid.cells[nxt[1], nxt[0]] != EST_FREE:
            current_cell = ep.grid.cell_of(ep.state.poses[-1].x, ep.state.poses[-1].y)
            path = plan_path(ep.grid, current_cell, goal, config.dilation)
            if path is None or len(path.cells) < 2:
                return  # goal unreachable now; decide again
            remaining = list(path.cells[1:])
            nxt = remaining[0]
        est = ep.state.poses[-1]
        tx, ty = ep.grid.cell_center(*nxt)
        dx, dy = tx - est.x, ty - est.y
        dist = math.hypot(dx, dy)
        if dist > 1e-9:
            bearing = math.atan2(dy, dx)
            turn = wrap_angle(bearing - est.theta)
            if abs(turn) > MIN_TURN_RAD:
                ep.execute_command(Control(0.0, turn))
            ep.execute_command(Control(dist, 0.0))
        ep.check_invariants()
        remaining.pop(0)


def write_episode_log(log: EpisodeLog, out_dir, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.jsonl"
    path.write_text(log.to_jsonl())
    if log.wall_times:
        timing = out / f"{name}.timing.csv"
        with timing.open("w") as fh:
            fh.write("step,seconds\n")
            for i, t in enumerate(log.wall_times):
                fh.write(f"{i},{t:.9f}\n")
    return path


def read_episode_log(path) -> EpisodeLog:
    path = Path(path)
    log = EpisodeLog.from_jsonl(path.read_text())
    timing = path.parent / (path.stem + ".timing.csv")
    if timing.exists():
        for line in timing.read_text().splitlines()[1:]:
            _, seconds = line.split(",")
            log.wall_times.append(float(seconds))
    return log


# -- protocol serving ---------------------------------------------------------


def make_session_handler(config: EpisodeConfig, episodes: int | None, out_dir=None):
    """Session handler running external-policy episodes until the peer
    closes (or `episodes` episodes have run)."""

    def handler(session: PolicySession) -> None:
        index = 0
        while episodes is None or index < episodes:
            ep_config = _with_episode(config, index)
            session.begin_episode(index, ep_config.seed)
            log = run_episode(ep_config, session=session)
            if out_dir is not None:
                write_episode_log(log, out_dir, f"episode_{index:04d}")
            if log.abort_cause == "session_closed":
                return
            metrics = compute_metrics(log)
            session.end_episode(metrics.summary())
            index += 1

    return handler


def _with_episode(config: EpisodeConfig, index: int) -> EpisodeConfig:
    return replace(config, seed=config.seed + index, episode_index=index, policy="external")


# -- decision-time benchmark ---------------------------------------------------


def _bench_world_text() -> str:
    size = 20.0
    return json.dumps(
        {
            "size_m": [size, size],
            "resolution": 0.5,
            "objects": [],
            "start_poses": [[size / 2, size / 2, 0.0]],
        }
    )


def bench_decision_time(counts, reps: int = 20, seed: int = 7):
    """Mean EM and NF selection time per candidate count.

    EM forward-simulates every candidate, so its time grows linearly with
    the count; NF is an argmin over precomputed costs. NF is timed over an
    inner loop to keep sub-microsecond means stable.
    """
    from .policies import CandidateAction
    from .planning import PlannedPath

    rows = []
    for count in counts:
        world = load_environment(_bench_world_text())
        config = EpisodeConfig(env_path="<bench>", env_text=_bench_world_text(), seed=seed)
        ep = _Episode(config, world)
        ep.sense_at_current()
        # A short scripted run to populate poses and the map.
        for _ in range(6):
            ep.execute_command(Control(0.5, 0.0))
        ep.optimize()

        positions = np.array([[p.x, p.y] for p in ep.state.poses])
        snapshot = BeliefSnapshot(
            grid=ep.grid,
            vmap=ep.vmap,
            pose_positions=positions,
            marginals=ep.marginals,
            current_pose=ep.state.poses[-1],
            current_index=len(ep.state.poses) - 1,
            noise=config.noise,
            slam_params=ep.slam_params,
            alpha=config.alpha,
            max_range=config.sensor.max_range,
            n_beams=config.sensor.n_beams,
        )
        rng = np.random.default_rng(seed)
        current_cell = ep.grid.cell_of(ep.state.poses[-1].x, ep.state.poses[-1].y)
        candidates = []
        for k in range(count):
            length = 6 + int(rng.integers(4))
            direction = 1 if k % 2 == 0 else -1
            cells = [current_cell]
            for j in range(length):
                cx, cy = cells[-1]
                cells.append((cx + direction, cy) if j % 2 == 0 else (cx, cy + direction))
            candidates.append(
                CandidateAction(
                    node_id=1000 + k,
                    path=PlannedPath(cells=tuple(cells), length_m=0.5 * length, goal_frontier_id=k),
                )
            )

        em_times = []
        nf_times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            em_select(candidates, snapshot)
            em_times.append(time.perf_counter() - t0)
            inner = 2000
            t0 = time.perf_counter()
            for _ in range(inner):
                nearest_frontier_select(candidates)
            nf_times.append((time.perf_counter() - t0) / inner)
        rows.append((count, float(np.mean(em_times)), float(np.mean(nf_times))))
    return rows


def bench_rows_to_csv(rows) -> str:
    lines = ["candidates,em_mean_s,nf_mean_s"]
    for count, em_t, nf_t in rows:
        lines.append(f"{count},{em_t:.9f},{nf_t:.9f}")
    return "\n".join(lines) + "\n"
