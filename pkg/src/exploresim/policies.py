"""Action selection policies and the normalized reward oracle.

The EM baseline forward-simulates the pose covariance and the virtual map
along each candidate path and picks the action maximizing
U0 - U' - alpha * cost. The normalized reward rescales the raw rewards of
all candidates to [-1, 0] when the best action is the nearest frontier and
to [-1, 1] otherwise, so reward sign also tells the learner whether greedy
frontier-chasing was optimal.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2, compose_jacobian, wrap_angle
from .mapping import (
    OccupancyGrid,
    VirtualMap,
    map_utility,
    predict_visible_cells,
    update_virtual_map,
)
from .planning import PlannedPath, plan_path
from .slam import SlamParams
from .world import NoiseParams

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.05  # reward cost weight, per meter

RANGE_NEAREST_BEST = "[-1,0]"
RANGE_FULL = "[-1,1]"


@dataclass(frozen=True)
class CandidateAction:
    node_id: int
    path: PlannedPath
    cost: float = -1.0  # path length; filled from the path when omitted

    def __post_init__(self) -> None:
        if self.cost < 0.0:
            object.__setattr__(self, "cost", self.path.length_m)


@dataclass(frozen=True)
class BeliefPrediction:
    covariances: tuple  # 3x3 chain along the path waypoints
    vmap: VirtualMap  # predicted snapshot after traveling the path
    utility: float  # U' = map_utility(vmap)


@dataclass(frozen=True)
class CandidateReward:
    raw: float
    u0: float
    u_prime: float
    cost: float


@dataclass(frozen=True)
class RewardBreakdown:
    u0: float
    u_prime: float
    cost: float
    alpha: float
    raw: float
    normalized: float
    range_tag: str


@dataclass
class BeliefSnapshot:
    """Value copy of everything the forward simulation reads.

    Safe to share across candidate evaluations; the predicted virtual map is
    copied per candidate.
    """

    grid: OccupancyGrid
    vmap: VirtualMap
    pose_positions: np.ndarray  # (n, 2) estimated positions
    marginals: np.ndarray  # (n, 3, 3)
    current_pose: Pose2
    current_index: int
    noise: NoiseParams
    slam_params: SlamParams
    object_first_observer: dict = field(default_factory=dict)
    object_cells: dict = field(default_factory=dict)
    alpha: float = DEFAULT_ALPHA
    max_range: float = 3.0
    n_beams: int = 180
    d_step: float | None = None  # waypoint spacing; defaults to map resolution


def enumerate_candidates(graph, grid: OccupancyGrid, current_cell, dilation: int = 1):
    """One candidate per action node, ordered by node id. Frontiers that
    became unreachable since graph construction are dropped with a warning."""
    candidates = []
    for node_id in graph.action_node_ids:
        node = graph.node(node_id)
        goal = grid.cell_of(*node.position)
        path = plan_path(grid, current_cell, goal, dilation=dilation, goal_frontier_id=node.frontier_id)
        if path is None:
            logger.warning("dropping unreachable frontier node %d at %s", node_id, node.position)
            continue
        candidates.append(CandidateAction(node_id=node_id, path=path))
    return candidates


def nearest_frontier_select(candidates) -> CandidateAction:
    """Argmin path cost; ties break on the smaller node id."""
    if not candidates:
        raise ValueError("no candidates to select from")
    costs = np.fromiter((c.cost for c in candidates), dtype=float, count=len(candidates))
    ids = np.fromiter((c.node_id for c in candidates), dtype=int, count=len(candidates))
    return candidates[int(np.lexsort((ids, costs))[0])]


def random_select(candidates, rng: np.random.Generator) -> CandidateAction:
    if not candidates:
        raise ValueError("no candidates to select from")
    return candidates[int(rng.integers(len(candidates)))]


def _waypoints_along(path: PlannedPath, start_xy, resolution: float, d_step: float):
    """Sample points every d_step along the path polyline, always including
    the final endpoint."""
    points = [np.asarray(start_xy, dtype=float)]
    for ix, iy in path.cells[1:]:
        points.append(np.array([(ix + 0.5) * resolution, (iy + 0.5) * resolution]))
    if len(points) == 1:
        return [points[0]]
    waypoints = [points[0]]
    since_last = 0.0
    for a, b in zip(points[:-1], points[1:]):
        seg = b - a
        seg_len = float(np.hypot(*seg))
        if seg_len == 0.0:
            continue
        along = 0.0
        while True:
            need = d_step - since_last
            if along + need <= seg_len + 1e-12:
                along += need
                waypoints.append(a + seg * (along / seg_len))
                since_last = 0.0
            else:
                since_last += seg_len - along
                break
    if np.hypot(*(waypoints[-1] - points[-1])) > 1e-9:
        waypoints.append(points[-1])
    return waypoints


def belief_forward_simulate(snapshot: BeliefSnapshot, candidate: CandidateAction) -> BeliefPrediction:
    """Predict the pose covariance chain and virtual-map state after driving
    the candidate path.

    The covariance is propagated through the SE(2) composition Jacobian with
    per-step motion noise, fused against prior-pose marginals wherever the
    loop-closure predicate fires, and the virtual map absorbs a predicted
    scan at every waypoint (ray-cast on the estimated grid, unknown treated
    as free).
    """
    p = snapshot.slam_params
    d_step = snapshot.d_step if snapshot.d_step is not None else snapshot.grid.resolution
    waypoints = _waypoints_along(
        candidate.path, (snapshot.current_pose.x, snapshot.current_pose.y),
        snapshot.grid.resolution, d_step,
    )

    q_step = np.diag(
        [snapshot.noise.sigma_trans**2, snapshot.noise.sigma_trans**2, snapshot.noise.sigma_rot**2]
    )
    r_pm = np.diag([p.sigma_pm_trans**2, p.sigma_pm_trans**2, p.sigma_pm_rot**2])
    r_sm = np.diag([p.sigma_sm_trans**2, p.sigma_sm_trans**2, p.sigma_sm_rot**2])

    limit = snapshot.current_index - p.pm_gap_min
    prior_xy = snapshot.pose_positions[: limit + 1] if limit >= 0 else np.empty((0, 2))

    cell_to_object = {}
    if snapshot.object_first_observer:
        for oid, cells in snapshot.object_cells.items():
            for cell in cells:
                cell_to_object[cell] = oid

    vmap = snapshot.vmap.copy()
    cov = np.array(snapshot.marginals[snapshot.current_index], dtype=float)
    heading = snapshot.current_pose.theta
    closed_objects = set()
    chain = []

    for k, wp in enumerate(waypoints):
        if k > 0:
            seg = wp - waypoints[k - 1]
            seg_len = float(np.hypot(*seg))
            bearing = math.atan2(seg[1], seg[0])
            if abs(wrap_angle(bearing - heading)) > 1e-12:
                # Turn-in-place command: composition Jacobian is identity.
                cov = cov + q_step
                heading = bearing
            delta = Pose2(seg_len, 0.0, 0.0)
            jac = compose_jacobian(Pose2(waypoints[k - 1][0], waypoints[k - 1][1], heading), delta)
            cov = jac @ cov @ jac.T + q_step * max(seg_len / snapshot.grid.resolution, 1e-9)

        # Loop closure fusion, mirroring detection: nearest qualifying pose
        # (PM), then one fusion per newly re-observable object (SM).
        if len(prior_xy):
            dists = np.hypot(prior_xy[:, 0] - wp[0], prior_xy[:, 1] - wp[1])
            j = int(np.argmin(dists))
            if dists[j] <= p.pm_radius:
                cov = _fuse(cov, snapshot.marginals[j], r_pm)

        free_cells, hit_cells = predict_visible_cells(
            snapshot.grid, wp[0], wp[1], max_range=snapshot.max_range, n_beams=snapshot.n_beams
        )
        if cell_to_object:
            for cell in hit_cells:
                oid = cell_to_object.get(cell)
                if oid is None or oid in closed_objects:
                    continue
                j = snapshot.object_first_observer[oid]
                if j < snapshot.current_index:
                    cov = _fuse(cov, snapshot.marginals[j], r_sm)
                    closed_objects.add(oid)

        update_virtual_map(
            vmap, cov[:2, :2], free_cells | hit_cells, sigma_range=snapshot.noise.sigma_range
        )
        chain.append(cov.copy())

    return BeliefPrediction(covariances=tuple(chain), vmap=vmap, utility=map_utility(vmap))


def _fuse(cov: np.ndarray, prior_marginal: np.ndarray, r_lc: np.ndarray) -> np.ndarray:
    fused = np.linalg.inv(np.linalg.inv(cov) + np.linalg.inv(prior_marginal + r_lc))
    return 0.5 * (fused + fused.T)


def raw_reward(
    snapshot: BeliefSnapshot,
    candidate: CandidateAction,
    prediction: BeliefPrediction | None = None,
) -> float:
    """U0 - U' - alpha * path cost for one candidate."""
    if prediction is None:
        prediction = belief_forward_simulate(snapshot, candidate)
    u0 = map_utility(snapshot.vmap)
    return u0 - prediction.utility - snapshot.alpha * candidate.cost


def compute_candidate_rewards(snapshot: BeliefSnapshot, candidates) -> dict:
    """Raw rewards for every candidate, keyed by action node id."""
    u0 = map_utility(snapshot.vmap)
    rewards = {}
    for c in candidates:
        prediction = belief_forward_simulate(snapshot, c)
        rewards[c.node_id] = CandidateReward(
            raw=u0 - prediction.utility - snapshot.alpha * c.cost,
            u0=u0,
            u_prime=prediction.utility,
            cost=c.cost,
        )
    return rewards


def em_select(candidates, snapshot: BeliefSnapshot, rewards: dict | None = None) -> CandidateAction:
    """Argmax of the raw reward; ties break on the smaller node id."""
    if not candidates:
        raise ValueError("no candidates to select from")
    if rewards is None:
        rewards = compute_candidate_rewards(snapshot, candidates)
    return max(candidates, key=lambda c: (rewards[c.node_id].raw, -c.node_id))


def normalize_rewards(raws: dict, nearest_id: int, chosen_id: int):
    """Affine normalization of the chosen candidate's raw reward.

    With l/u the min/max raw reward, r = (raw - l) / (u - l) (defined as 1
    when u = l). Returns (r - 1, "[-1,0]") when the maximum belongs to the
    nearest frontier, else (2r - 1, "[-1,1]").
    """
    values = list(raws.values())
    lo, hi = min(values), max(values)
    r = 1.0 if hi == lo else (raws[chosen_id] - lo) / (hi - lo)
    if raws[nearest_id] == hi:
        return r - 1.0, RANGE_NEAREST_BEST
    return 2.0 * r - 1.0, RANGE_FULL


def normalized_reward(
    snapshot: BeliefSnapshot,
    candidates,
    chosen: CandidateAction,
    rewards: dict | None = None,
) -> RewardBreakdown:
    """Full reward breakdown for the chosen candidate, normalized over the
    raw rewards of the whole candidate set."""
    if not candidates:
        raise ValueError("no candidates to normalize over")
    if rewards is None:
        rewards = compute_candidate_rewards(snapshot, candidates)
    nearest = nearest_frontier_select(candidates)
    raws = {node_id: cr.raw for node_id, cr in rewards.items()}
    normalized, tag = normalize_rewards(raws, nearest.node_id, chosen.node_id)
    cr = rewards[chosen.node_id]
    return RewardBreakdown(
        u0=cr.u0,
        u_prime=cr.u_prime,
        cost=cr.cost,
        alpha=snapshot.alpha,
        raw=cr.raw,
        normalized=normalized,
        range_tag=tag,
    )


def external_select(candidates, graph, session) -> CandidateAction:
    """Delegate the decision to a protocol peer; the peer must answer with
    one of the graph's action node ids that survived candidate enumeration."""
    if not candidates:
        raise ValueError("no candidates to select from")
    node_id = session.request_action(graph)
    by_id = {c.node_id: c for c in candidates}
    if node_id not in by_id:
        session.send_error("bad_action", f"node {node_id} is not a selectable action")
        raise ProtocolActionError(f"peer chose invalid action node {node_id}")
    return by_id[node_id]


class ProtocolActionError(RuntimeError):
    """Peer answered with a node id that is not a valid action."""
