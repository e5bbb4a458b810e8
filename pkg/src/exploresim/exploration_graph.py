"""The exploration graph: the state abstraction handed to policies.

Nodes are all SLAM poses plus a curated set of frontiers (the nearest
reachable one and every frontier predicted to close a loop); every edge is
weighted with the Euclidean distance between its endpoints. Pose-pose edges
mirror the SLAM factors one-to-one. Each node carries a 4-feature vector:
uncertainty (trace of the 2x2 position covariance), distance and bearing to
the current pose, and a node-identity tag.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mapping import Frontier, OccupancyGrid, VirtualMap, predict_visible_cells
from .slam import FactorGraphState

CURRENT_POSE = "current_pose"
PAST_POSE = "past_pose"
FRONTIER = "frontier"

_KIND_TAG = {CURRENT_POSE: 0.0, PAST_POSE: -1.0, FRONTIER: 1.0}

WIRE_VERSION = 1


class GraphFormatError(ValueError):
    """Raised when graph wire text fails to parse or validate."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class GraphNode:
    id: int
    kind: str
    position: tuple  # (x, y) meters
    features: tuple  # (s1, s2, s3, s4)
    frontier_id: int = field(default=-1, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in _KIND_TAG:
            raise GraphFormatError(f"node {self.id}: unknown kind {self.kind!r}")
        s1, s2, s3, s4 = self.features
        if s4 != _KIND_TAG[self.kind]:
            raise GraphFormatError(f"node {self.id}: s4={s4} does not match kind {self.kind}")
        if s1 < 0 or s2 < 0:
            raise GraphFormatError(f"node {self.id}: s1 and s2 must be non-negative")
        if not (-math.pi < s3 <= math.pi + 1e-12):
            raise GraphFormatError(f"node {self.id}: s3={s3} outside (-pi, pi]")
        if not all(math.isfinite(v) for v in (*self.position, *self.features)):
            raise GraphFormatError(f"node {self.id}: non-finite value")


@dataclass(frozen=True)
class GraphEdge:
    u: int
    v: int
    weight: float


@dataclass(frozen=True)
class ExplorationGraph:
    nodes: tuple  # of GraphNode, ids dense 0..n-1
    edges: tuple  # of GraphEdge
    action_node_ids: tuple  # frontier node ids, ascending

    def node(self, node_id: int) -> GraphNode:
        return self.nodes[node_id]

    def validate(self) -> None:
        """Check the structural invariants; raises GraphFormatError."""
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(self.nodes))):
            raise GraphFormatError("node ids must be dense and ordered")
        current = [n.id for n in self.nodes if n.kind == CURRENT_POSE]
        if len(current) != 1:
            raise GraphFormatError(f"expected exactly one current pose node, got {len(current)}")
        pose_ids = [n.id for n in self.nodes if n.kind != FRONTIER]
        if current[0] != max(pose_ids):
            raise GraphFormatError("current pose must be the highest-index pose node")
        frontier_ids = [n.id for n in self.nodes if n.kind == FRONTIER]
        if list(self.action_node_ids) != frontier_ids:
            raise GraphFormatError("action node ids must be exactly the frontier nodes")
        degree = {i: 0 for i in ids}
        for e in self.edges:
            if e.u not in degree or e.v not in degree:
                raise GraphFormatError(f"edge ({e.u}, {e.v}) references a missing node")
            if e.weight < 0 or not math.isfinite(e.weight):
                raise GraphFormatError(f"edge ({e.u}, {e.v}) has bad weight {e.weight}")
            degree[e.u] += 1
            degree[e.v] += 1
        for fid in frontier_ids:
            if degree[fid] == 0:
                raise GraphFormatError(f"frontier node {fid} is disconnected")
        if frontier_ids and len(self.nodes) > 1 and not self._connected():
            raise GraphFormatError("graph is not connected")

    def _connected(self) -> bool:
        adjacency = {n.id: [] for n in self.nodes}
        for e in self.edges:
            adjacency[e.u].append(e.v)
            adjacency[e.v].append(e.u)
        seen = set()
        stack = [self.nodes[0].id]
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(adjacency[node])
        return len(seen) == len(self.nodes)


def compute_node_features(kind: str, position, current_position, cov) -> tuple:
    """Feature vector for one node.

    s1 is the trace of the 2x2 position block of `cov` (a SLAM marginal for
    pose nodes, a virtual-map cell covariance for frontiers); s2/s3 are the
    distance and bearing from the current pose; s4 tags the node kind.
    """
    if cov is None:
        raise ValueError(f"missing covariance for {kind} node at {position}")
    cov = np.asarray(cov, dtype=float)
    s1 = float(np.trace(cov[:2, :2]))
    dx = position[0] - current_position[0]
    dy = position[1] - current_position[1]
    s2 = math.hypot(dx, dy)
    s3 = math.atan2(dy, dx) if s2 > 0.0 else 0.0
    return (s1, s2, s3, _KIND_TAG[kind])


def make_loop_closure_predictor(
    grid: OccupancyGrid,
    pose_positions: np.ndarray,
    current_index: int,
    object_first_observer: dict,
    object_cells: dict,
    pm_radius: float,
    pm_gap_min: int,
    max_range: float = 3.0,
    n_beams: int = 180,
):
    """Predicate mirroring the two loop-closure factor families.

    A frontier would revisit pose j (PM) when its waypoint lies within
    `pm_radius` of pose j's estimated position at least `pm_gap_min` steps
    back, and would re-observe object o (SM) when o's cells are visible from
    the waypoint on the estimated grid (unknown treated as free) and o was
    observed before, connecting to o's earliest observer.
    """
    cell_to_object = {}
    for oid, cells in object_cells.items():
        for cell in cells:
            cell_to_object[cell] = oid

    def predictor(frontier: Frontier):
        revisit = set()
        wx, wy = frontier.waypoint.x, frontier.waypoint.y
        limit = current_index - pm_gap_min
        if limit >= 0:
            d = np.hypot(pose_positions[: limit + 1, 0] - wx, pose_positions[: limit + 1, 1] - wy)
            revisit.update(int(j) for j in np.nonzero(d <= pm_radius)[0])
        if object_first_observer:
            _, hits = predict_visible_cells(grid, wx, wy, max_range=max_range, n_beams=n_beams)
            for cell in hits:
                oid = cell_to_object.get(cell)
                if oid is not None and oid in object_first_observer:
                    j = object_first_observer[oid]
                    if j < current_index:
                        revisit.add(j)
        return sorted(revisit)

    return predictor


def build_graph(
    state: FactorGraphState,
    marginals: np.ndarray,
    vmap: VirtualMap,
    frontiers,
    plans: dict,
    predictor,
) -> ExplorationGraph:
    """Assemble the exploration graph for the current SLAM state.

    `plans` maps frontier id to a PlannedPath or None (unreachable);
    `predictor` maps a Frontier to the pose indices it would revisit.
    Frontiers other than the nearest reachable one and the predicted
    loop-closers are excluded. With no reachable frontier the graph carries
    an empty action set, which signals episode termination.
    """
    n_poses = len(state.poses)
    current_index = n_poses - 1
    current = state.poses[current_index]
    current_xy = (current.x, current.y)

    nodes = []
    for i, pose in enumerate(state.poses):
        kind = CURRENT_POSE if i == current_index else PAST_POSE
        nodes.append(
            GraphNode(
                id=i,
                kind=kind,
                position=(pose.x, pose.y),
                features=compute_node_features(kind, (pose.x, pose.y), current_xy, marginals[i]),
            )
        )

    edges = []
    for f in state.factors:
        if len(f.endpoints) != 2:
            continue
        i, j = f.endpoints
        pi, pj = state.poses[i], state.poses[j]
        edges.append(GraphEdge(u=i, v=j, weight=pi.distance_to(pj)))

    reachable = [f for f in frontiers if plans.get(f.id) is not None]
    nearest = None
    if reachable:
        nearest = min(reachable, key=lambda f: (plans[f.id].length_m, f.id))

    # Only reachable frontiers become actions: the action set is shipped to
    # external policies verbatim, so every entry must be executable.
    included = {}
    revisits = {}
    if nearest is not None:
        included[nearest.id] = nearest
        for f in reachable:
            targets = predictor(f)
            if targets:
                included[f.id] = f
                revisits[f.id] = targets

    actions = []
    next_id = n_poses
    for fid in sorted(included):
        f = included[fid]
        pos = (f.waypoint.x, f.waypoint.y)
        cx, cy = vmap.cell_of(*pos)
        cov = vmap.cov_at(cx, cy) if 0 <= cx < vmap.nx and 0 <= cy < vmap.ny else None
        node = GraphNode(
            id=next_id,
            kind=FRONTIER,
            position=pos,
            features=compute_node_features(FRONTIER, pos, current_xy, cov),
            frontier_id=fid,
        )
        nodes.append(node)
        actions.append(next_id)
        if nearest is not None and fid == nearest.id:
            edges.append(
                GraphEdge(u=current_index, v=next_id, weight=current.distance_to(f.waypoint))
            )
        for j in revisits.get(fid, ()):
            pj = state.poses[j]
            edges.append(GraphEdge(u=j, v=next_id, weight=pj.distance_to(f.waypoint)))
        next_id += 1

    graph = ExplorationGraph(nodes=tuple(nodes), edges=tuple(edges), action_node_ids=tuple(actions))
    if actions:
        graph.validate()
    return graph


# -- wire format ------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def serialize_graph(graph: ExplorationGraph) -> str:
    """Canonical wire text: fixed field order, numbers at 9 significant digits."""
    node_parts = []
    for n in graph.nodes:
        node_parts.append(
            '{"id":%d,"kind":"%s","pos":[%s,%s],"feat":[%s,%s,%s,%s]}'
            % (n.id, n.kind, _fmt(n.position[0]), _fmt(n.position[1]), *(_fmt(v) for v in n.features))
        )
    edge_parts = [
        "[%d,%d,%s]" % (e.u, e.v, _fmt(e.weight)) for e in graph.edges
    ]
    actions = ",".join(str(a) for a in graph.action_node_ids)
    return '{"v":%d,"nodes":[%s],"edges":[%s],"actions":[%s]}' % (
        WIRE_VERSION,
        ",".join(node_parts),
        ",".join(edge_parts),
        actions,
    )


def graph_to_wire(graph: ExplorationGraph) -> dict:
    """Graph as a plain dict matching the wire schema (for embedding in
    protocol messages); numeric precision follows the canonical text."""
    return json.loads(serialize_graph(graph))


def deserialize_graph(text: str) -> ExplorationGraph:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"graph parse failure: {exc.msg}", offset=exc.pos) from exc
    return graph_from_wire(obj)


def graph_from_wire(obj) -> ExplorationGraph:
    if not isinstance(obj, dict):
        raise GraphFormatError("graph wire object must be a JSON object")
    if obj.get("v") != WIRE_VERSION:
        raise GraphFormatError(f"unsupported graph format version {obj.get('v')!r}")
    try:
        nodes = []
        for entry in obj["nodes"]:
            feat = tuple(float(v) for v in entry["feat"])
            if len(feat) != 4:
                raise GraphFormatError(f"node {entry.get('id')}: expected 4 features")
            if feat[3] not in (-1.0, 0.0, 1.0):
                raise GraphFormatError(f"node {entry.get('id')}: s4={feat[3]} not in {{-1, 0, 1}}")
            pos = tuple(float(v) for v in entry["pos"])
            if len(pos) != 2:
                raise GraphFormatError(f"node {entry.get('id')}: expected 2D position")
            nodes.append(
                GraphNode(id=int(entry["id"]), kind=str(entry["kind"]), position=pos, features=feat)
            )
        edges = []
        for u, v, w in obj["edges"]:
            edges.append(GraphEdge(u=int(u), v=int(v), weight=float(w)))
        actions = tuple(int(a) for a in obj["actions"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, GraphFormatError):
            raise
        raise GraphFormatError(f"malformed graph wire object: {exc}") from exc
    graph = ExplorationGraph(nodes=tuple(nodes), edges=tuple(edges), action_node_ids=actions)
    ids = {n.id for n in graph.nodes}
    for e in graph.edges:
        if e.u not in ids or e.v not in ids:
            raise GraphFormatError(f"edge ({e.u}, {e.v}) references a missing node")
    for a in actions:
        if a not in ids or graph.nodes[a].kind != FRONTIER:
            raise GraphFormatError(f"action id {a} is not a frontier node")
    return graph
