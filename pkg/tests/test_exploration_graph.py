import math

import numpy as np
import pytest

from exploresim.exploration_graph import (
    CURRENT_POSE,
    FRONTIER,
    PAST_POSE,
    ExplorationGraph,
    GraphEdge,
    GraphFormatError,
    GraphNode,
    build_graph,
    compute_node_features,
    deserialize_graph,
    make_loop_closure_predictor,
    serialize_graph,
)
from exploresim.geometry import Pose2
from exploresim.mapping import Frontier, OccupancyGrid, VirtualMap, FREE
from exploresim.planning import PlannedPath
from exploresim.slam import Factor, FactorGraphState, FactorKind, diagonal_information

I3 = np.eye(3)


def chain_state(n, spacing=1.0):
    state = FactorGraphState()
    for i in range(n):
        state.add_pose(Pose2(i * spacing, 0.0, 0.0))
    state.add_factor(
        Factor(kind=FactorKind.PRIOR, endpoints=(0,), measurement=Pose2(0, 0, 0), information=I3)
    )
    for i in range(n - 1):
        state.add_factor(
            Factor(
                kind=FactorKind.ODOMETRY,
                endpoints=(i, i + 1),
                measurement=Pose2(spacing, 0, 0),
                information=I3,
            )
        )
    return state


def frontier_at(x, y, fid, res=0.5):
    cell = (int(x / res), int(y / res))
    return Frontier(
        id=fid,
        cells=frozenset({cell}),
        waypoint_cell=cell,
        waypoint=Pose2((cell[0] + 0.5) * res, (cell[1] + 0.5) * res, 0.0),
    )


def straight_plan(cells, res=0.5, fid=-1):
    return PlannedPath(cells=tuple(cells), length_m=(len(cells) - 1) * res, goal_frontier_id=fid)


def simple_marginals(n):
    return np.tile(np.eye(3) * 0.01, (n, 1, 1))


class TestComputeNodeFeatures:
    def test_current_pose_node(self):
        s = compute_node_features(CURRENT_POSE, (2.0, 3.0), (2.0, 3.0), np.eye(3) * 0.25)
        assert s[1] == 0.0
        assert s[2] == 0.0
        assert s[3] == 0.0
        assert s[0] == pytest.approx(0.5)

    def test_past_pose_identity_block(self):
        cov = np.eye(3)
        s = compute_node_features(PAST_POSE, (1.0, 0.0), (0.0, 0.0), cov)
        assert s[0] == pytest.approx(2.0)
        assert s[3] == -1.0

    def test_frontier_three_four_five(self):
        s = compute_node_features(FRONTIER, (3.0, 4.0), (0.0, 0.0), np.eye(2) * 0.04)
        assert s[1] == pytest.approx(5.0)
        assert s[2] == pytest.approx(0.9272952180016122)
        assert s[3] == 1.0

    def test_missing_covariance_is_an_error(self):
        with pytest.raises(ValueError, match="covariance"):
            compute_node_features(FRONTIER, (1.0, 1.0), (0.0, 0.0), None)


class TestBuildGraph:
    def test_minimal_one_pose_one_frontier(self):
        state = chain_state(1)
        vmap = VirtualMap(4.0, 4.0, 0.5)
        f = frontier_at(2.3, 0.1, fid=4)
        plans = {4: straight_plan([(0, 0), (1, 0), (2, 0), (3, 0), (4, 0)], fid=4)}
        graph = build_graph(state, simple_marginals(1), vmap, [f], plans, lambda fr: [])
        assert len(graph.nodes) == 2
        assert len(graph.edges) == 1
        assert graph.action_node_ids == (1,)
        assert graph.nodes[1].kind == FRONTIER
        graph.validate()

    def test_five_pose_chain_with_pm_and_nearest(self):
        state = chain_state(5)
        state.add_factor(
            Factor(kind=FactorKind.PM, endpoints=(0, 4), measurement=Pose2(-4, 0, 0), information=I3)
        )
        vmap = VirtualMap(8.0, 8.0, 0.5)
        f = frontier_at(5.3, 0.2, fid=11)
        plans = {11: straight_plan([(8, 0), (9, 0), (10, 0)], fid=11)}
        graph = build_graph(state, simple_marginals(5), vmap, [f], plans, lambda fr: [])
        assert len(graph.nodes) == 6
        assert len(graph.edges) == 4 + 1 + 1
        kinds = [n.kind for n in graph.nodes]
        assert kinds.count(CURRENT_POSE) == 1
        assert kinds[4] == CURRENT_POSE

    def test_loop_frontier_connects_to_revisited_pose_only(self):
        state = chain_state(5)
        vmap = VirtualMap(8.0, 8.0, 0.5)
        near = frontier_at(4.6, 0.4, fid=2)
        loop = frontier_at(2.1, 0.6, fid=9)
        plans = {
            2: straight_plan([(8, 0), (9, 0)], fid=2),
            9: straight_plan([(8, 0), (7, 0), (6, 0), (5, 1), (4, 1)], fid=9),
        }
        predictor = lambda fr: [2] if fr.id == 9 else []
        graph = build_graph(state, simple_marginals(5), vmap, [near, loop], plans, predictor)
        assert len(graph.action_node_ids) == 2
        node_by_fid = {n.frontier_id: n for n in graph.nodes if n.kind == FRONTIER}
        loop_edges = [e for e in graph.edges if node_by_fid[9].id in (e.u, e.v)]
        assert len(loop_edges) == 1
        assert {loop_edges[0].u, loop_edges[0].v} == {2, node_by_fid[9].id}

    def test_no_reachable_frontier_gives_empty_actions(self):
        state = chain_state(3)
        vmap = VirtualMap(4.0, 4.0, 0.5)
        f = frontier_at(1.0, 1.0, fid=3)
        graph = build_graph(state, simple_marginals(3), vmap, [f], {3: None}, lambda fr: [3])
        assert graph.action_node_ids == ()
        assert len(graph.nodes) == 3

    def test_factor_edge_bijection(self):
        state = chain_state(6)
        state.add_factor(
            Factor(kind=FactorKind.PM, endpoints=(1, 4), measurement=Pose2(-3, 0, 0), information=I3)
        )
        state.add_factor(
            Factor(kind=FactorKind.SM, endpoints=(0, 3), measurement=Pose2(-3, 0, 0), information=I3)
        )
        vmap = VirtualMap(8.0, 8.0, 0.5)
        f = frontier_at(6.1, 0.0, fid=0)
        plans = {0: straight_plan([(10, 0), (11, 0), (12, 0)], fid=0)}
        graph = build_graph(state, simple_marginals(6), vmap, [f], plans, lambda fr: [])
        two_sided = [f2.endpoints for f2 in state.factors if len(f2.endpoints) == 2]
        pose_edges = [
            (e.u, e.v) for e in graph.edges if graph.nodes[e.u].kind != FRONTIER and graph.nodes[e.v].kind != FRONTIER
        ]
        assert sorted(pose_edges) == sorted(two_sided)

    def test_edge_weights_are_euclidean(self):
        state = chain_state(4, spacing=0.7)
        vmap = VirtualMap(8.0, 8.0, 0.5)
        f = frontier_at(3.4, 1.2, fid=5)
        plans = {5: straight_plan([(4, 0), (5, 1), (6, 2)], fid=5)}
        graph = build_graph(state, simple_marginals(4), vmap, [f], plans, lambda fr: [])
        for e in graph.edges:
            pu = graph.nodes[e.u].position
            pv = graph.nodes[e.v].position
            assert e.weight == pytest.approx(math.hypot(pu[0] - pv[0], pu[1] - pv[1]), abs=1e-12)


class TestLoopClosurePredictor:
    def test_pm_respects_radius_and_gap(self):
        grid = OccupancyGrid(6.0, 6.0, 0.5)
        grid.cells[:, :] = FREE
        # poses 2 and 3 sit right next to the waypoint but are too recent
        positions = np.array([[1.0, 1.0], [3.5, 1.0], [1.5, 1.0], [1.25, 1.5]])
        predictor = make_loop_closure_predictor(
            grid, positions, current_index=3, object_first_observer={}, object_cells={},
            pm_radius=1.0, pm_gap_min=2,
        )
        f = frontier_at(1.2, 1.2, fid=0)
        assert predictor(f) == [0]  # pose 1 out of radius, pose 2 within the gap

    def test_sm_links_to_earliest_observer(self):
        grid = OccupancyGrid(6.0, 6.0, 0.5)
        grid.cells[:, :] = FREE
        grid.cells[5, 5] = 2  # the object cell, occupied in the estimate
        positions = np.array([[1.0, 1.0], [4.0, 4.0], [1.0, 4.0]])
        predictor = make_loop_closure_predictor(
            grid, positions, current_index=2,
            object_first_observer={9: 1},
            object_cells={9: frozenset({(5, 5)})},
            pm_radius=0.1, pm_gap_min=10,
        )
        f = frontier_at(2.3, 2.3, fid=0)
        assert predictor(f) == [1]


class TestWireFormat:
    GOLDEN = (
        '{"v":1,"nodes":[{"id":0,"kind":"current_pose","pos":[0,0],"feat":[0.5,0,0,0]},'
        '{"id":1,"kind":"frontier","pos":[3,4],"feat":[0.08,5,0.927295218,1]}],'
        '"edges":[[0,1,5]],"actions":[1]}'
    )

    def minimal_graph(self):
        nodes = (
            GraphNode(id=0, kind=CURRENT_POSE, position=(0.0, 0.0), features=(0.5, 0.0, 0.0, 0.0)),
            GraphNode(
                id=1,
                kind=FRONTIER,
                position=(3.0, 4.0),
                features=(0.08, 5.0, 0.9272952180016122, 1.0),
            ),
        )
        return ExplorationGraph(
            nodes=nodes, edges=(GraphEdge(0, 1, 5.0),), action_node_ids=(1,)
        )

    def test_golden_string(self):
        assert serialize_graph(self.minimal_graph()) == self.GOLDEN

    def test_parse_golden(self):
        graph = deserialize_graph(self.GOLDEN)
        assert graph.action_node_ids == (1,)
        assert graph.nodes[1].position == (3.0, 4.0)

    def test_text_round_trip_identity_on_random_graphs(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            graph = random_graph(rng)
            text = serialize_graph(graph)
            again = serialize_graph(deserialize_graph(text))
            assert again == text

    def test_object_round_trip_on_clean_values(self):
        graph = self.minimal_graph()
        parsed = deserialize_graph(serialize_graph(graph))
        # the golden graph's s3 has more than 9 significant digits
        assert parsed.nodes[0] == graph.nodes[0]
        assert parsed.edges == graph.edges
        assert parsed.action_node_ids == graph.action_node_ids

    def test_bad_s4_is_parse_error(self):
        bad = self.GOLDEN.replace('"feat":[0.08,5,0.927295218,1]', '"feat":[0.08,5,0.927295218,2]')
        with pytest.raises(GraphFormatError, match="s4"):
            deserialize_graph(bad)

    def test_malformed_json_reports_offset(self):
        with pytest.raises(GraphFormatError, match="offset"):
            deserialize_graph('{"v":1,"nodes":[')

    def test_wrong_version_rejected(self):
        with pytest.raises(GraphFormatError, match="version"):
            deserialize_graph(self.GOLDEN.replace('"v":1', '"v":2'))


def random_graph(rng) -> ExplorationGraph:
    n_poses = int(rng.integers(1, 6))
    n_frontiers = int(rng.integers(1, 4))
    nodes = []
    cur = (round(float(rng.uniform(-5, 5)), 3), round(float(rng.uniform(-5, 5)), 3))
    positions = [
        (round(float(rng.uniform(-5, 5)), 3), round(float(rng.uniform(-5, 5)), 3))
        for _ in range(n_poses + n_frontiers)
    ]
    positions[n_poses - 1] = cur
    for i in range(n_poses + n_frontiers):
        if i < n_poses:
            kind = CURRENT_POSE if i == n_poses - 1 else PAST_POSE
        else:
            kind = FRONTIER
        s1 = round(float(rng.uniform(0, 2)), 4)
        nodes.append(
            GraphNode(
                id=i,
                kind=kind,
                position=positions[i],
                features=compute_node_features(kind, positions[i], cur, np.eye(2) * (s1 / 2)),
            )
        )
    edges = []
    for i in range(1, n_poses):
        edges.append(_edge(nodes, i - 1, i))
    for k in range(n_frontiers):
        edges.append(_edge(nodes, int(rng.integers(0, n_poses)), n_poses + k))
    return ExplorationGraph(
        nodes=tuple(nodes),
        edges=tuple(edges),
        action_node_ids=tuple(range(n_poses, n_poses + n_frontiers)),
    )


def _edge(nodes, u, v):
    pu, pv = nodes[u].position, nodes[v].position
    return GraphEdge(u=u, v=v, weight=math.hypot(pu[0] - pv[0], pu[1] - pv[1]))
