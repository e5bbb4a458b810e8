"""2D active-SLAM exploration simulator.

Pose-graph SLAM with synthesized loop closures, a virtual-landmark map with
a log-det utility, frontier extraction, an exploration-graph state
abstraction, baseline policies (nearest-frontier / random / EM forward
simulation), a normalized reward oracle, and a newline-delimited JSON wire
protocol for external (learned) policies.
"""

__version__ = "0.1.0"

from .geometry import Pose2, wrap_angle
from .world import (
    Control,
    GroundTruthWorld,
    NoiseParams,
    ScanResult,
    SensorParams,
    apply_motion,
    load_environment,
    simulate_scan,
)
from .slam import (
    Factor,
    FactorGraphState,
    FactorKind,
    MarginalCovariance,
    SlamParams,
    detect_loop_closures,
    sequential_scan_factor,
)
from .mapping import (
    Frontier,
    OccupancyGrid,
    VirtualMap,
    extract_frontiers,
    integrate_scan,
    map_utility,
    update_virtual_map,
)
from .planning import PlannedPath, plan_path
from .exploration_graph import (
    ExplorationGraph,
    GraphEdge,
    GraphNode,
    build_graph,
    compute_node_features,
    deserialize_graph,
    serialize_graph,
)
from .policies import (
    BeliefPrediction,
    BeliefSnapshot,
    CandidateAction,
    RewardBreakdown,
    belief_forward_simulate,
    em_select,
    enumerate_candidates,
    nearest_frontier_select,
    normalized_reward,
    random_select,
    raw_reward,
)
from .runner import (
    EpisodeConfig,
    EpisodeLog,
    Metrics,
    bench_decision_time,
    compute_metrics,
    run_episode,
)
