import json
import math

import numpy as np
import pytest

from exploresim.geometry import Pose2
from exploresim.slam import Factor, FactorGraphState, FactorKind, diagonal_information


@pytest.fixture
def empty_world_text():
    return json.dumps(
        {
            "size_m": [4.0, 4.0],
            "resolution": 0.5,
            "objects": [],
            "start_poses": [[2.0, 2.0, 0.0]],
        }
    )


@pytest.fixture
def box_world_text():
    return json.dumps(
        {
            "size_m": [4.0, 4.0],
            "resolution": 0.5,
            "objects": [{"id": 7, "rect": [1.5, 1.5, 2.5, 2.5]}],
            "start_poses": [[0.75, 0.75, 0.0]],
        }
    )


def random_pose_graph(rng: np.random.Generator, n_poses: int):
    """A noisy odometry chain with a prior and random loop closures.

    Returns (state, factor_list, infos) where factor_list/infos mirror the
    state's factors in the oracle's plain-tuple form.
    """
    truths = [Pose2(0.0, 0.0, 0.0)]
    for _ in range(n_poses - 1):
        step = Pose2(rng.uniform(0.3, 1.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.9, 0.9))
        truths.append(truths[-1].compose(step))

    state = FactorGraphState()
    prior_info = diagonal_information(0.1, 0.1)
    odom_info = diagonal_information(0.05, 0.04)
    loop_info = diagonal_information(0.03, 0.02)

    factor_list = []
    infos = []

    prior_mean = Pose2(
        truths[0].x + rng.normal(0, 0.05),
        truths[0].y + rng.normal(0, 0.05),
        truths[0].theta + rng.normal(0, 0.05),
    )
    measurements = []
    for i in range(1, n_poses):
        rel = truths[i].relative_to(truths[i - 1])
        noisy = Pose2(
            rel.x + rng.normal(0, 0.05), rel.y + rng.normal(0, 0.05), rel.theta + rng.normal(0, 0.04)
        )
        measurements.append(noisy)

    # initial estimates: integrate the noisy odometry from the prior mean
    estimates = [prior_mean]
    for m in measurements:
        estimates.append(estimates[-1].compose(m))
    for est in estimates:
        state.add_pose(est)

    state.add_factor(
        Factor(kind=FactorKind.PRIOR, endpoints=(0,), measurement=prior_mean, information=prior_info)
    )
    factor_list.append(("prior", (0,), (prior_mean.x, prior_mean.y, prior_mean.theta)))
    infos.append(prior_info)

    for i, m in enumerate(measurements):
        state.add_factor(
            Factor(kind=FactorKind.ODOMETRY, endpoints=(i, i + 1), measurement=m, information=odom_info)
        )
        factor_list.append(("between", (i, i + 1), (m.x, m.y, m.theta)))
        infos.append(odom_info)

    if n_poses >= 3:
        n_loops = int(rng.integers(0, 3))
        for _ in range(n_loops):
            i = int(rng.integers(0, n_poses - 2))
            j = int(rng.integers(i + 2, n_poses))
            rel = truths[j].relative_to(truths[i])
            noisy = Pose2(
                rel.x + rng.normal(0, 0.03),
                rel.y + rng.normal(0, 0.03),
                rel.theta + rng.normal(0, 0.02),
            )
            state.add_factor(
                Factor(kind=FactorKind.PM, endpoints=(i, j), measurement=noisy, information=loop_info)
            )
            factor_list.append(("between", (i, j), (noisy.x, noisy.y, noisy.theta)))
            infos.append(loop_info)

    return state, factor_list, infos


@pytest.fixture
def make_random_graph():
    return random_pose_graph


def assert_pose_close(pose: Pose2, x: float, y: float, theta: float, tol: float = 1e-9):
    assert abs(pose.x - x) < tol, f"x: {pose.x} vs {x}"
    assert abs(pose.y - y) < tol, f"y: {pose.y} vs {y}"
    dt = (pose.theta - theta + math.pi) % (2 * math.pi) - math.pi
    assert abs(dt) < tol, f"theta: {pose.theta} vs {theta}"
