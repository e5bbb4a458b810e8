"""Factor-graph pose SLAM in SE(2).

Factors are priors, odometry, sequential scan matches (SSM), and two loop
closure families: pose matching (PM, spatial revisit) and segment matching
(SM, re-observing a known object). The graph is solved by batch
Levenberg-Marquardt on the stacked weighted residuals; marginal covariances
come from the inverse of the Gauss-Newton information matrix at the
solution, gauged by the prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Pose2, rotation_matrix, wrap_angle
from .world import NoiseParams, ScanResult


class FactorKind(Enum):
    PRIOR = "PRIOR"
    ODOMETRY = "ODOM"
    SSM = "SSM"
    PM = "PM"
    SM = "SM"


SEQUENTIAL_KINDS = (FactorKind.ODOMETRY, FactorKind.SSM)
LOOP_KINDS = (FactorKind.PM, FactorKind.SM)


class FactorError(ValueError):
    """Raised for factors that violate structural invariants."""


class SingularGraphError(RuntimeError):
    """Raised when the information matrix is singular (disconnected graph)."""

    def __init__(self, pose_index: int):
        super().__init__(f"information matrix singular: pose {pose_index} is unconstrained")
        self.pose_index = pose_index


@dataclass(frozen=True)
class Factor:
    kind: FactorKind
    endpoints: tuple  # (i,) for PRIOR, (i, j) with i < j otherwise
    measurement: Pose2  # absolute for PRIOR, relative (frame of endpoint i) otherwise
    information: np.ndarray  # 3x3 symmetric positive-definite

    def __post_init__(self) -> None:
        info = np.asarray(self.information, dtype=float)
        object.__setattr__(self, "information", info)
        if info.shape != (3, 3) or not np.allclose(info, info.T, atol=1e-12):
            raise FactorError("information matrix must be 3x3 symmetric")
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise FactorError("information matrix must be positive-definite") from exc
        n = len(self.endpoints)
        if self.kind is FactorKind.PRIOR:
            if n != 1:
                raise FactorError("prior factor takes exactly one endpoint")
            return
        if n != 2:
            raise FactorError(f"{self.kind.value} factor takes exactly two endpoints")
        i, j = self.endpoints
        if i >= j:
            raise FactorError(f"factor endpoints must be ordered, got ({i}, {j})")
        if self.kind in SEQUENTIAL_KINDS and j != i + 1:
            raise FactorError(f"non-consecutive {self.kind.value.lower()} factor ({i}, {j})")
        if self.kind in LOOP_KINDS and j == i + 1:
            raise FactorError(f"{self.kind.value} loop closure on consecutive poses ({i}, {j})")


def diagonal_information(sigma_trans: float, sigma_rot: float) -> np.ndarray:
    return np.diag([1.0 / sigma_trans**2, 1.0 / sigma_trans**2, 1.0 / sigma_rot**2])


@dataclass(frozen=True)
class SlamParams:
    """Factor construction parameters (sigmas in meters / radians)."""

    sigma_odom_trans: float = 0.01 * math.sqrt(2.0)
    sigma_odom_rot: float = math.radians(0.08) * math.sqrt(2.0)
    sigma_prior: float = 1e-3
    ssm_overlap_min: int = 5
    sigma_pm_trans: float = 0.05
    sigma_pm_rot: float = math.radians(0.5)
    sigma_sm_trans: float = 0.05
    sigma_sm_rot: float = math.radians(0.5)
    pm_gap_min: int = 5
    pm_radius: float = 1.0

    @staticmethod
    def from_noise(noise: NoiseParams, **overrides) -> "SlamParams":
        # Odometry error stacks the actuation draw and the measurement draw.
        base = dict(
            sigma_odom_trans=max(noise.sigma_trans, 1e-6) * math.sqrt(2.0),
            sigma_odom_rot=max(noise.sigma_rot, 1e-6) * math.sqrt(2.0),
        )
        base.update(overrides)
        return SlamParams(**base)

    @property
    def odom_information(self) -> np.ndarray:
        return diagonal_information(self.sigma_odom_trans, self.sigma_odom_rot)

    @property
    def ssm_information(self) -> np.ndarray:
        return diagonal_information(0.5 * self.sigma_odom_trans, 0.5 * self.sigma_odom_rot)

    @property
    def pm_information(self) -> np.ndarray:
        return diagonal_information(self.sigma_pm_trans, self.sigma_pm_rot)

    @property
    def sm_information(self) -> np.ndarray:
        return diagonal_information(self.sigma_sm_trans, self.sigma_sm_rot)

    @property
    def prior_information(self) -> np.ndarray:
        return diagonal_information(self.sigma_prior, self.sigma_prior)


@dataclass(frozen=True)
class MarginalCovariance:
    index: int
    cov: np.ndarray  # 3x3 symmetric PSD


@dataclass(frozen=True)
class OptimizeResult:
    converged: bool
    residual: float  # sum of squared Mahalanobis residuals at the final estimate
    iterations: int
    cost_trace: tuple  # cost after each accepted step, starting at the initial cost


def _factor_residual(factor: Factor, poses: np.ndarray):
    """Return (residual, [(pose index, 3x3 jacobian block), ...])."""
    m = factor.measurement
    rm_t = rotation_matrix(m.theta).T
    if factor.kind is FactorKind.PRIOR:
        (i,) = factor.endpoints
        xi = poses[i]
        e = np.empty(3)
        e[:2] = rm_t @ (xi[:2] - m.xy)
        e[2] = wrap_angle(xi[2] - m.theta)
        ji = np.zeros((3, 3))
        ji[:2, :2] = rm_t
        ji[2, 2] = 1.0
        return e, [(i, ji)]

    i, j = factor.endpoints
    xi, xj = poses[i], poses[j]
    ci, si = math.cos(xi[2]), math.sin(xi[2])
    ri_t = np.array([[ci, si], [-si, ci]])
    dt = xj[:2] - xi[:2]
    e = np.empty(3)
    e[:2] = rm_t @ (ri_t @ dt - m.xy)
    e[2] = wrap_angle(xj[2] - xi[2] - m.theta)

    dri_t = np.array([[-si, ci], [-ci, -si]])  # d(Ri^T)/dtheta_i
    ji = np.zeros((3, 3))
    ji[:2, :2] = -rm_t @ ri_t
    ji[:2, 2] = rm_t @ (dri_t @ dt)
    ji[2, 2] = -1.0
    jj = np.zeros((3, 3))
    jj[:2, :2] = rm_t @ ri_t
    jj[2, 2] = 1.0
    return e, [(i, ji), (j, jj)]


class FactorGraphState:
    """Pose estimates plus typed factors; single writer, re-optimized in batch."""

    def __init__(self) -> None:
        self.poses: list = []  # Pose2 estimates
        self.factors: list = []  # Factor
        self._solution_current = False
        self._covariance: np.ndarray | None = None  # full (3n x 3n) inverse at solution

    # -- construction ---------------------------------------------------

    def add_pose(self, estimate: Pose2) -> int:
        self.poses.append(estimate)
        self._solution_current = False
        return len(self.poses) - 1

    def add_factor(self, factor: Factor) -> int:
        for idx in factor.endpoints:
            if not 0 <= idx < len(self.poses):
                raise FactorError(f"factor endpoint {idx} out of range (have {len(self.poses)} poses)")
        self.factors.append(factor)
        self._solution_current = False
        return len(self.factors) - 1

    def has_prior(self) -> bool:
        return any(f.kind is FactorKind.PRIOR for f in self.factors)

    # -- optimization ---------------------------------------------------

    def _pose_array(self) -> np.ndarray:
        return np.array([[p.x, p.y, p.theta] for p in self.poses])

    def _cost(self, poses: np.ndarray) -> float:
        total = 0.0
        for f in self.factors:
            e, _ = _factor_residual(f, poses)
            total += float(e @ f.information @ e)
        return total

    def _linearize(self, poses: np.ndarray):
        n = len(self.poses)
        h = np.zeros((3 * n, 3 * n))
        b = np.zeros(3 * n)
        cost = 0.0
        for f in self.factors:
            e, blocks = _factor_residual(f, poses)
            info = f.information
            cost += float(e @ info @ e)
            for idx_a, ja in blocks:
                sa = slice(3 * idx_a, 3 * idx_a + 3)
                b[sa] += ja.T @ info @ e
                for idx_b, jb in blocks:
                    sb = slice(3 * idx_b, 3 * idx_b + 3)
                    h[sa, sb] += ja.T @ info @ jb
        return h, b, cost

    def optimize(self, max_iters: int = 100, tol: float = 1e-10) -> OptimizeResult:
        """Batch Levenberg-Marquardt. Accepted steps never increase cost;
        returns the best-so-far estimate even when not converged."""
        if not self.has_prior():
            raise FactorError("optimize requires at least one prior factor")
        x = self._pose_array()
        cost = self._cost(x)
        trace = [cost]
        lam = 1e-8
        converged = False
        iterations = 0
        h = None
        for iterations in range(1, max_iters + 1):
            h, b, cost = self._linearize(x)
            if np.max(np.abs(b)) < tol:
                converged = True
                break
            accepted = False
            while lam < 1e12:
                try:
                    dx = np.linalg.solve(h + lam * np.eye(h.shape[0]), -b)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                x_new = x + dx.reshape(-1, 3)
                x_new[:, 2] = np.array([wrap_angle(t) for t in x_new[:, 2]])
                new_cost = self._cost(x_new)
                if new_cost <= cost * (1.0 + 1e-14) + 1e-15:
                    x = x_new
                    accepted = True
                    trace.append(new_cost)
                    if cost - new_cost < tol * max(1.0, cost):
                        converged = True
                    cost = new_cost
                    lam = max(lam * 0.25, 1e-10)
                    break
                lam *= 10.0
            if not accepted:
                self._raise_if_singular(h)
                converged = True  # damping saturated at a stationary point
                break
            if converged:
                break

        self.poses = [Pose2(*row) for row in x]
        h_final, _, final_cost = self._linearize(x)
        self._raise_if_singular(h_final)
        self._covariance = np.linalg.inv(h_final)
        self._solution_current = True
        return OptimizeResult(
            converged=converged,
            residual=final_cost,
            iterations=iterations,
            cost_trace=tuple(trace),
        )

    def _raise_if_singular(self, h: np.ndarray) -> None:
        try:
            np.linalg.cholesky(h)
        except np.linalg.LinAlgError:
            raise SingularGraphError(self._find_unconstrained_pose()) from None

    def _find_unconstrained_pose(self) -> int:
        n = len(self.poses)
        adjacency = [[] for _ in range(n)]
        anchored = set()
        for f in self.factors:
            if f.kind is FactorKind.PRIOR:
                anchored.add(f.endpoints[0])
            else:
                i, j = f.endpoints
                adjacency[i].append(j)
                adjacency[j].append(i)
        reached = set()
        stack = list(anchored)
        while stack:
            node = stack.pop()
            if node in reached:
                continue
            reached.add(node)
            stack.extend(adjacency[node])
        unconstrained = sorted(set(range(n)) - reached)
        return unconstrained[0] if unconstrained else 0

    # -- queries ----------------------------------------------------------

    def marginal_covariance(self, index: int) -> MarginalCovariance:
        """3x3 block of the inverse information at the current solution."""
        if not 0 <= index < len(self.poses):
            raise IndexError(f"pose index {index} out of range")
        if not self._solution_current or self._covariance is None:
            raise RuntimeError("marginal_covariance requires optimize() after the last insertion")
        block = self._covariance[3 * index : 3 * index + 3, 3 * index : 3 * index + 3]
        return MarginalCovariance(index=index, cov=0.5 * (block + block.T))

    def all_marginals(self) -> np.ndarray:
        """(n, 3, 3) array of per-pose marginal covariance blocks."""
        if not self._solution_current or self._covariance is None:
            raise RuntimeError("all_marginals requires optimize() after the last insertion")
        n = len(self.poses)
        out = np.empty((n, 3, 3))
        for i in range(n):
            block = self._covariance[3 * i : 3 * i + 3, 3 * i : 3 * i + 3]
            out[i] = 0.5 * (block + block.T)
        return out

    # -- serialization ----------------------------------------------------

    def dump(self) -> str:
        """Line-based text dump (VERTEX/EDGE records, g2o-style)."""
        lines = []
        for i, p in enumerate(self.poses):
            lines.append(f"VERTEX_SE2 {i} {p.x!r} {p.y!r} {p.theta!r}")
        for f in self.factors:
            m = f.measurement
            info = f.information
            upper = " ".join(
                repr(float(info[r, c])) for r in range(3) for c in range(r, 3)
            )
            if f.kind is FactorKind.PRIOR:
                lines.append(
                    f"EDGE_SE2_PRIOR {f.endpoints[0]} {m.x!r} {m.y!r} {m.theta!r} {upper}"
                )
            else:
                i, j = f.endpoints
                lines.append(
                    f"EDGE_SE2_{f.kind.value} {i} {j} {m.x!r} {m.y!r} {m.theta!r} {upper}"
                )
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, text: str) -> "FactorGraphState":
        state = cls()
        pending = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            tag = tokens[0]
            try:
                if tag == "VERTEX_SE2":
                    idx = int(tokens[1])
                    if idx != len(state.poses):
                        raise ValueError(f"vertex ids must be dense, got {idx}")
                    state.add_pose(Pose2(float(tokens[2]), float(tokens[3]), float(tokens[4])))
                elif tag == "EDGE_SE2_PRIOR":
                    vals = [float(t) for t in tokens[2:]]
                    pending.append(
                        Factor(
                            kind=FactorKind.PRIOR,
                            endpoints=(int(tokens[1]),),
                            measurement=Pose2(vals[0], vals[1], vals[2]),
                            information=_unpack_upper(vals[3:9]),
                        )
                    )
                elif tag.startswith("EDGE_SE2_"):
                    kind = FactorKind(tag.removeprefix("EDGE_SE2_"))
                    vals = [float(t) for t in tokens[3:]]
                    pending.append(
                        Factor(
                            kind=kind,
                            endpoints=(int(tokens[1]), int(tokens[2])),
                            measurement=Pose2(vals[0], vals[1], vals[2]),
                            information=_unpack_upper(vals[3:9]),
                        )
                    )
                else:
                    raise ValueError(f"unknown record {tag}")
            except (IndexError, ValueError, FactorError) as exc:
                raise ValueError(f"factor graph parse error at line {lineno}: {exc}") from exc
        for f in pending:
            state.add_factor(f)
        return state


def _unpack_upper(vals) -> np.ndarray:
    if len(vals) != 6:
        raise ValueError(f"expected 6 information entries, got {len(vals)}")
    i11, i12, i13, i22, i23, i33 = vals
    return np.array([[i11, i12, i13], [i12, i22, i23], [i13, i23, i33]])


# -- factor synthesis from ground truth -----------------------------------


def _noisy_relative(
    pose_a: Pose2, pose_b: Pose2, sigma_t: float, sigma_r: float, rng: np.random.Generator
) -> Pose2:
    rel = pose_b.relative_to(pose_a)
    w = rng.normal(0.0, [sigma_t, sigma_t, sigma_r])
    return Pose2(rel.x + w[0], rel.y + w[1], rel.theta + w[2])


def sequential_scan_factor(
    current_index: int,
    prev_scan: ScanResult,
    scan: ScanResult,
    params: SlamParams,
    rng: np.random.Generator,
):
    """SSM factor between consecutive poses when their scans overlap enough."""
    prev_cells = prev_scan.observed_free | prev_scan.observed_occupied
    cells = scan.observed_free | scan.observed_occupied
    if len(prev_cells & cells) < params.ssm_overlap_min:
        return None
    measurement = _noisy_relative(
        prev_scan.origin, scan.origin, 0.5 * params.sigma_odom_trans, 0.5 * params.sigma_odom_rot, rng
    )
    return Factor(
        kind=FactorKind.SSM,
        endpoints=(current_index - 1, current_index),
        measurement=measurement,
        information=params.ssm_information,
    )


def detect_loop_closures(
    state: FactorGraphState,
    current_index: int,
    scan: ScanResult,
    history: list,
    params: SlamParams,
    rng: np.random.Generator,
    used_object_ids: set,
) -> list:
    """PM/SM loop closure factors for the pose at `current_index`.

    PM: one factor to the nearest prior pose within `pm_radius` and at least
    `pm_gap_min` steps back (ties to the smallest index). SM: one factor per
    newly re-observed object id, to its earliest observer; each object id
    closes at most one loop per episode (tracked in `used_object_ids`).
    Measurements are ground-truth relative transforms plus Gaussian noise at
    the factor's information level.
    """
    factors = []
    current_true = scan.origin

    best_j = -1
    best_dist = math.inf
    for j in range(0, current_index - params.pm_gap_min):
        dist = history[j].origin.distance_to(current_true)
        if dist <= params.pm_radius and dist < best_dist - 1e-12:
            best_dist = dist
            best_j = j
    if best_j >= 0:
        factors.append(
            Factor(
                kind=FactorKind.PM,
                endpoints=(best_j, current_index),
                measurement=_noisy_relative(
                    history[best_j].origin, current_true, params.sigma_pm_trans, params.sigma_pm_rot, rng
                ),
                information=params.pm_information,
            )
        )

    for obj_id in sorted(scan.observed_objects):
        if obj_id in used_object_ids:
            continue
        earliest = -1
        for j in range(0, current_index):
            if obj_id in history[j].observed_objects:
                earliest = j
                break
        if earliest < 0 or earliest >= current_index - 1:
            continue
        used_object_ids.add(obj_id)
        factors.append(
            Factor(
                kind=FactorKind.SM,
                endpoints=(earliest, current_index),
                measurement=_noisy_relative(
                    history[earliest].origin, current_true, params.sigma_sm_trans, params.sigma_sm_rot, rng
                ),
                information=params.sm_information,
            )
        )
    return factors
