"""Ground-truth environment, noisy motion execution, and simulated range sensing.

The world is a walled 2D grid loaded from a JSON config. Objects are
axis-aligned rectangles rasterized onto occupied cells. All randomness is
drawn from an explicit generator so episodes replay bit-identically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose2

FREE = 0
OCCUPIED = 1

# Ray-march step as a fraction of cell size; small enough that sampled rays
# cannot tunnel through a cell on rectilinear maps.
RAY_STEP_FRACTION = 0.25


class EnvironmentFormatError(ValueError):
    """Raised when an environment config fails to parse or validate."""


@dataclass(frozen=True)
class Control:
    """One motion command: drive `forward` meters along the current heading,
    then turn by `rotate` radians."""

    forward: float
    rotate: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.forward) and math.isfinite(self.rotate)):
            raise ValueError(f"non-finite control ({self.forward}, {self.rotate})")


@dataclass(frozen=True)
class NoiseParams:
    """Standard deviations for motion and range sensing."""

    sigma_trans: float = 0.01
    sigma_rot: float = math.radians(0.08)
    sigma_range: float = 0.02

    def __post_init__(self) -> None:
        if self.sigma_trans < 0 or self.sigma_rot < 0 or self.sigma_range < 0:
            raise ValueError("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class SensorParams:
    max_range: float = 3.0
    n_beams: int = 180

    def __post_init__(self) -> None:
        if self.max_range <= 0 or self.n_beams < 1:
            raise ValueError("sensor range must be positive and beam count >= 1")


@dataclass(frozen=True)
class Beam:
    angle: float  # body-frame bearing, radians
    range: float  # meters; equals max_range when hit is False
    hit: bool


@dataclass(frozen=True)
class ScanResult:
    """Cell-level observation of one 360-degree scan taken at `origin`."""

    origin: Pose2
    max_range: float
    observed_free: frozenset  # of (ix, iy) cell indices
    observed_occupied: frozenset
    observed_objects: frozenset  # of object ids
    beams: tuple  # of Beam


@dataclass(frozen=True)
class MotionResult:
    pose: Pose2
    odometry: Pose2  # measured relative motion in the body frame
    collided: bool


@dataclass
class GroundTruthWorld:
    width_m: float
    height_m: float
    resolution: float
    grid: np.ndarray  # (ny, nx) uint8, FREE/OCCUPIED
    object_ids: np.ndarray  # (ny, nx) int32, -1 where no object
    objects: dict  # id -> frozenset of (ix, iy)
    start_poses: list = field(default_factory=list)

    def __post_init__(self) -> None:
        self.grid.setflags(write=False)
        self.object_ids.setflags(write=False)

    @property
    def nx(self) -> int:
        return self.grid.shape[1]

    @property
    def ny(self) -> int:
        return self.grid.shape[0]

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution))

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.nx and 0 <= iy < self.ny

    def is_free_cell(self, ix: int, iy: int) -> bool:
        return self.in_bounds(ix, iy) and self.grid[iy, ix] == FREE

    def is_free_point(self, x: float, y: float) -> bool:
        ix, iy = self.cell_of(x, y)
        return self.is_free_cell(ix, iy)

    def free_cell_count(self) -> int:
        return int(np.count_nonzero(self.grid == FREE))


def load_environment(config_text: str) -> GroundTruthWorld:
    """Parse a JSON environment config into a validated world.

    Schema: {"size_m": [w, h], "resolution": r,
             "objects": [{"id": int, "rect": [x0, y0, x1, y1]}, ...],
             "start_poses": [[x, y, theta], ...]}
    """
    try:
        cfg = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise EnvironmentFormatError(
            f"config parse failure at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(cfg, dict):
        raise EnvironmentFormatError("config root must be an object")

    try:
        width, height = (float(v) for v in cfg["size_m"])
        resolution = float(cfg["resolution"])
    except (KeyError, TypeError, ValueError) as exc:
        raise EnvironmentFormatError(f"bad or missing size_m/resolution: {exc}") from exc
    if width <= 0 or height <= 0 or resolution <= 0:
        raise EnvironmentFormatError("size_m and resolution must be positive")

    nx = round(width / resolution)
    ny = round(height / resolution)
    if abs(nx * resolution - width) > 1e-9 or abs(ny * resolution - height) > 1e-9:
        raise EnvironmentFormatError(
            f"resolution {resolution} does not divide size {width} x {height}"
        )
    if nx < 3 or ny < 3:
        raise EnvironmentFormatError("world too small: no interior cells inside the boundary wall")

    grid = np.full((ny, nx), FREE, dtype=np.uint8)
    grid[0, :] = OCCUPIED
    grid[-1, :] = OCCUPIED
    grid[:, 0] = OCCUPIED
    grid[:, -1] = OCCUPIED
    object_ids = np.full((ny, nx), -1, dtype=np.int32)

    objects: dict = {}
    for k, obj in enumerate(cfg.get("objects", [])):
        try:
            obj_id = int(obj["id"])
            x0, y0, x1, y1 = (float(v) for v in obj["rect"])
        except (KeyError, TypeError, ValueError) as exc:
            raise EnvironmentFormatError(f"objects[{k}]: bad shape entry: {exc}") from exc
        if obj_id in objects:
            raise EnvironmentFormatError(f"objects[{k}]: duplicate object id {obj_id}")
        if x1 < x0 or y1 < y0:
            raise EnvironmentFormatError(f"objects[{k}]: inverted rect {obj['rect']}")
        cells = set()
        for iy in range(ny):
            for ix in range(nx):
                cx = (ix + 0.5) * resolution
                cy = (iy + 0.5) * resolution
                if x0 <= cx < x1 and y0 <= cy < y1:
                    grid[iy, ix] = OCCUPIED
                    object_ids[iy, ix] = obj_id
                    cells.add((ix, iy))
        objects[obj_id] = frozenset(cells)

    if int(np.count_nonzero(grid == FREE)) == 0:
        raise EnvironmentFormatError("zero free cells after rasterization")

    start_poses = []
    for k, entry in enumerate(cfg.get("start_poses", [])):
        try:
            x, y, theta = (float(v) for v in entry)
        except (TypeError, ValueError) as exc:
            raise EnvironmentFormatError(f"start_poses[{k}]: bad pose entry: {exc}") from exc
        pose = Pose2(x, y, theta)
        ix, iy = int(math.floor(x / resolution)), int(math.floor(y / resolution))
        if not (0 <= ix < nx and 0 <= iy < ny) or grid[iy, ix] != FREE:
            raise EnvironmentFormatError(
                f"start_poses[{k}]: start pose occupied at ({x}, {y}), cell ({ix}, {iy})"
            )
        start_poses.append(pose)

    return GroundTruthWorld(
        width_m=width,
        height_m=height,
        resolution=resolution,
        grid=grid,
        object_ids=object_ids,
        objects=objects,
        start_poses=start_poses,
    )


def apply_motion(
    world: GroundTruthWorld,
    true_pose: Pose2,
    u: Control,
    noise: NoiseParams,
    rng: np.random.Generator,
) -> MotionResult:
    """Execute one control with actuation noise; return the new true pose and
    an independently perturbed odometry measurement.

    If the noisy translation would enter an occupied cell the motion is
    truncated at the last free sample along the segment and the odometry
    measures the truncated motion instead of the command.
    """
    w = rng.normal(0.0, [noise.sigma_trans, noise.sigma_trans, noise.sigma_rot])
    v = rng.normal(0.0, [noise.sigma_trans, noise.sigma_trans, noise.sigma_rot])

    executed = np.array([u.forward + w[0], w[1], u.rotate + w[2]])
    commanded = np.array([u.forward, 0.0, u.rotate])

    # Collision check along the straight translation segment.
    c, s = math.cos(true_pose.theta), math.sin(true_pose.theta)
    dx_w = c * executed[0] - s * executed[1]
    dy_w = s * executed[0] + c * executed[1]
    seg_len = math.hypot(dx_w, dy_w)
    collided = False
    if seg_len > 0.0:
        step = world.resolution * RAY_STEP_FRACTION
        n_samples = max(1, int(math.ceil(seg_len / step)))
        fracs = np.arange(1, n_samples + 1) / n_samples
        xs = true_pose.x + fracs * dx_w
        ys = true_pose.y + fracs * dy_w
        ixs = np.floor(xs / world.resolution).astype(int)
        iys = np.floor(ys / world.resolution).astype(int)
        inside = (ixs >= 0) & (ixs < world.nx) & (iys >= 0) & (iys < world.ny)
        blocked = ~inside
        blocked[inside] = world.grid[iys[inside], ixs[inside]] == OCCUPIED
        if blocked.any():
            collided = True
            first_block = int(np.argmax(blocked))
            scale = fracs[first_block - 1] if first_block > 0 else 0.0
            executed[0] *= scale
            executed[1] *= scale
            commanded = executed.copy()

    new_pose = true_pose.compose(Pose2(executed[0], executed[1], executed[2]))
    odometry = Pose2(commanded[0] + v[0], commanded[1] + v[1], commanded[2] + v[2])
    return MotionResult(pose=new_pose, odometry=odometry, collided=collided)


def simulate_scan(
    world: GroundTruthWorld,
    true_pose: Pose2,
    max_range: float = 3.0,
    n_beams: int = 180,
    coverage: float = 2.0 * math.pi,
) -> ScanResult:
    """Ray-cast `n_beams` beams over `coverage` radians on the true grid.

    Cells traversed before a beam's first occupied cell are reported free;
    the first occupied cell is the hit. Object ids of hit cells are reported.
    """
    if not world.is_free_point(true_pose.x, true_pose.y):
        raise ValueError(f"scan pose ({true_pose.x}, {true_pose.y}) is not on a free cell")

    res = world.resolution
    step = res * RAY_STEP_FRACTION
    n_samples = int(round(max_range / step))
    dists = np.arange(1, n_samples + 1) * step
    rel_angles = np.arange(n_beams) * (coverage / n_beams)
    angles = true_pose.theta + rel_angles

    xs = true_pose.x + np.cos(angles)[:, None] * dists[None, :]
    ys = true_pose.y + np.sin(angles)[:, None] * dists[None, :]
    ixs = np.floor(xs / res).astype(int)
    iys = np.floor(ys / res).astype(int)
    inside = (ixs >= 0) & (ixs < world.nx) & (iys >= 0) & (iys < world.ny)
    ixs_c = np.clip(ixs, 0, world.nx - 1)
    iys_c = np.clip(iys, 0, world.ny - 1)
    occupied = (world.grid[iys_c, ixs_c] == OCCUPIED) | ~inside

    any_hit = occupied.any(axis=1)
    hit_idx = np.argmax(occupied, axis=1)
    hit_idx[~any_hit] = n_samples  # sentinel: whole beam is free

    sample_idx = np.arange(n_samples)[None, :]
    before_hit = sample_idx < hit_idx[:, None]
    at_hit = (sample_idx == hit_idx[:, None]) & inside

    free_cells = set(zip(ixs[before_hit].tolist(), iys[before_hit].tolist()))
    free_cells.add(world.cell_of(true_pose.x, true_pose.y))
    occ_cells = set(zip(ixs[at_hit].tolist(), iys[at_hit].tolist()))
    free_cells -= occ_cells

    obj_ids = set()
    for ix, iy in occ_cells:
        oid = int(world.object_ids[iy, ix])
        if oid >= 0:
            obj_ids.add(oid)

    beams = tuple(
        Beam(
            angle=float(rel_angles[b]),
            range=float(dists[hit_idx[b]]) if any_hit[b] else float(max_range),
            hit=bool(any_hit[b]),
        )
        for b in range(n_beams)
    )
    return ScanResult(
        origin=true_pose,
        max_range=max_range,
        observed_free=frozenset(free_cells),
        observed_occupied=frozenset(occ_cells),
        observed_objects=frozenset(obj_ids),
        beams=beams,
    )
