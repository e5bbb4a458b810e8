"""Estimated occupancy map, frontier extraction, and the virtual-landmark map.

The virtual map assigns every cell a 2x2 position covariance, initialized
large and only ever replaced by a lower-determinant candidate, so the
summed log-determinant utility is non-increasing over an episode.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .geometry import Pose2
from .world import ScanResult

UNKNOWN = 0
FREE = 1
OCCUPIED = 2

DEFAULT_RESOLUTION = 0.5
DEFAULT_SIGMA0 = 0.2
DEFAULT_MIN_FRONTIER_SIZE = 2


class OccupancyGrid:
    """Unknown/free/occupied map covering the world extent, origin at (0, 0)."""

    def __init__(self, width_m: float, height_m: float, resolution: float = DEFAULT_RESOLUTION):
        self.resolution = resolution
        self.nx = int(math.ceil(width_m / resolution - 1e-9))
        self.ny = int(math.ceil(height_m / resolution - 1e-9))
        self.cells = np.full((self.ny, self.nx), UNKNOWN, dtype=np.uint8)

    def copy(self) -> "OccupancyGrid":
        out = object.__new__(OccupancyGrid)
        out.resolution = self.resolution
        out.nx = self.nx
        out.ny = self.ny
        out.cells = self.cells.copy()
        return out

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.nx and 0 <= iy < self.ny

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution))

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution

    def flat_index(self, ix: int, iy: int) -> int:
        return iy * self.nx + ix


def transform_scan_cells(scan: ScanResult, pose_est: Pose2, grid: OccupancyGrid):
    """Map a scan's world cells into the estimate frame of `grid`.

    Cell centers are re-expressed through pose_est o origin^-1 (the drift
    between the estimated and true pose at scan time) and re-binned. Returns
    (free_cells, occupied_cells) as sets of (ix, iy); occupied wins ties.
    """
    drift = pose_est.compose(scan.origin.inverse())
    res = grid.resolution

    def remap(cells):
        if not cells:
            return set()
        arr = np.array(sorted(cells), dtype=float)
        centers = (arr + 0.5) * res
        c, s = math.cos(drift.theta), math.sin(drift.theta)
        xs = drift.x + c * centers[:, 0] - s * centers[:, 1]
        ys = drift.y + s * centers[:, 0] + c * centers[:, 1]
        ixs = np.floor(xs / res).astype(int)
        iys = np.floor(ys / res).astype(int)
        keep = (ixs >= 0) & (ixs < grid.nx) & (iys >= 0) & (iys < grid.ny)
        return set(zip(ixs[keep].tolist(), iys[keep].tolist()))

    free = remap(scan.observed_free)
    occ = remap(scan.observed_occupied)
    return free - occ, occ


def integrate_scan(grid: OccupancyGrid, pose_est: Pose2, scan: ScanResult) -> OccupancyGrid:
    """Write one scan into the grid; occupied wins ties within the scan."""
    free, occ = transform_scan_cells(scan, pose_est, grid)
    for ix, iy in free:
        grid.cells[iy, ix] = FREE
    for ix, iy in occ:
        grid.cells[iy, ix] = OCCUPIED
    return grid


@dataclass(frozen=True)
class Frontier:
    id: int  # smallest flat cell index of the component
    cells: frozenset  # of (ix, iy), free and 4-adjacent to unknown
    waypoint_cell: tuple  # (ix, iy)
    waypoint: Pose2  # position of the waypoint cell center, heading 0


def extract_frontiers(grid: OccupancyGrid, min_frontier_size: int = DEFAULT_MIN_FRONTIER_SIZE):
    """All maximal 4-connected components of frontier cells, ordered by
    smallest member flat index. A frontier cell is free and 4-adjacent to
    at least one unknown cell."""
    cells = grid.cells
    free = cells == FREE
    unknown = cells == UNKNOWN
    near_unknown = np.zeros_like(free)
    near_unknown[1:, :] |= unknown[:-1, :]
    near_unknown[:-1, :] |= unknown[1:, :]
    near_unknown[:, 1:] |= unknown[:, :-1]
    near_unknown[:, :-1] |= unknown[:, 1:]
    frontier_mask = free & near_unknown

    seen = np.zeros_like(frontier_mask)
    frontiers = []
    ys, xs = np.nonzero(frontier_mask)
    order = np.argsort(ys * grid.nx + xs)
    for k in order:
        ix0, iy0 = int(xs[k]), int(ys[k])
        if seen[iy0, ix0]:
            continue
        component = []
        queue = deque([(ix0, iy0)])
        seen[iy0, ix0] = True
        while queue:
            ix, iy = queue.popleft()
            component.append((ix, iy))
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                jx, jy = ix + dx, iy + dy
                if grid.in_bounds(jx, jy) and frontier_mask[jy, jx] and not seen[jy, jx]:
                    seen[jy, jx] = True
                    queue.append((jx, jy))
        if len(component) < min_frontier_size:
            continue
        comp_arr = np.array(component, dtype=float)
        centroid = comp_arr.mean(axis=0)
        dists = np.hypot(comp_arr[:, 0] - centroid[0], comp_arr[:, 1] - centroid[1])
        flat = comp_arr[:, 1] * grid.nx + comp_arr[:, 0]
        best = int(np.lexsort((flat, np.round(dists, 12)))[0])
        wx, wy = grid.cell_center(component[best][0], component[best][1])
        frontiers.append(
            Frontier(
                id=int(flat.min()),
                cells=frozenset(component),
                waypoint_cell=component[best],
                waypoint=Pose2(wx, wy, 0.0),
            )
        )
    frontiers.sort(key=lambda f: f.id)
    return frontiers


class VirtualMap:
    """Grid of virtual landmarks: per-cell 2x2 position covariance."""

    def __init__(
        self,
        width_m: float,
        height_m: float,
        resolution: float = DEFAULT_RESOLUTION,
        sigma0: float = DEFAULT_SIGMA0,
    ):
        self.resolution = resolution
        self.sigma0 = sigma0
        self.nx = int(math.ceil(width_m / resolution - 1e-9))
        self.ny = int(math.ceil(height_m / resolution - 1e-9))
        self.covs = np.tile(np.eye(2) * sigma0**2, (self.ny, self.nx, 1, 1))
        self.dets = np.full((self.ny, self.nx), sigma0**4)

    def copy(self) -> "VirtualMap":
        out = object.__new__(VirtualMap)
        out.resolution = self.resolution
        out.sigma0 = self.sigma0
        out.nx = self.nx
        out.ny = self.ny
        out.covs = self.covs.copy()
        out.dets = self.dets.copy()
        return out

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.resolution)), int(math.floor(y / self.resolution))

    def cov_at(self, ix: int, iy: int) -> np.ndarray:
        return self.covs[iy, ix]

    def initial_det(self) -> float:
        return self.sigma0**4


def update_virtual_map(
    vmap: VirtualMap,
    pose_cov: np.ndarray,
    cells,
    sigma_range: float = 0.02,
) -> VirtualMap:
    """Fuse one observation into the virtual map.

    Every observed cell is offered the candidate covariance
    pose_cov + sigma_range^2 I; a cell only accepts it when the candidate's
    determinant is strictly lower, so determinants never increase.
    """
    cov = np.asarray(pose_cov, dtype=float)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError("pose covariance must be 2x2 symmetric")
    if np.linalg.eigvalsh(cov).min() < -1e-9:
        raise ValueError("pose covariance must be PSD")
    candidate = 0.5 * (cov + cov.T) + np.eye(2) * sigma_range**2
    det_cand = float(np.linalg.det(candidate))
    for ix, iy in cells:
        if not (0 <= ix < vmap.nx and 0 <= iy < vmap.ny):
            continue
        if det_cand < vmap.dets[iy, ix]:
            vmap.covs[iy, ix] = candidate
            vmap.dets[iy, ix] = det_cand
    return vmap


def map_utility(vmap: VirtualMap) -> float:
    """Sum over all cells of ln det of the cell covariance."""
    if np.any(vmap.dets <= 0.0):
        bad = np.argwhere(vmap.dets <= 0.0)[0]
        raise ValueError(f"non-PSD virtual landmark covariance at cell {tuple(bad[::-1])}")
    return float(np.log(vmap.dets).sum())


GRID_MAGIC = b"EXPMAP"
DUMP_VERSION = 1


def dump_grid(grid: OccupancyGrid) -> bytes:
    """Portable dump: text header `EXPMAP v1 grid nx ny resolution` plus the
    cell bytes, row-major, little-endian (uint8)."""
    header = f"{GRID_MAGIC.decode()} v{DUMP_VERSION} grid {grid.nx} {grid.ny} {grid.resolution!r}\n"
    return header.encode() + grid.cells.astype("<u1").tobytes()


def load_grid(data: bytes) -> OccupancyGrid:
    header, payload = _split_dump(data, "grid")
    nx, ny, resolution = int(header[3]), int(header[4]), float(header[5])
    if len(payload) != nx * ny:
        raise ValueError(f"grid payload size {len(payload)} != {nx * ny}")
    grid = OccupancyGrid(nx * resolution, ny * resolution, resolution)
    grid.cells = np.frombuffer(payload, dtype="<u1").reshape(ny, nx).copy()
    return grid


def dump_virtual_map(vmap: VirtualMap) -> bytes:
    """Portable dump: text header `EXPMAP v1 vmap nx ny resolution sigma0`
    plus the cell covariances, row-major, little-endian float64 (4 values
    per cell)."""
    header = (
        f"{GRID_MAGIC.decode()} v{DUMP_VERSION} vmap {vmap.nx} {vmap.ny} "
        f"{vmap.resolution!r} {vmap.sigma0!r}\n"
    )
    return header.encode() + vmap.covs.astype("<f8").tobytes()


def load_virtual_map(data: bytes) -> VirtualMap:
    header, payload = _split_dump(data, "vmap")
    nx, ny = int(header[3]), int(header[4])
    resolution, sigma0 = float(header[5]), float(header[6])
    expected = nx * ny * 4 * 8
    if len(payload) != expected:
        raise ValueError(f"virtual map payload size {len(payload)} != {expected}")
    vmap = VirtualMap(nx * resolution, ny * resolution, resolution, sigma0=sigma0)
    vmap.covs = np.frombuffer(payload, dtype="<f8").reshape(ny, nx, 2, 2).copy()
    vmap.dets = np.linalg.det(vmap.covs)
    return vmap


def _split_dump(data: bytes, kind: str):
    newline = data.find(b"\n")
    if newline < 0:
        raise ValueError("missing dump header")
    header = data[:newline].decode(errors="replace").split()
    if len(header) < 6 or header[0] != GRID_MAGIC.decode():
        raise ValueError(f"bad dump header {header!r}")
    if header[1] != f"v{DUMP_VERSION}":
        raise ValueError(f"unsupported dump version {header[1]!r}")
    if header[2] != kind:
        raise ValueError(f"expected a {kind} dump, got {header[2]!r}")
    return header, data[newline + 1 :]


def predict_visible_cells(
    grid: OccupancyGrid,
    x: float,
    y: float,
    max_range: float = 3.0,
    n_beams: int = 180,
):
    """Ray-cast on the estimated grid with unknown treated as free.

    Returns (traversed_cells, hit_cells); only occupied cells stop beams, so
    this predicts what a scan from (x, y) could plausibly observe. Cells
    outside the grid also stop beams.
    """
    res = grid.resolution
    step = res * 0.25
    n_samples = int(round(max_range / step))
    dists = np.arange(1, n_samples + 1) * step
    angles = np.arange(n_beams) * (2.0 * math.pi / n_beams)

    xs = x + np.cos(angles)[:, None] * dists[None, :]
    ys = y + np.sin(angles)[:, None] * dists[None, :]
    ixs = np.floor(xs / res).astype(int)
    iys = np.floor(ys / res).astype(int)
    inside = (ixs >= 0) & (ixs < grid.nx) & (iys >= 0) & (iys < grid.ny)
    ixs_c = np.clip(ixs, 0, grid.nx - 1)
    iys_c = np.clip(iys, 0, grid.ny - 1)
    blocked = (grid.cells[iys_c, ixs_c] == OCCUPIED) | ~inside

    any_hit = blocked.any(axis=1)
    hit_idx = np.argmax(blocked, axis=1)
    hit_idx[~any_hit] = n_samples

    sample_idx = np.arange(n_samples)[None, :]
    before = sample_idx < hit_idx[:, None]
    at_hit = (sample_idx == hit_idx[:, None]) & inside

    traversed = set(zip(ixs[before].tolist(), iys[before].tolist()))
    hits = set(zip(ixs[at_hit].tolist(), iys[at_hit].tolist()))
    cell = grid.cell_of(x, y)
    if grid.in_bounds(*cell):
        traversed.add(cell)
    return traversed - hits, hits
