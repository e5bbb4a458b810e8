"""Obstacle-aware shortest paths on the estimated occupancy grid.

Dijkstra over 8-connected free cells with sqrt(2)-weighted diagonals.
Unknown cells are not traversable; occupied cells are dilated by a
configurable radius, with start and goal exempt so the robot can leave or
enter tight spots next to walls.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .mapping import FREE, OccupancyGrid

DEFAULT_DILATION = 1


@dataclass(frozen=True)
class PlannedPath:
    cells: tuple  # ordered (ix, iy), consecutive cells 8-adjacent
    length_m: float
    goal_frontier_id: int = -1


def traversable_mask(grid: OccupancyGrid, dilation: int = DEFAULT_DILATION) -> np.ndarray:
    """Free cells minus a `dilation`-cell margin around occupied cells."""
    free = grid.cells == FREE
    if dilation <= 0:
        return free
    blocked = grid.cells == 2  # OCCUPIED
    inflated = blocked.copy()
    for _ in range(dilation):
        grown = inflated.copy()
        grown[1:, :] |= inflated[:-1, :]
        grown[:-1, :] |= inflated[1:, :]
        grown[:, 1:] |= inflated[:, :-1]
        grown[:, :-1] |= inflated[:, 1:]
        grown[1:, 1:] |= inflated[:-1, :-1]
        grown[1:, :-1] |= inflated[:-1, 1:]
        grown[:-1, 1:] |= inflated[1:, :-1]
        grown[:-1, :-1] |= inflated[1:, 1:]
        inflated = grown
    return free & ~inflated


_STEPS = (
    (1, 0, 1.0),
    (-1, 0, 1.0),
    (0, 1, 1.0),
    (0, -1, 1.0),
    (1, 1, math.sqrt(2.0)),
    (1, -1, math.sqrt(2.0)),
    (-1, 1, math.sqrt(2.0)),
    (-1, -1, math.sqrt(2.0)),
)


def plan_path(
    grid: OccupancyGrid,
    start: tuple,
    goal: tuple,
    dilation: int = DEFAULT_DILATION,
    goal_frontier_id: int = -1,
):
    """Minimal-cost 8-connected path over free cells, or None if unreachable.

    Ties in the priority queue break on the smaller flat cell index, so the
    result is deterministic for a fixed grid.
    """
    if not grid.in_bounds(*start) or grid.cells[start[1], start[0]] != FREE:
        raise ValueError(f"start cell {start} is not free")
    if not grid.in_bounds(*goal):
        return None

    passable = traversable_mask(grid, dilation)
    # Start and goal stay usable even inside the dilated margin.
    free = grid.cells == FREE
    passable[start[1], start[0]] = free[start[1], start[0]]
    passable[goal[1], goal[0]] = free[goal[1], goal[0]]
    if not passable[goal[1], goal[0]]:
        return None

    res = grid.resolution
    nx = grid.nx
    dist = {start: 0.0}
    prev: dict = {}
    heap = [(0.0, start[1] * nx + start[0], start)]
    visited = set()
    while heap:
        d, _, cell = heapq.heappop(heap)
        if cell in visited:
            continue
        visited.add(cell)
        if cell == goal:
            break
        cx, cy = cell
        for dx, dy, w in _STEPS:
            nxt = (cx + dx, cy + dy)
            if not grid.in_bounds(*nxt) or not passable[nxt[1], nxt[0]]:
                continue
            nd = d + w * res
            if nd < dist.get(nxt, math.inf) - 1e-15:
                dist[nxt] = nd
                prev[nxt] = cell
                heapq.heappush(heap, (nd, nxt[1] * nx + nxt[0], nxt))

    if goal not in visited:
        return None
    cells = [goal]
    while cells[-1] != start:
        cells.append(prev[cells[-1]])
    cells.reverse()
    return PlannedPath(cells=tuple(cells), length_m=dist[goal], goal_frontier_id=goal_frontier_id)
