"""Independent reference implementations used as test oracles.

Everything here recomputes results from first principles (dense linear
algebra, numerical Jacobians, exhaustive relaxation, definition checks) and
deliberately shares no code with the package internals it verifies.
"""
from __future__ import annotations

import math

import numpy as np

WRAP = lambda t: (t + math.pi) % (2.0 * math.pi) - math.pi  # noqa: E731


# -- dense Gauss-Newton pose-graph oracle -----------------------------------


def _residual(kind, endpoints, meas, x):
    """Residual of one factor given the (n, 3) state array.

    meas = (mx, my, mtheta); translation error expressed in the measurement
    frame, heading error wrapped.
    """
    mx, my, mt = meas
    cm, sm = math.cos(mt), math.sin(mt)
    rm_t = np.array([[cm, sm], [-sm, cm]])
    if kind == "prior":
        (i,) = endpoints
        et = rm_t @ (x[i, :2] - [mx, my])
        return np.array([et[0], et[1], WRAP(x[i, 2] - mt)])
    i, j = endpoints
    ci, si = math.cos(x[i, 2]), math.sin(x[i, 2])
    ri_t = np.array([[ci, si], [-si, ci]])
    pred = ri_t @ (x[j, :2] - x[i, :2])
    et = rm_t @ (pred - [mx, my])
    return np.array([et[0], et[1], WRAP(x[j, 2] - x[i, 2] - mt)])


def _stack(factor_list, x):
    return np.concatenate([_residual(k, e, m, x) for k, e, m in factor_list])


def _numeric_jacobian(factor_list, x, h=1e-6):
    """Central finite differences of the stacked residual.

    Each factor only touches its endpoint poses, so differentiation runs
    per-factor over at most six coordinates."""
    jac = np.zeros((3 * len(factor_list), x.size))
    for row, (kind, endpoints, meas) in enumerate(factor_list):
        for pose_idx in endpoints:
            for c in range(3):
                xp = x.copy()
                xp[pose_idx, c] += h
                xm = x.copy()
                xm[pose_idx, c] -= h
                rp = _residual(kind, endpoints, meas, xp)
                rm = _residual(kind, endpoints, meas, xm)
                jac[3 * row : 3 * row + 3, 3 * pose_idx + c] = (rp - rm) / (2.0 * h)
    return jac


def dense_gauss_newton(factor_list, infos, x0, iters=200, tol=1e-14):
    """Plain Gauss-Newton with step halving on the dense normal equations.

    factor_list: [(kind, endpoints, (mx, my, mtheta)), ...]
    infos: list of 3x3 information matrices, aligned with factor_list.
    Returns (x, cost) at convergence.
    """
    weight = np.zeros((3 * len(infos), 3 * len(infos)))
    for k, info in enumerate(infos):
        weight[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = info

    def cost_of(x):
        r = _stack(factor_list, x)
        return float(r @ weight @ r)

    x = np.array(x0, dtype=float)
    cost = cost_of(x)
    for _ in range(iters):
        r = _stack(factor_list, x)
        jac = _numeric_jacobian(factor_list, x)
        g = jac.T @ weight @ r
        if np.max(np.abs(g)) < tol * max(1.0, cost):
            break
        h_mat = jac.T @ weight @ jac
        dx = np.linalg.solve(h_mat, -g)
        step = 1.0
        while step > 1e-12:
            x_try = x + step * dx.reshape(x.shape)
            x_try[:, 2] = [WRAP(t) for t in x_try[:, 2]]
            new_cost = cost_of(x_try)
            if new_cost <= cost + 1e-15:
                break
            step *= 0.5
        else:
            break
        if abs(cost - new_cost) < 1e-15 * max(1.0, cost):
            x, cost = x_try, new_cost
            break
        x, cost = x_try, new_cost
    return x, cost


def dense_information(factor_list, infos, x):
    """Gauss-Newton information matrix at x, from numerical Jacobians."""
    jac = _numeric_jacobian(factor_list, x)
    weight = np.zeros((3 * len(infos), 3 * len(infos)))
    for k, info in enumerate(infos):
        weight[3 * k : 3 * k + 3, 3 * k : 3 * k + 3] = info
    return jac.T @ weight @ jac


# -- exhaustive shortest-path oracle -----------------------------------------


def bellman_ford_grid(passable: np.ndarray, start, resolution: float):
    """All-pairs-from-start costs by exhaustive relaxation over the
    8-connected grid; passable is a boolean (ny, nx) mask."""
    ny, nx = passable.shape
    dist = np.full((ny, nx), np.inf)
    if not passable[start[1], start[0]]:
        return dist
    dist[start[1], start[0]] = 0.0
    moves = [
        (1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
        (1, 1, math.sqrt(2)), (1, -1, math.sqrt(2)), (-1, 1, math.sqrt(2)), (-1, -1, math.sqrt(2)),
    ]
    changed = True
    while changed:
        changed = False
        for iy in range(ny):
            for ix in range(nx):
                if not passable[iy, ix] or not np.isfinite(dist[iy, ix]):
                    continue
                for dx, dy, w in moves:
                    jx, jy = ix + dx, iy + dy
                    if 0 <= jx < nx and 0 <= jy < ny and passable[jy, jx]:
                        cand = dist[iy, ix] + w * resolution
                        if cand < dist[jy, jx] - 1e-12:
                            dist[jy, jx] = cand
                            changed = True
    return dist


# -- frontier definition oracle ----------------------------------------------


def brute_force_frontiers(cells: np.ndarray, min_size: int):
    """Frontier components straight from the definition: free cells
    4-adjacent to unknown, grouped by repeated set expansion."""
    ny, nx = cells.shape
    members = set()
    for iy in range(ny):
        for ix in range(nx):
            if cells[iy, ix] != 1:  # FREE
                continue
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                jx, jy = ix + dx, iy + dy
                if 0 <= jx < nx and 0 <= jy < ny and cells[jy, jx] == 0:  # UNKNOWN
                    members.add((ix, iy))
                    break
    components = []
    remaining = set(members)
    while remaining:
        seed = min(remaining, key=lambda c: (c[1], c[0]))
        comp = {seed}
        while True:
            grow = {
                (cx + dx, cy + dy)
                for cx, cy in comp
                for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
            } & remaining
            if grow <= comp:
                break
            comp |= grow
        remaining -= comp
        if len(comp) >= min_size:
            components.append(frozenset(comp))
    return set(components)
