import math

import numpy as np
import pytest

from exploresim.geometry import Pose2
from exploresim.mapping import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    OccupancyGrid,
    VirtualMap,
    dump_grid,
    dump_virtual_map,
    extract_frontiers,
    integrate_scan,
    load_grid,
    load_virtual_map,
    map_utility,
    predict_visible_cells,
    update_virtual_map,
)
from exploresim.world import ScanResult, load_environment, simulate_scan

from oracles import brute_force_frontiers


def make_scan(origin, free=(), occupied=(), objects=()):
    return ScanResult(
        origin=origin,
        max_range=3.0,
        observed_free=frozenset(free),
        observed_occupied=frozenset(occupied),
        observed_objects=frozenset(objects),
        beams=(),
    )


class TestIntegrateScan:
    def test_empty_scan_leaves_grid_unchanged(self):
        grid = OccupancyGrid(4.0, 4.0, 0.5)
        before = grid.cells.copy()
        integrate_scan(grid, Pose2(1, 1, 0), make_scan(Pose2(1, 1, 0)))
        np.testing.assert_array_equal(grid.cells, before)

    def test_ten_free_cells_written(self):
        grid = OccupancyGrid(6.0, 6.0, 0.5)
        cells = {(ix, 3) for ix in range(2, 12)}
        integrate_scan(grid, Pose2(2, 2, 0), make_scan(Pose2(2, 2, 0), free=cells))
        assert int(np.count_nonzero(grid.cells != UNKNOWN)) == 10
        for ix, iy in cells:
            assert grid.cells[iy, ix] == FREE

    def test_occupied_wins_tie_in_same_scan(self):
        grid = OccupancyGrid(4.0, 4.0, 0.5)
        scan = make_scan(Pose2(1, 1, 0), free={(3, 3)}, occupied={(3, 3)})
        integrate_scan(grid, Pose2(1, 1, 0), scan)
        assert grid.cells[3, 3] == OCCUPIED

    def test_drift_shifts_written_cells(self):
        grid = OccupancyGrid(6.0, 6.0, 0.5)
        # estimate is one cell to the right of the true pose
        true_pose = Pose2(2.0, 2.0, 0.0)
        est_pose = Pose2(2.5, 2.0, 0.0)
        integrate_scan(grid, est_pose, make_scan(true_pose, free={(4, 4)}))
        assert grid.cells[4, 5] == FREE
        assert grid.cells[4, 4] == UNKNOWN


class TestExtractFrontiers:
    def test_all_unknown_grid_has_no_frontiers(self):
        grid = OccupancyGrid(5.0, 5.0, 0.5)
        assert extract_frontiers(grid) == []

    def test_single_free_cell_is_one_frontier(self):
        grid = OccupancyGrid(5.0, 5.0, 0.5)
        grid.cells[4, 4] = FREE
        frontiers = extract_frontiers(grid, min_frontier_size=1)
        assert len(frontiers) == 1
        assert frontiers[0].cells == frozenset({(4, 4)})
        assert frontiers[0].waypoint_cell == (4, 4)

    def test_half_free_grid_has_boundary_column_frontier(self):
        grid = OccupancyGrid(5.0, 5.0, 0.5)
        grid.cells[:, :5] = FREE
        frontiers = extract_frontiers(grid, min_frontier_size=1)
        assert len(frontiers) == 1
        assert frontiers[0].cells == frozenset({(4, iy) for iy in range(10)})
        # waypoint at the column's center
        assert frontiers[0].waypoint_cell in {(4, 4), (4, 5)}

    def test_matches_brute_force_on_random_grids(self):
        rng = np.random.default_rng(99)
        for _ in range(40):
            ny, nx = rng.integers(4, 33, 2)
            grid = OccupancyGrid(nx * 0.5, ny * 0.5, 0.5)
            grid.cells = rng.choice(
                [UNKNOWN, FREE, OCCUPIED], size=(ny, nx), p=[0.4, 0.45, 0.15]
            ).astype(np.uint8)
            min_size = int(rng.integers(1, 4))
            ours = {f.cells for f in extract_frontiers(grid, min_size)}
            oracle = brute_force_frontiers(grid.cells, min_size)
            assert ours == oracle

    def test_ordering_is_by_smallest_flat_index(self):
        grid = OccupancyGrid(8.0, 8.0, 0.5)
        grid.cells[2, 2] = FREE
        grid.cells[10, 10] = FREE
        frontiers = extract_frontiers(grid, min_frontier_size=1)
        ids = [f.id for f in frontiers]
        assert ids == sorted(ids)


class TestVirtualMap:
    def test_update_drops_determinant_per_stated_rule(self):
        vmap = VirtualMap(4.0, 4.0, 0.5, sigma0=0.2)
        update_virtual_map(vmap, np.zeros((2, 2)), [(3, 3)], sigma_range=0.02)
        assert vmap.dets[3, 3] == pytest.approx((0.02**2) ** 2)  # (0.0004)^2 = 1.6e-7
        assert vmap.dets[3, 3] < vmap.initial_det()

    def test_higher_det_candidate_is_ignored(self):
        vmap = VirtualMap(4.0, 4.0, 0.5, sigma0=0.2)
        update_virtual_map(vmap, np.zeros((2, 2)), [(2, 2)], sigma_range=0.02)
        tight = vmap.dets[2, 2]
        update_virtual_map(vmap, np.eye(2) * 0.5, [(2, 2)], sigma_range=0.02)
        assert vmap.dets[2, 2] == tight

    def test_unobserved_cells_unchanged(self):
        vmap = VirtualMap(4.0, 4.0, 0.5)
        update_virtual_map(vmap, np.zeros((2, 2)), [(1, 1)], sigma_range=0.02)
        assert vmap.dets[3, 3] == vmap.initial_det()

    def test_non_psd_pose_cov_rejected(self):
        vmap = VirtualMap(4.0, 4.0, 0.5)
        with pytest.raises(ValueError, match="PSD"):
            update_virtual_map(vmap, np.diag([-1.0, 1.0]), [(1, 1)])

    def test_determinants_never_increase_under_random_updates(self):
        rng = np.random.default_rng(12)
        vmap = VirtualMap(4.0, 4.0, 0.5)
        for _ in range(200):
            a = rng.uniform(0.0, 0.3, (2, 2))
            cov = a @ a.T
            cells = [(int(rng.integers(0, 8)), int(rng.integers(0, 8)))]
            before = vmap.dets.copy()
            update_virtual_map(vmap, cov, cells, sigma_range=0.02)
            assert np.all(vmap.dets <= before + 1e-15)


class TestMapUtility:
    def test_all_initial_closed_form(self):
        vmap = VirtualMap(5.0, 4.0, 0.5, sigma0=0.2)
        m = vmap.nx * vmap.ny
        assert map_utility(vmap) == pytest.approx(m * math.log(0.0016), rel=1e-9)

    def test_identity_covariance_contributes_zero(self):
        vmap = VirtualMap(0.5, 0.5, 0.5)  # single cell
        vmap.covs[0, 0] = np.eye(2)
        vmap.dets[0, 0] = 1.0
        assert map_utility(vmap) == pytest.approx(0.0, abs=1e-12)

    def test_two_cell_map_direct_summation(self):
        vmap = VirtualMap(1.0, 0.5, 0.5)  # two cells
        update_virtual_map(vmap, np.zeros((2, 2)), [(1, 0)], sigma_range=0.02)
        # direct summation oracle over the cell determinants
        expected = sum(math.log(np.linalg.det(vmap.covs[iy, ix])) for iy in range(1) for ix in range(2))
        assert map_utility(vmap) == pytest.approx(expected, rel=1e-12)
        assert map_utility(vmap) == pytest.approx(-6.4378 + -15.649, abs=2e-3)

    def test_non_psd_cell_is_an_error(self):
        vmap = VirtualMap(0.5, 0.5, 0.5)
        vmap.dets[0, 0] = -1.0
        with pytest.raises(ValueError, match="virtual landmark"):
            map_utility(vmap)


class TestDumps:
    GOLDEN_GRID = b"EXPMAP v1 grid 2 2 0.5\n" + bytes([0, 1, 2, 0])

    def test_grid_round_trip(self):
        rng = np.random.default_rng(3)
        grid = OccupancyGrid(4.0, 3.0, 0.5)
        grid.cells = rng.integers(0, 3, size=grid.cells.shape).astype(np.uint8)
        loaded = load_grid(dump_grid(grid))
        np.testing.assert_array_equal(loaded.cells, grid.cells)
        assert loaded.resolution == grid.resolution

    def test_grid_golden_bytes(self):
        grid = OccupancyGrid(1.0, 1.0, 0.5)
        grid.cells = np.array([[0, 1], [2, 0]], dtype=np.uint8)
        assert dump_grid(grid) == self.GOLDEN_GRID
        loaded = load_grid(self.GOLDEN_GRID)
        np.testing.assert_array_equal(loaded.cells, grid.cells)

    def test_virtual_map_round_trip(self):
        vmap = VirtualMap(3.0, 2.0, 0.5)
        update_virtual_map(vmap, np.eye(2) * 0.01, [(1, 1), (3, 2)], sigma_range=0.02)
        loaded = load_virtual_map(dump_virtual_map(vmap))
        np.testing.assert_array_equal(loaded.covs, vmap.covs)
        np.testing.assert_allclose(loaded.dets, vmap.dets, rtol=1e-15)
        assert loaded.sigma0 == vmap.sigma0

    def test_wrong_kind_rejected(self):
        grid = OccupancyGrid(1.0, 1.0, 0.5)
        with pytest.raises(ValueError, match="vmap"):
            load_virtual_map(dump_grid(grid))

    def test_truncated_payload_rejected(self):
        grid = OccupancyGrid(2.0, 2.0, 0.5)
        with pytest.raises(ValueError, match="size"):
            load_grid(dump_grid(grid)[:-3])


class TestPredictVisibleCells:
    def test_unknown_is_treated_as_free(self):
        grid = OccupancyGrid(6.0, 6.0, 0.5)  # fully unknown
        free, hits = predict_visible_cells(grid, 3.0, 3.0, max_range=2.0, n_beams=36)
        assert free  # beams travel through unknown space
        assert not hits

    def test_occupied_cells_stop_beams(self):
        grid = OccupancyGrid(6.0, 6.0, 0.5)
        grid.cells[:, :] = FREE
        grid.cells[:, 8] = OCCUPIED  # wall at x in [4.0, 4.5)
        free, hits = predict_visible_cells(grid, 3.0, 3.0, max_range=3.0, n_beams=4)
        assert (8, 6) in hits
        assert all(ix <= 8 for ix, _ in free | hits)

    def test_matches_true_scan_on_fully_known_grid(self, box_world_text):
        world = load_environment(box_world_text)
        grid = OccupancyGrid(world.width_m, world.height_m, world.resolution)
        grid.cells[world.grid == 0] = FREE
        grid.cells[world.grid == 1] = OCCUPIED
        pose = Pose2(0.75, 0.75, 0.0)
        scan = simulate_scan(world, pose, 3.0, 90)
        free, hits = predict_visible_cells(grid, 0.75, 0.75, max_range=3.0, n_beams=90)
        assert hits == set(scan.observed_occupied)
        assert free == set(scan.observed_free)
