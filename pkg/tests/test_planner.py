"""Navigation graph and Dijkstra checks against a breadth-first oracle."""
from collections import deque

import numpy as np
import pytest

from config import InputError
from planner import (
    UnreachableError, build_nav_graph, cell_center, cell_of_point, cells_within, column_blocked,
    nearest_reachable_cell, shortest_path,
)


# ── Helpers ──────────────────────────────────────────────────────────────

def _bfs_length(free: np.ndarray, start, goal):
    """Edge count of the shortest 4-connected path, None if unreachable."""
    if not free[start] or not free[goal]:
        return None
    seen = {start: 0}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            return seen[cell]
        i, j = cell
        for nxt in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= nxt[0] < free.shape[0] and 0 <= nxt[1] < free.shape[1] and free[nxt] and nxt not in seen:
                seen[nxt] = seen[cell] + 1
                queue.append(nxt)
    return None


def _assert_valid_path(path, free, start, goal):
    assert path[0] == start and path[-1] == goal
    for a, b in zip(path, path[1:]):
        assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1
    assert all(free[c] for c in path)


# ── Graph construction ───────────────────────────────────────────────────

class TestBuildNavGraph:

    def test_empty_map_is_complete_grid(self):
        nav = build_nav_graph(np.zeros((4, 6, 3), dtype=bool), inflation=0, cell_voxels=1)
        assert nav.graph.number_of_nodes() == 24
        # 4 rows of 5 horizontal edges plus 3 rows of 6 vertical edges
        assert nav.graph.number_of_edges() == 4 * 5 + 3 * 6

    def test_inflation_removes_four_neighbours(self):
        occ = np.zeros((5, 5), dtype=bool)
        occ[2, 2] = True
        bare = build_nav_graph(occ, inflation=0, cell_voxels=1)
        inflated = build_nav_graph(occ, inflation=1, cell_voxels=1)
        assert bare.graph.number_of_nodes() == 24
        assert inflated.graph.number_of_nodes() == 20
        for cell in [(1, 2), (3, 2), (2, 1), (2, 3)]:
            assert cell in bare and cell not in inflated

    def test_full_height_wall_column(self):
        occ = np.zeros((5, 5, 4), dtype=bool)
        occ[0, 0, :] = True
        nav = build_nav_graph(occ, inflation=1, cell_voxels=1)
        assert (0, 0) not in nav and (0, 1) not in nav and (1, 0) not in nav
        assert (1, 1) in nav

    def test_voxels_above_height_range_do_not_block(self):
        occ = np.zeros((3, 3, 10), dtype=bool)
        occ[1, 1, 8] = True
        assert (1, 1) in build_nav_graph(occ, inflation=0, cell_voxels=1, z_range=(0, 6))
        assert (1, 1) not in build_nav_graph(occ, inflation=0, cell_voxels=1)

    def test_cells_aggregate_voxel_columns(self):
        occ = np.zeros((10, 10), dtype=bool)
        occ[7, 2] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=5)
        assert nav.shape == (2, 2)
        assert (1, 0) not in nav
        assert {(0, 0), (0, 1), (1, 1)} <= set(nav.graph.nodes)

    def test_edges_join_free_neighbours_only(self):
        rng = np.random.default_rng(0)
        occ = rng.random((12, 12)) < 0.3
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        for a, b in nav.graph.edges:
            assert nav.free[a] and nav.free[b]
            assert abs(a[0] - b[0]) + abs(a[1] - b[1]) == 1

    def test_blocked_and_forced_cells(self):
        occ = np.zeros((4, 4), dtype=bool)
        occ[0, 0] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1, blocked_cells=[(3, 3)], keep_free=[(0, 0)])
        assert (3, 3) not in nav
        assert (0, 0) in nav

    def test_grid_smaller_than_a_cell(self):
        with pytest.raises(InputError):
            build_nav_graph(np.zeros((3, 3)), cell_voxels=5)

    def test_column_blocked_rejects_bad_rank(self):
        with pytest.raises(InputError):
            column_blocked(np.zeros((2, 2, 2, 2)))


# ── Shortest paths ───────────────────────────────────────────────────────

class TestShortestPath:

    def test_straight_corridor(self):
        occ = np.ones((3, 8), dtype=bool)
        occ[1, 1:7] = False
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        path = shortest_path(nav, (1, 1), (1, 6))
        assert path == [(1, j) for j in range(1, 7)]

    def test_goal_behind_a_wall(self):
        occ = np.zeros((6, 6), dtype=bool)
        occ[:, 3] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        with pytest.raises(UnreachableError):
            shortest_path(nav, (0, 0), (0, 5))

    def test_goal_inside_an_obstacle(self):
        occ = np.zeros((4, 4), dtype=bool)
        occ[2, 2] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        with pytest.raises(UnreachableError):
            shortest_path(nav, (0, 0), (2, 2))

    def test_start_must_be_free(self):
        occ = np.zeros((4, 4), dtype=bool)
        occ[0, 0] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        with pytest.raises(InputError):
            shortest_path(nav, (0, 0), (3, 3))

    def test_matches_breadth_first_oracle(self):
        rng = np.random.default_rng(42)
        checked = 0
        for _ in range(200):
            occ = rng.random((20, 20)) < 0.25
            nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
            free_cells = list(zip(*np.nonzero(~occ)))
            start = tuple(int(v) for v in free_cells[rng.integers(len(free_cells))])
            goal = tuple(int(v) for v in free_cells[rng.integers(len(free_cells))])
            expected = _bfs_length(~occ, start, goal)
            if expected is None:
                with pytest.raises(UnreachableError):
                    shortest_path(nav, start, goal)
                continue
            path = shortest_path(nav, start, goal)
            assert len(path) - 1 == expected
            _assert_valid_path(path, ~occ, start, goal)
            checked += 1
        assert checked > 100

    def test_deterministic(self):
        occ = np.random.default_rng(5).random((15, 15)) < 0.2
        occ[0, 0] = occ[14, 14] = False
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        try:
            first = shortest_path(nav, (0, 0), (14, 14))
        except UnreachableError:
            pytest.skip("random grid disconnected the corners")
        again = shortest_path(build_nav_graph(occ, inflation=0, cell_voxels=1), (0, 0), (14, 14))
        assert first == again


# ── Cell helpers ─────────────────────────────────────────────────────────

class TestCellHelpers:

    def test_point_and_center_agree(self):
        cell = cell_of_point([1.3, 0.6], 0.05, 5)
        assert cell == (5, 2)
        np.testing.assert_allclose(cell_center(cell, 0.05, 5), [1.375, 0.625])

    def test_nearest_reachable_cell(self):
        occ = np.zeros((4, 4), dtype=bool)
        occ[:, 2] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        # The target sits across the wall; the closest reachable cell is beside it
        assert nearest_reachable_cell(nav, (0, 0), [3.5, 3.5], 1.0) == (3, 1)

    def test_nearest_reachable_cell_when_boxed_in(self):
        occ = np.zeros((3, 3), dtype=bool)
        occ[1, 1] = True
        nav = build_nav_graph(occ, inflation=0, cell_voxels=1)
        with pytest.raises(UnreachableError):
            nearest_reachable_cell(nav, (1, 1), [0.5, 0.5], 1.0)

    def test_cells_within_sorted_by_path_length(self):
        nav = build_nav_graph(np.zeros((5, 5), dtype=bool), inflation=0, cell_voxels=1)
        cells = cells_within(nav, (0, 0), [2.5, 2.5], 1.0, 1.0)
        assert set(cells) == {(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)}
        assert cells[0] in {(1, 2), (2, 1)}
        assert cells[-1] in {(3, 2), (2, 3)}
