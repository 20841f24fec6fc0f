"""
Planner Module
This module builds a traversability graph over ground-plane navigation cells from map
occupancy and computes shortest navigation paths on it.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Set, Tuple

import networkx as nx
import numpy as np
from scipy import ndimage

from config import HYPERPARAMETERS, InputError, RoomShuffleError

logger = logging.getLogger(__name__)

Cell = Tuple[int, int]


class UnreachableError(RoomShuffleError):
    """Raised when no path connects the start to the goal."""


@dataclass
class NavGraph:
    graph: nx.Graph
    free: np.ndarray
    inflation: int
    cell_voxels: int

    def __contains__(self, cell) -> bool:
        return tuple(cell) in self.graph

    @property
    def shape(self) -> Tuple[int, int]:
        return self.free.shape

    def reachable_from(self, start: Cell) -> Set[Cell]:
        start = tuple(start)
        if start not in self.graph:
            return set()
        return set(nx.node_connected_component(self.graph, start))

    def distances_from(self, start: Cell) -> dict:
        """Hop counts from start to every reachable cell."""
        start = tuple(start)
        if start not in self.graph:
            return {}
        return nx.single_source_shortest_path_length(self.graph, start)


def column_blocked(occ: np.ndarray, z_range: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Collapse a (H, W, D) occupancy grid to blocked columns; a 2-D grid is taken as-is."""
    occ = np.asarray(occ, dtype=bool)
    if occ.ndim == 2:
        return occ
    if occ.ndim != 3:
        raise InputError(f"occupancy must be 2-D or 3-D, got shape {occ.shape}")
    lo, hi = z_range if z_range is not None else (0, occ.shape[2])
    return occ[:, :, lo:hi].any(axis=2)


def build_nav_graph(occ: np.ndarray, inflation: int = None, cell_voxels: int = None,
                    z_range: Optional[Tuple[int, int]] = None,
                    blocked_cells: Iterable[Cell] = (),
                    keep_free: Iterable[Cell] = ()) -> NavGraph:
    """
    Build the 4-connected navigation graph over free cells.

    A cell is free iff none of its columns holds an occupied voxel within the height
    range, after dilating obstacles by `inflation` cells (4-neighborhood steps).

    Args:
        occ: Occupancy grid, (H, W, D) voxels or (H, W) columns
        inflation: Agent-footprint inflation radius in cells (default 1)
        cell_voxels: Voxel columns per navigation cell side (default 5)
        z_range: Voxel height slice [lo, hi) that blocks the agent
        blocked_cells: Cells known to be impassable regardless of the map
        keep_free: Cells forced free (for example the agent's own cell)

    Returns:
        NavGraph with unit-weight edges
    """
    inflation = HYPERPARAMETERS['inflation'] if inflation is None else int(inflation)
    cell_voxels = HYPERPARAMETERS['nav_cell_voxels'] if cell_voxels is None else int(cell_voxels)
    if inflation < 0 or cell_voxels < 1:
        raise InputError(f"invalid inflation {inflation} or cell size {cell_voxels}")

    columns = column_blocked(occ, z_range)
    rows, cols = columns.shape[0] // cell_voxels, columns.shape[1] // cell_voxels
    if rows == 0 or cols == 0:
        raise InputError(f"grid {columns.shape} smaller than one {cell_voxels}-voxel cell")
    blocked = columns[:rows * cell_voxels, :cols * cell_voxels]
    blocked = blocked.reshape(rows, cell_voxels, cols, cell_voxels).any(axis=(1, 3))
    if inflation > 0 and blocked.any():
        structure = ndimage.generate_binary_structure(2, 1)
        blocked = ndimage.binary_dilation(blocked, structure=structure, iterations=inflation)
    for cell in blocked_cells:
        if 0 <= cell[0] < rows and 0 <= cell[1] < cols:
            blocked[cell[0], cell[1]] = True
    free = ~blocked
    for cell in keep_free:
        if 0 <= cell[0] < rows and 0 <= cell[1] < cols:
            free[cell[0], cell[1]] = True

    graph = nx.Graph()
    nodes = [(int(i), int(j)) for i, j in zip(*np.nonzero(free))]
    graph.add_nodes_from(nodes)
    # Edges are added forward only so every adjacency list ends up in lexicographic order
    for i, j in nodes:
        if j + 1 < cols and free[i, j + 1]:
            graph.add_edge((i, j), (i, j + 1), weight=1)
        if i + 1 < rows and free[i + 1, j]:
            graph.add_edge((i, j), (i + 1, j), weight=1)
    return NavGraph(graph, free, inflation, cell_voxels)


def shortest_path(nav: NavGraph, start: Cell, goal: Cell) -> List[Cell]:
    """Dijkstra shortest path from start to goal, both cells included."""
    start, goal = (int(start[0]), int(start[1])), (int(goal[0]), int(goal[1]))
    if start not in nav.graph:
        raise InputError(f"start cell {start} is not a free cell")
    if goal not in nav.graph:
        raise UnreachableError(f"goal cell {goal} is not a free cell")
    try:
        return [tuple(cell) for cell in nx.dijkstra_path(nav.graph, start, goal, weight='weight')]
    except nx.NetworkXNoPath as e:
        raise UnreachableError(f"no path from {start} to {goal}") from e


def cell_of_point(point, voxel_size: float, cell_voxels: int = None,
                  origin: Tuple[float, float] = (0.0, 0.0)) -> Cell:
    """Navigation cell containing a world xy point."""
    cell_voxels = HYPERPARAMETERS['nav_cell_voxels'] if cell_voxels is None else cell_voxels
    size = voxel_size * cell_voxels
    return (int(np.floor((point[0] - origin[0]) / size)), int(np.floor((point[1] - origin[1]) / size)))


def cell_center(cell: Cell, voxel_size: float, cell_voxels: int = None,
                origin: Tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """World xy of a navigation cell center."""
    cell_voxels = HYPERPARAMETERS['nav_cell_voxels'] if cell_voxels is None else cell_voxels
    size = voxel_size * cell_voxels
    return np.array([origin[0] + (cell[0] + 0.5) * size, origin[1] + (cell[1] + 0.5) * size])


def nearest_reachable_cell(nav: NavGraph, start: Cell, target_xy, voxel_size: float,
                           origin: Tuple[float, float] = (0.0, 0.0)) -> Cell:
    """Reachable cell whose center is closest to a world point; ties go to the smallest cell."""
    reachable = sorted(nav.reachable_from(start))
    if not reachable:
        raise UnreachableError(f"no cell is reachable from {start}")
    centers = np.array([cell_center(c, voxel_size, nav.cell_voxels, origin) for c in reachable])
    dist = np.linalg.norm(centers - np.asarray(target_xy, dtype=np.float64)[:2], axis=1)
    return reachable[int(np.argmin(dist))]


def cells_within(nav: NavGraph, start: Cell, target_xy, radius: float, voxel_size: float,
                 origin: Tuple[float, float] = (0.0, 0.0)) -> List[Cell]:
    """Reachable cells within `radius` of a point, nearest by path length first."""
    distances = nav.distances_from(start)
    target = np.asarray(target_xy, dtype=np.float64)[:2]
    candidates = []
    for cell, hops in distances.items():
        if np.linalg.norm(cell_center(cell, voxel_size, nav.cell_voxels, origin) - target) <= radius:
            candidates.append((hops, cell))
    return [cell for _, cell in sorted(candidates)]
