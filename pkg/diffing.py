"""
Diffing Module
This module extracts object instances from each semantic map, matches them across the
two phases by appearance, and emits the disagreements that make up the inferred
rearrangement goal.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from config import HYPERPARAMETERS, InputError
from semantic_map import SemanticMap

logger = logging.getLogger(__name__)

POSITION = 'position'
OPENNESS = 'openness'

# 6-connectivity in 3-D
_FACE_NEIGHBORS = ndimage.generate_binary_structure(3, 1)


@dataclass(eq=False)
class ObjectInstance:
    class_id: int
    voxels: np.ndarray
    centroid: np.ndarray
    color: np.ndarray
    openness: float = 0.0
    footprint_center: Optional[np.ndarray] = None

    @property
    def voxel_count(self) -> int:
        return int(len(self.voxels))


@dataclass(eq=False)
class Disagreement:
    class_id: int
    current: np.ndarray
    goal: np.ndarray
    cost: float
    kind: str = POSITION
    voxel_count: int = 0
    current_anchor: Optional[np.ndarray] = None
    goal_anchor: Optional[np.ndarray] = None
    goal_openness: float = 0.0
    current_openness: float = 0.0
    goal_index: int = -1
    current_voxels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.current - self.goal))

    def to_record(self) -> dict:
        return {
            'class_id': int(self.class_id),
            'kind': self.kind,
            'current': [float(v) for v in self.current],
            'goal': [float(v) for v in self.goal],
            'distance': self.distance,
            'cost': float(self.cost),
            'voxel_count': int(self.voxel_count),
            'goal_openness': float(self.goal_openness),
            'current_openness': float(self.current_openness),
        }


@dataclass
class Matching:
    pairs: List[Tuple[int, int]]
    total_cost: float


@dataclass
class MatchResult:
    pairs: List[Tuple[ObjectInstance, ObjectInstance]]
    unmatched_walkthrough: List[ObjectInstance]
    unmatched_unshuffle: List[ObjectInstance]


def label_instances(semantic_map: SemanticMap, classes: Optional[Iterable[int]] = None,
                    min_voxels: int = 1) -> List[ObjectInstance]:
    """
    Split each class's nonzero voxels into 6-connected object instances.

    Args:
        semantic_map: Map to label
        classes: Class ids to consider (default all)
        min_voxels: Components smaller than this are ignored

    Returns:
        Instances ordered by class id, then by their smallest voxel index
    """
    grid = semantic_map.grid
    classes = range(grid.num_classes) if classes is None else sorted(set(int(c) for c in classes))
    instances: List[ObjectInstance] = []
    for class_id in classes:
        present = semantic_map.probs[..., class_id] > 0
        if not present.any():
            continue
        labels, count = ndimage.label(present, structure=_FACE_NEIGHBORS)
        flat = labels.reshape(-1)
        voxels = np.flatnonzero(flat)
        order = np.argsort(flat[voxels], kind='stable')
        voxels = voxels[order]
        splits = np.flatnonzero(np.diff(flat[voxels])) + 1
        for component in np.split(voxels, splits):
            if len(component) < min_voxels:
                continue
            instances.append(_make_instance(semantic_map, class_id, component))
    return instances


def _make_instance(semantic_map: SemanticMap, class_id: int, voxels: np.ndarray) -> ObjectInstance:
    grid = semantic_map.grid
    centers = grid.voxel_centers(voxels)
    centroid = centers.mean(axis=0)

    attrs = semantic_map.attribute_means(voxels)
    seen = semantic_map.weights.reshape(-1)[voxels] > 0
    if seen.any():
        color = attrs[seen, :3].mean(axis=0)
        openness = float(attrs[seen, 3].mean())
    else:
        color = np.zeros(3)
        openness = 0.0

    # Footprint: mean of the distinct ground-plane columns the instance covers
    columns = np.unique(voxels // grid.dims[2])
    col_i, col_j = np.unravel_index(columns, grid.dims[:2])
    footprint = np.array([
        grid.origin[0] + (col_i.mean() + 0.5) * grid.voxel_size,
        grid.origin[1] + (col_j.mean() + 0.5) * grid.voxel_size,
        centroid[2],
    ])
    return ObjectInstance(int(class_id), voxels, centroid, color, openness, footprint)


def solve_assignment(cost: np.ndarray) -> Matching:
    """Minimum-cost matching of size min(n, m) over a rectangular cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise InputError("cost matrix must be finite")
    if cost.size == 0:
        return Matching([], 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols))
    return Matching(pairs, float(sum(cost[r, c] for r, c in pairs)))


def match_instances(walkthrough: List[ObjectInstance], unshuffle: List[ObjectInstance]) -> MatchResult:
    """
    Pair instances of the same class across the two maps by average color.

    The assignment cost is the color distance alone.
    """
    by_class: Dict[int, Tuple[List[ObjectInstance], List[ObjectInstance]]] = {}
    for inst in walkthrough:
        by_class.setdefault(inst.class_id, ([], []))[0].append(inst)
    for inst in unshuffle:
        by_class.setdefault(inst.class_id, ([], []))[1].append(inst)

    pairs, lost, extra = [], [], []
    for class_id in sorted(by_class):
        before, after = by_class[class_id]
        if not before or not after:
            lost.extend(before)
            extra.extend(after)
            continue
        cost = cdist(np.array([i.color for i in before]), np.array([i.color for i in after]))
        matching = solve_assignment(cost)
        used_before = {r for r, _ in matching.pairs}
        used_after = {c for _, c in matching.pairs}
        pairs.extend((before[r], after[c]) for r, c in matching.pairs)
        lost.extend(inst for k, inst in enumerate(before) if k not in used_before)
        extra.extend(inst for k, inst in enumerate(after) if k not in used_after)
    if lost or extra:
        logger.debug("unmatched instances: %d walkthrough, %d unshuffle", len(lost), len(extra))
    return MatchResult(pairs, lost, extra)


def detect_disagreements(pairs: List[Tuple[ObjectInstance, ObjectInstance]],
                         threshold: float = None,
                         openness_threshold: Optional[float] = None,
                         goal_indices: Optional[Dict[int, int]] = None) -> List[Disagreement]:
    """
    Emit the matched pairs whose centroids moved by more than `threshold` meters.

    Pairs that stayed put but whose openness changed by more than `openness_threshold`
    are emitted as openness disagreements. Pass openness_threshold=None to disable them.

    Args:
        pairs: (walkthrough instance, unshuffle instance) pairs
        threshold: Centroid distance threshold in meters (default 0.05)
        openness_threshold: Openness difference threshold
        goal_indices: Optional id(walkthrough instance) -> index lookup recorded on each result

    Returns:
        Disagreements in pair order
    """
    threshold = HYPERPARAMETERS['distance_threshold'] if threshold is None else threshold
    if threshold <= 0:
        raise InputError(f"distance threshold must be positive, got {threshold}")

    found = []
    for before, after in pairs:
        distance = float(np.linalg.norm(after.centroid - before.centroid))
        if distance > threshold:
            kind = POSITION
        elif (openness_threshold is not None
              and abs(before.openness - after.openness) > openness_threshold):
            kind = OPENNESS
        else:
            continue
        found.append(Disagreement(
            class_id=before.class_id,
            current=after.centroid,
            goal=before.centroid,
            cost=float(np.linalg.norm(after.color - before.color)),
            kind=kind,
            voxel_count=after.voxel_count,
            current_anchor=after.footprint_center,
            goal_anchor=before.footprint_center,
            goal_openness=before.openness,
            current_openness=after.openness,
            goal_index=goal_indices.get(id(before), -1) if goal_indices else -1,
            current_voxels=after.voxels,
        ))
    return found


@dataclass
class DiffResult:
    disagreements: List[Disagreement]
    unmatched_walkthrough: List[ObjectInstance]
    unmatched_unshuffle: List[ObjectInstance]


def diff_maps(walkthrough_instances: List[ObjectInstance], unshuffle_map: SemanticMap,
              classes: Iterable[int], min_voxels: int = None, threshold: float = None,
              openness_threshold: float = None) -> DiffResult:
    """Label the unshuffle map, match it against cached walkthrough instances and diff."""
    min_voxels = HYPERPARAMETERS['min_instance_voxels'] if min_voxels is None else min_voxels
    openness_threshold = (HYPERPARAMETERS['openness_threshold']
                          if openness_threshold is None else openness_threshold)
    current = label_instances(unshuffle_map, classes, min_voxels)
    result = match_instances(walkthrough_instances, current)
    goal_indices = {id(inst): k for k, inst in enumerate(walkthrough_instances)}
    found = detect_disagreements(result.pairs, threshold, openness_threshold, goal_indices)
    return DiffResult(found, result.unmatched_walkthrough, result.unmatched_unshuffle)
