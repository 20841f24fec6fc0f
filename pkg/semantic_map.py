"""
Semantic Map Module
This module maintains the walkthrough and unshuffle voxel maps with the moving-average
update and reads/writes them in the sparse SMAP1 file format.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from config import HYPERPARAMETERS, InputError, RoomShuffleError
from geometry import GridSpec, VoxelEvidence

logger = logging.getLogger(__name__)

WALKTHROUGH = 0
UNSHUFFLE = 1

# Per-voxel appearance channels tracked next to the class probabilities: r, g, b, openness
ATTRIBUTE_CHANNELS = 4

MAP_MAGIC = b'SMAP1\x00'
MAP_VERSION = 1
# magic, version, H, W, D, C, voxel_size, origin xyz, epsilon, phase, record count
_HEADER = struct.Struct('<6sHIIIIdddddBQ')


class MapFormatError(RoomShuffleError):
    """Raised when a map file cannot be decoded; `offset` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MapFrozenError(RoomShuffleError):
    """Raised when a map of a finished phase is written to."""


@dataclass(eq=False)
class SemanticMap:
    grid: GridSpec
    probs: np.ndarray
    epsilon: float = 0.5
    phase: int = WALKTHROUGH
    attributes: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    frozen: bool = field(default=False, compare=False)

    def __post_init__(self):
        self.probs = np.ascontiguousarray(self.probs)
        if self.probs.shape != self.grid.shape:
            raise InputError(f"map tensor {self.probs.shape} does not match grid {self.grid.shape}")
        if not 0.0 < self.epsilon < 1.0:
            raise InputError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.phase not in (WALKTHROUGH, UNSHUFFLE):
            raise InputError(f"phase must be {WALKTHROUGH} or {UNSHUFFLE}, got {self.phase}")
        if self.attributes is None:
            self.attributes = np.zeros(self.grid.dims + (ATTRIBUTE_CHANNELS,), dtype=np.float32)
        if self.weights is None:
            self.weights = np.zeros(self.grid.dims, dtype=np.float32)

    @classmethod
    def empty(cls, grid: GridSpec, epsilon: Optional[float] = None, phase: int = WALKTHROUGH) -> 'SemanticMap':
        epsilon = HYPERPARAMETERS['epsilon'] if epsilon is None else epsilon
        return cls(grid, np.zeros(grid.shape, dtype=np.float32), epsilon, phase)

    def freeze(self) -> None:
        """Make the map read-only; later updates raise MapFrozenError."""
        self.frozen = True
        for array in (self.probs, self.attributes, self.weights):
            array.flags.writeable = False

    def copy(self) -> 'SemanticMap':
        return SemanticMap(self.grid, self.probs.copy(), self.epsilon, self.phase,
                           self.attributes.copy(), self.weights.copy())

    def nonzero_indices(self) -> np.ndarray:
        """Flat indices of voxels holding any class mass."""
        return np.flatnonzero(np.any(self.probs.reshape(-1, self.grid.num_classes) != 0, axis=1))

    def attribute_means(self, flat_indices: np.ndarray) -> np.ndarray:
        """Normalized running means of the appearance channels; zero where never observed."""
        acc = self.attributes.reshape(-1, ATTRIBUTE_CHANNELS)[flat_indices].astype(np.float64)
        weight = self.weights.reshape(-1)[flat_indices].astype(np.float64)
        out = np.zeros_like(acc)
        seen = weight > 0
        out[seen] = acc[seen] / weight[seen, None]
        return out

    def clear_voxels(self, flat_indices: Iterable[int]) -> None:
        """Forget the given voxels entirely (used after an object is picked up)."""
        if self.frozen:
            raise MapFrozenError("cannot clear voxels of a frozen map")
        idx = np.asarray(flat_indices, dtype=np.int64)
        self.probs.reshape(-1, self.grid.num_classes)[idx] = 0
        self.attributes.reshape(-1, ATTRIBUTE_CHANNELS)[idx] = 0
        self.weights.reshape(-1)[idx] = 0


def update_map(semantic_map: SemanticMap, ev: VoxelEvidence) -> SemanticMap:
    """
    Fold one frame of voxel evidence into a map with the moving-average rule.

    The map is updated in place under the single-writer rule and returned. Voxels
    outside the evidence mask are left untouched.
    """
    if ev.grid.dims != semantic_map.grid.dims:
        raise InputError(f"evidence grid {ev.grid.dims} does not match map grid {semantic_map.grid.dims}")
    if ev.values.ndim != 2 or ev.values.shape[1] != semantic_map.grid.num_classes:
        raise InputError(f"evidence has {ev.values.shape[-1]} classes, map has {semantic_map.grid.num_classes}")
    if semantic_map.frozen:
        raise MapFrozenError(f"map of phase {semantic_map.phase} is frozen")
    if len(ev.indices) == 0:
        return semantic_map

    eps = semantic_map.epsilon
    # Evidence voxels carry mask 1, so the kept share is epsilon
    keep = eps
    idx = ev.indices
    flat = semantic_map.probs.reshape(-1, semantic_map.grid.num_classes)
    flat[idx] = flat[idx] * keep + ev.values * (1.0 - eps)

    if ev.attributes is not None:
        attrs = semantic_map.attributes.reshape(-1, ATTRIBUTE_CHANNELS)
        attrs[idx] = attrs[idx] * keep + ev.attributes[:, :ATTRIBUTE_CHANNELS] * (1.0 - eps)
        weights = semantic_map.weights.reshape(-1)
        weights[idx] = weights[idx] * keep + (1.0 - eps)
    return semantic_map


def occupancy_grid(semantic_map: SemanticMap, class_filter: Optional[Iterable[int]] = None) -> np.ndarray:
    """Boolean (H, W, D) grid: a voxel is occupied iff any selected class has nonzero probability."""
    if class_filter is None:
        return np.any(semantic_map.probs > 0, axis=-1)
    classes = sorted(set(int(c) for c in class_filter))
    if not classes:
        return np.zeros(semantic_map.grid.dims, dtype=bool)
    return np.any(semantic_map.probs[..., classes] > 0, axis=-1)


def _record_dtype(num_classes: int) -> np.dtype:
    return np.dtype([('index', '<u8'), ('probs', '<f4', (num_classes,))])


def save_map(semantic_map: SemanticMap, path: str) -> None:
    """Write the nonzero voxels of a map as an SMAP1 file."""
    grid = semantic_map.grid
    nonzero = semantic_map.nonzero_indices()
    records = np.zeros(len(nonzero), dtype=_record_dtype(grid.num_classes))
    records['index'] = nonzero
    records['probs'] = semantic_map.probs.reshape(-1, grid.num_classes)[nonzero]
    header = _HEADER.pack(MAP_MAGIC, MAP_VERSION, *grid.dims, grid.num_classes, grid.voxel_size,
                          *grid.origin, float(semantic_map.epsilon), int(semantic_map.phase), len(nonzero))
    with open(path, 'wb') as f:
        f.write(header)
        f.write(records.tobytes())
    logger.debug("saved map %s with %d records", path, len(nonzero))


def load_map(path: str) -> SemanticMap:
    """Read an SMAP1 file back into a dense map."""
    with open(path, 'rb') as f:
        data = f.read()
    return decode_map(data)


def decode_map(data: bytes) -> SemanticMap:
    if len(data) < len(MAP_MAGIC) or data[:len(MAP_MAGIC)] != MAP_MAGIC:
        raise MapFormatError("bad magic bytes, not an SMAP1 file", 0)
    if len(data) < _HEADER.size:
        raise MapFormatError("truncated header", len(data))
    (_, version, h, w, d, c, voxel_size, ox, oy, oz,
     epsilon, phase, count) = _HEADER.unpack_from(data, 0)
    if version != MAP_VERSION:
        raise MapFormatError(f"unsupported version {version}", len(MAP_MAGIC))
    if min(h, w, d, c) < 1 or voxel_size <= 0:
        raise MapFormatError(f"invalid grid {h}x{w}x{d}x{c} voxel {voxel_size}", len(MAP_MAGIC) + 2)

    record_dtype = _record_dtype(c)
    body = len(data) - _HEADER.size
    expected = count * record_dtype.itemsize
    if body < expected:
        complete = body // record_dtype.itemsize
        raise MapFormatError(f"truncated records: {complete} of {count} complete",
                             _HEADER.size + complete * record_dtype.itemsize)
    if body > expected:
        raise MapFormatError("trailing bytes after the last record", _HEADER.size + expected)

    records = np.frombuffer(data, dtype=record_dtype, count=count, offset=_HEADER.size)
    grid = GridSpec((h, w, d), voxel_size, (ox, oy, oz), c)
    bad = np.flatnonzero(records['index'] >= grid.num_voxels)
    if len(bad):
        raise MapFormatError(f"voxel index {int(records['index'][bad[0]])} out of range",
                             _HEADER.size + int(bad[0]) * record_dtype.itemsize)

    try:
        semantic_map = SemanticMap.empty(grid, epsilon=epsilon, phase=phase)
    except InputError as e:
        raise MapFormatError(str(e), len(MAP_MAGIC) + 2) from e
    semantic_map.probs.reshape(-1, c)[records['index'].astype(np.int64)] = records['probs']
    return semantic_map
