"""Moving-average update, occupancy and SMAP1 file checks."""
import struct

import numpy as np
import pytest

from config import InputError
from geometry import GridSpec, VoxelEvidence
from semantic_map import (
    MAP_MAGIC, UNSHUFFLE, WALKTHROUGH, MapFormatError, MapFrozenError, SemanticMap,
    decode_map, load_map, occupancy_grid, save_map, update_map,
)


# ── Helpers ──────────────────────────────────────────────────────────────

def _grid(dims=(4, 5, 3), num_classes=6) -> GridSpec:
    return GridSpec(dims, 0.05, origin=(0.1, -0.2, 0.0), num_classes=num_classes)


def _one_hot_evidence(grid: GridSpec, flat_indices, class_id: int) -> VoxelEvidence:
    values = np.zeros((len(flat_indices), grid.num_classes))
    values[:, class_id] = 1.0
    return VoxelEvidence(grid, np.asarray(flat_indices, dtype=np.int64), values)


def _random_map(seed=0, phase=UNSHUFFLE) -> SemanticMap:
    rng = np.random.default_rng(seed)
    grid = _grid()
    probs = np.zeros(grid.shape, dtype=np.float32)
    occupied = rng.random(grid.dims) < 0.3
    probs[occupied] = (rng.dirichlet(np.ones(grid.num_classes), size=occupied.sum()) * 0.9).astype(np.float32)
    return SemanticMap(grid, probs, epsilon=0.5, phase=phase)


def _sub_stochastic_map(grid: GridSpec, rng: np.random.Generator) -> SemanticMap:
    probs = rng.dirichlet(np.ones(grid.num_classes), size=grid.num_voxels) * rng.random((grid.num_voxels, 1))
    return SemanticMap(grid, probs.reshape(grid.shape).astype(np.float32), epsilon=0.5)


# ── Moving-average update ────────────────────────────────────────────────

class TestUpdateMap:

    def test_empty_voxel_takes_half_the_evidence(self):
        grid = _grid()
        m = update_map(SemanticMap.empty(grid, 0.5), _one_hot_evidence(grid, [7], 3))
        expected = np.zeros(grid.num_classes)
        expected[3] = 0.5
        np.testing.assert_array_equal(m.probs.reshape(-1, grid.num_classes)[7], expected)

    def test_unmasked_voxels_are_unchanged(self):
        m = _random_map()
        before = m.probs.copy()
        update_map(m, _one_hot_evidence(m.grid, [0, 5], 2))
        flat_before = before.reshape(-1, m.grid.num_classes)
        flat_after = m.probs.reshape(-1, m.grid.num_classes)
        untouched = np.setdiff1d(np.arange(m.grid.num_voxels), [0, 5])
        np.testing.assert_array_equal(flat_after[untouched], flat_before[untouched])

    def test_matches_dense_rule(self):
        rng = np.random.default_rng(2)
        m = _random_map(1)
        grid = m.grid
        mask = rng.random(grid.dims) < 0.4
        evidence = np.zeros(grid.shape)
        evidence[mask] = rng.dirichlet(np.ones(grid.num_classes), size=mask.sum())
        before = m.probs.astype(np.float64)
        expected = before * (1.0 - mask[..., None] * 0.5) + evidence * 0.5
        update_map(m, VoxelEvidence.from_dense(grid, evidence, mask))
        np.testing.assert_allclose(m.probs, expected, atol=1e-6)

    def test_converges_to_repeated_evidence(self):
        rng = np.random.default_rng(3)
        grid = _grid(dims=(10, 10, 10), num_classes=5)
        m = _sub_stochastic_map(grid, rng)
        evidence = rng.dirichlet(np.ones(5), size=grid.num_voxels) * rng.random((grid.num_voxels, 1))
        frame = VoxelEvidence(grid, np.arange(grid.num_voxels), evidence)
        for _ in range(20):
            update_map(m, frame)
        flat = m.probs.reshape(-1, grid.num_classes)
        assert np.abs(flat - evidence).max() <= 0.5 ** 20 + 1e-6

    def test_sums_stay_at_most_one(self):
        rng = np.random.default_rng(4)
        grid = _grid(dims=(20, 20, 25), num_classes=4)
        m = _sub_stochastic_map(grid, rng)
        evidence = rng.dirichlet(np.ones(4), size=grid.num_voxels) * rng.random((grid.num_voxels, 1))
        for _ in range(3):
            update_map(m, VoxelEvidence(grid, np.arange(grid.num_voxels), evidence))
            assert (m.probs >= 0).all()
            assert m.probs.sum(axis=-1).max() <= 1.0 + 1e-6

    def test_forgetting_is_geometric(self):
        grid = _grid()
        m = SemanticMap.empty(grid, 0.5)
        update_map(m, _one_hot_evidence(grid, [11], 1))
        for n in range(1, 9):
            update_map(m, _one_hot_evidence(grid, [11], 4))
            assert m.probs.reshape(-1, grid.num_classes)[11, 1] == 0.5 * 0.5 ** n

    def test_dimension_mismatch(self):
        m = SemanticMap.empty(_grid())
        with pytest.raises(InputError):
            update_map(m, _one_hot_evidence(_grid(dims=(4, 5, 4)), [0], 0))

    def test_class_count_mismatch(self):
        m = SemanticMap.empty(_grid())
        with pytest.raises(InputError):
            update_map(m, _one_hot_evidence(_grid(num_classes=5), [0], 0))

    def test_frozen_map_rejects_updates(self):
        m = SemanticMap.empty(_grid())
        m.freeze()
        with pytest.raises(MapFrozenError):
            update_map(m, _one_hot_evidence(m.grid, [0], 0))

    def test_attributes_follow_the_same_rule(self):
        grid = _grid()
        m = SemanticMap.empty(grid)
        ev = _one_hot_evidence(grid, [3], 0)
        ev.attributes = np.array([[0.8, 0.4, 0.2, 1.0]])
        update_map(m, ev)
        update_map(m, ev)
        np.testing.assert_allclose(m.attribute_means(np.array([3]))[0], [0.8, 0.4, 0.2, 1.0], rtol=1e-6)
        np.testing.assert_array_equal(m.attribute_means(np.array([4]))[0], np.zeros(4))

    def test_clear_voxels(self):
        m = _random_map()
        idx = m.nonzero_indices()[:3]
        m.clear_voxels(idx)
        assert not m.probs.reshape(-1, m.grid.num_classes)[idx].any()


# ── Occupancy ────────────────────────────────────────────────────────────

class TestOccupancyGrid:

    def test_empty_map_is_free(self):
        assert not occupancy_grid(SemanticMap.empty(_grid())).any()

    def test_tiny_mass_counts_as_occupied(self):
        m = SemanticMap.empty(_grid())
        m.probs[1, 2, 0, 2] = 1e-6
        occ = occupancy_grid(m)
        assert occ[1, 2, 0]
        assert occ.sum() == 1

    def test_class_filter(self):
        m = SemanticMap.empty(_grid())
        m.probs[0, 0, 0, 5] = 0.5
        assert not occupancy_grid(m, {2}).any()
        assert occupancy_grid(m, {2, 5})[0, 0, 0]
        assert not occupancy_grid(m, set()).any()


# ── SMAP1 files ──────────────────────────────────────────────────────────

class TestMapFiles:

    def test_round_trip_is_bit_exact(self, tmp_path):
        m = _random_map(5, phase=UNSHUFFLE)
        path = str(tmp_path / "m.smap")
        save_map(m, path)
        loaded = load_map(path)
        assert loaded.grid == m.grid
        assert loaded.epsilon == m.epsilon
        assert loaded.phase == UNSHUFFLE
        assert loaded.probs.tobytes() == m.probs.tobytes()

    def test_empty_map_is_header_only(self, tmp_path):
        grid = _grid()
        path = tmp_path / "empty.smap"
        save_map(SemanticMap.empty(grid, phase=WALKTHROUGH), str(path))
        data = path.read_bytes()
        assert data.startswith(MAP_MAGIC)
        assert struct.unpack_from('<Q', data, len(data) - 8)[0] == 0
        assert not decode_map(data).probs.any()

    def test_wrong_magic(self):
        with pytest.raises(MapFormatError) as err:
            decode_map(b'XMAP1\x00' + b'\x00' * 80)
        assert err.value.offset == 0

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "v.smap"
        save_map(SemanticMap.empty(_grid()), str(path))
        data = bytearray(path.read_bytes())
        data[6:8] = struct.pack('<H', 9)
        with pytest.raises(MapFormatError) as err:
            decode_map(bytes(data))
        assert err.value.offset == 6

    def test_truncated_records(self, tmp_path):
        path = tmp_path / "t.smap"
        save_map(_random_map(6), str(path))
        data = path.read_bytes()
        with pytest.raises(MapFormatError) as err:
            decode_map(data[:-3])
        assert 0 < err.value.offset < len(data)

    def test_truncated_header(self):
        with pytest.raises(MapFormatError):
            decode_map(MAP_MAGIC + b'\x01\x00')

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "x.smap"
        save_map(_random_map(7), str(path))
        data = path.read_bytes()
        with pytest.raises(MapFormatError) as err:
            decode_map(data + b'\x00')
        assert err.value.offset == len(data)
