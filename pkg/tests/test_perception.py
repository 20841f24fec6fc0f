"""Noisy detector and confidence filter checks."""
import numpy as np
import pytest

from config import InputError
from perception import (
    Detection, DetectorNoise, SegmentationFrame, filter_detections, ground_truth_frame, perceive,
    simulate_detections,
)

NUM_CLASSES = 6
WALL = 5


# ── Helpers ──────────────────────────────────────────────────────────────

def _gt_frame() -> SegmentationFrame:
    """12x12 frame: wall everywhere, a 4x4 object of class 1 and a 5x3 object of class 2."""
    class_map = np.full((12, 12), WALL, dtype=np.int64)
    instance_map = np.full((12, 12), -1, dtype=np.int64)
    class_map[2:6, 2:6] = 1
    instance_map[2:6, 2:6] = 10
    class_map[6:11, 7:10] = 2
    instance_map[6:11, 7:10] = 11
    return ground_truth_frame(class_map, instance_map, NUM_CLASSES)


def _frame_with_confidences(confidences) -> SegmentationFrame:
    probs = np.zeros((4, len(confidences), NUM_CLASSES))
    detections = []
    for col, conf in enumerate(confidences):
        mask = np.zeros((4, len(confidences)), dtype=bool)
        mask[:, col] = True
        probs[mask, 0] = conf
        detections.append(Detection(0, conf, mask, col))
    return SegmentationFrame(probs, detections)


# ── Ground truth ─────────────────────────────────────────────────────────

class TestGroundTruthFrame:

    def test_one_detection_per_visible_object(self):
        frame = _gt_frame()
        assert sorted(d.instance_id for d in frame.detections) == [10, 11]
        assert {d.class_id for d in frame.detections} == {1, 2}
        assert all(d.confidence == 1.0 for d in frame.detections)

    def test_pixels_are_one_hot(self):
        frame = _gt_frame()
        np.testing.assert_array_equal(frame.probs.sum(axis=-1), np.ones((12, 12)))
        assert frame.probs[0, 0, WALL] == 1.0
        assert frame.probs[3, 3, 1] == 1.0


# ── Simulated detector ───────────────────────────────────────────────────

class TestSimulateDetections:

    def test_zero_noise_is_identity(self):
        gt = _gt_frame()
        out = simulate_detections(gt, DetectorNoise(), rng_seed=3)
        np.testing.assert_array_equal(out.probs, gt.probs)
        assert [(d.class_id, d.confidence) for d in out.detections] == [(d.class_id, 1.0) for d in gt.detections]

    def test_full_miss_rate_leaves_no_detections(self):
        gt = _gt_frame()
        out = simulate_detections(gt, DetectorNoise(miss_rate=1.0), rng_seed=0)
        assert out.detections == []
        assert not out.probs[gt.detection_pixels()].any()
        # Structure pixels are not detections and stay as they were
        assert out.probs[0, 0, WALL] == 1.0

    def test_same_seed_same_output(self):
        noise = DetectorNoise.from_preset('heavy')
        a = simulate_detections(_gt_frame(), noise, rng_seed=[4, 2])
        b = simulate_detections(_gt_frame(), noise, rng_seed=[4, 2])
        np.testing.assert_array_equal(a.probs, b.probs)
        assert [d.confidence for d in a.detections] == [d.confidence for d in b.detections]

    def test_confusion_relabels_to_a_wrong_class(self):
        noise = DetectorNoise(confusion_rate=1.0, num_object_classes=4)
        out = simulate_detections(_gt_frame(), noise, rng_seed=1)
        truth = {d.instance_id: d.class_id for d in _gt_frame().detections}
        for det in out.detections:
            assert det.class_id != truth[det.instance_id]
            assert 0 <= det.class_id < 4

    def test_erosion_shrinks_masks(self):
        gt = _gt_frame()
        out = simulate_detections(gt, DetectorNoise(mask_erosion_px=1), rng_seed=0)
        sizes = {d.instance_id: d.pixel_count for d in out.detections}
        # 4x4 -> 2x2 and 5x3 -> 3x1
        assert sizes == {10: 4, 11: 3}

    def test_confidences_follow_beta_laws(self):
        noise = DetectorNoise(true_beta=(18.0, 1.5))
        confidences = [d.confidence for seed in range(200)
                       for d in simulate_detections(_gt_frame(), noise, rng_seed=seed).detections]
        assert all(0.0 <= c <= 1.0 for c in confidences)
        assert np.mean(confidences) == pytest.approx(18.0 / 19.5, abs=0.02)

    def test_invalid_noise(self):
        with pytest.raises(InputError):
            DetectorNoise(miss_rate=1.5)
        with pytest.raises(InputError):
            DetectorNoise.from_preset('blurry')


# ── Confidence filter ────────────────────────────────────────────────────

class TestFilterDetections:

    def test_low_confidence_is_removed(self):
        out = filter_detections(_frame_with_confidences([0.85, 0.95]), 0.9)
        assert [d.confidence for d in out.detections] == [0.95]
        assert not out.probs[:, 0].any()
        assert out.probs[:, 1, 0].tolist() == [0.95] * 4

    def test_zero_threshold_keeps_everything(self):
        frame = _frame_with_confidences([0.0, 0.3, 1.0])
        out = filter_detections(frame, 0.0)
        np.testing.assert_array_equal(out.probs, frame.probs)
        assert len(out.detections) == 3

    def test_threshold_one_with_uncertain_detections(self):
        out = filter_detections(_frame_with_confidences([0.5, 0.99]), 1.0)
        assert out.detections == []
        assert not out.probs.any()

    def test_monotone_in_threshold(self):
        frame = simulate_detections(_gt_frame(), DetectorNoise.from_preset('heavy'), rng_seed=9)
        counts = [len(filter_detections(frame, t).detections) for t in np.linspace(0, 1, 11)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_threshold_out_of_range(self):
        with pytest.raises(InputError):
            filter_detections(_frame_with_confidences([0.5]), 1.2)

    def test_gt_preset_pipeline_is_identity(self):
        gt = _gt_frame()
        out = perceive(gt, DetectorNoise.from_preset('gt'), 0.9, rng_seed=0)
        np.testing.assert_array_equal(out.probs, gt.probs)
        assert len(out.detections) == len(gt.detections)
