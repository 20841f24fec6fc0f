"""
Perception Module
This module produces per-pixel class probabilities with detection confidences, either
straight from the simulator's ground truth or through a parameterized noisy detector,
and applies the confidence filter.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from config import NOISE_PRESETS, NUM_OBJECT_CLASSES, InputError

logger = logging.getLogger(__name__)


@dataclass
class Detection:
    class_id: int
    confidence: float
    mask: np.ndarray
    instance_id: int = -1

    @property
    def pixel_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class SegmentationFrame:
    """Per-pixel class probabilities plus the instance detections that painted them."""
    probs: np.ndarray
    detections: List[Detection] = field(default_factory=list)

    @property
    def image_shape(self) -> Tuple[int, int]:
        return self.probs.shape[:2]

    def detection_pixels(self) -> np.ndarray:
        """Union of all detection masks."""
        union = np.zeros(self.image_shape, dtype=bool)
        for det in self.detections:
            union |= det.mask
        return union


@dataclass(frozen=True)
class DetectorNoise:
    miss_rate: float = 0.0
    confusion_rate: float = 0.0
    mask_erosion_px: int = 0
    # Beta law (alpha, beta) of confidences; None means degenerate at 1.0
    true_beta: Optional[Tuple[float, float]] = None
    false_beta: Optional[Tuple[float, float]] = None
    num_object_classes: int = NUM_OBJECT_CLASSES

    def __post_init__(self):
        for name in ('miss_rate', 'confusion_rate'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InputError(f"{name} must lie in [0, 1], got {value}")
        if self.mask_erosion_px < 0:
            raise InputError(f"mask_erosion_px must be non-negative, got {self.mask_erosion_px}")
        for name in ('true_beta', 'false_beta'):
            params = getattr(self, name)
            if params is not None and (len(params) != 2 or min(params) <= 0):
                raise InputError(f"{name} needs two positive Beta parameters, got {params}")

    @classmethod
    def from_preset(cls, name: str) -> 'DetectorNoise':
        if name not in NOISE_PRESETS:
            raise InputError(f"unknown noise preset {name!r}; choose from {list(NOISE_PRESETS)}")
        return cls(**NOISE_PRESETS[name])

    @property
    def is_exact(self) -> bool:
        return (self.miss_rate == 0 and self.confusion_rate == 0 and self.mask_erosion_px == 0
                and self.true_beta is None)


def _paint(probs: np.ndarray, mask: np.ndarray, class_id: int, confidence: float) -> None:
    probs[mask] = 0
    probs[mask, class_id] = confidence


def simulate_detections(gt: SegmentationFrame, noise: DetectorNoise,
                        rng_seed: Union[int, Sequence[int], None] = 0) -> SegmentationFrame:
    """
    Corrupt a ground-truth frame the way an instance segmenter fails.

    Each detection is independently dropped, relabeled to a wrong object class, eroded,
    and given a confidence drawn from the true or corrupted Beta law. Pixels outside all
    detections (walls, floor) pass through untouched.

    Args:
        gt: Ground-truth frame with exact masks and confidence 1.0
        noise: Detector error profile
        rng_seed: Seed of the private random stream; equal seeds give equal output

    Returns:
        A new SegmentationFrame
    """
    rng = np.random.default_rng(rng_seed)
    probs = gt.probs.copy()
    probs[gt.detection_pixels()] = 0

    detections: List[Detection] = []
    for det in gt.detections:
        drop_draw, confusion_draw = rng.random(2)
        if drop_draw < noise.miss_rate:
            continue

        class_id = det.class_id
        corrupted = False
        if confusion_draw < noise.confusion_rate and noise.num_object_classes > 1:
            wrong = [c for c in range(noise.num_object_classes) if c != det.class_id]
            class_id = int(rng.choice(wrong))
            corrupted = True

        mask = det.mask
        if noise.mask_erosion_px > 0:
            mask = ndimage.binary_erosion(mask, iterations=noise.mask_erosion_px)
            if not mask.any():
                continue

        beta = noise.false_beta if corrupted else noise.true_beta
        confidence = 1.0 if beta is None else float(rng.beta(*beta))
        detections.append(Detection(class_id, confidence, mask, det.instance_id))
        _paint(probs, mask, class_id, confidence)

    return SegmentationFrame(probs, detections)


def filter_detections(frame: SegmentationFrame, threshold: float) -> SegmentationFrame:
    """Drop detections whose confidence is below the threshold and zero their pixels."""
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"confidence threshold must lie in [0, 1], got {threshold}")
    kept = [det for det in frame.detections if det.confidence >= threshold]
    if len(kept) == len(frame.detections):
        return SegmentationFrame(frame.probs.copy(), list(kept))
    probs = frame.probs.copy()
    for det in frame.detections:
        if det.confidence < threshold:
            probs[det.mask] = 0
    return SegmentationFrame(probs, kept)


def perceive(gt: SegmentationFrame, noise: DetectorNoise, threshold: float,
             rng_seed: Union[int, Sequence[int], None] = 0) -> SegmentationFrame:
    """Detector followed by the confidence filter."""
    frame = gt if noise.is_exact else simulate_detections(gt, noise, rng_seed)
    return filter_detections(frame, threshold)


def ground_truth_frame(class_map: np.ndarray, instance_map: np.ndarray, num_classes: int) -> SegmentationFrame:
    """
    Build an exact frame from rendered class and instance images.

    Args:
        class_map: (H, W) class id per pixel, structural classes included
        instance_map: (H, W) object id per pixel, -1 where no object was hit
        num_classes: Length of the probability vectors

    Returns:
        SegmentationFrame with one-hot pixels and one confidence-1.0 detection per visible object
    """
    h, w = class_map.shape
    probs = np.zeros((h, w, num_classes), dtype=np.float32)
    rows, cols = np.indices((h, w))
    probs[rows, cols, class_map] = 1.0

    detections = []
    for object_id in np.unique(instance_map[instance_map >= 0]):
        mask = instance_map == object_id
        class_id = int(class_map[mask][0])
        detections.append(Detection(int(class_id), 1.0, mask, int(object_id)))
    return SegmentationFrame(probs, detections)
