"""
Configuration Module
This module holds the class palette, detector noise presets, hyperparameter defaults,
ablation presets and the validated run configuration used by the harness.
"""
import os
from typing import Any, Optional, List

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator


class RoomShuffleError(Exception):
    """Base class for every error raised by the rearrangement engine."""


class InputError(RoomShuffleError, ValueError):
    """Raised on malformed inputs: dimension mismatches, bad actions, empty datasets."""


class ConfigError(RoomShuffleError):
    """Raised when a run configuration is invalid or refers to missing files."""


# Object classes of the synthetic rooms. Extents are (x, y, z) in meters and are even
# multiples of the voxel size so box faces fall mid-voxel when centered on a voxel center.
CLASS_PALETTE = {
    # Small pickable objects
    'apple':       {'color': (0.80, 0.10, 0.10), 'extent': (0.2, 0.2, 0.2), 'pickable': True,  'openable': False},
    'bowl':        {'color': (0.95, 0.85, 0.55), 'extent': (0.3, 0.3, 0.2), 'pickable': True,  'openable': False},
    'book':        {'color': (0.20, 0.30, 0.70), 'extent': (0.3, 0.2, 0.2), 'pickable': True,  'openable': False},
    'bread':       {'color': (0.75, 0.55, 0.25), 'extent': (0.4, 0.2, 0.2), 'pickable': True,  'openable': False},
    'cup':         {'color': (0.95, 0.95, 0.95), 'extent': (0.2, 0.2, 0.2), 'pickable': True,  'openable': False},
    'mug':         {'color': (0.40, 0.75, 0.85), 'extent': (0.2, 0.2, 0.2), 'pickable': True,  'openable': False},
    'pan':         {'color': (0.20, 0.20, 0.20), 'extent': (0.4, 0.4, 0.2), 'pickable': True,  'openable': False},
    'plate':       {'color': (0.85, 0.90, 0.95), 'extent': (0.4, 0.4, 0.2), 'pickable': True,  'openable': False},
    'pot':         {'color': (0.55, 0.55, 0.60), 'extent': (0.4, 0.4, 0.4), 'pickable': True,  'openable': False},
    'remote':      {'color': (0.10, 0.10, 0.35), 'extent': (0.2, 0.4, 0.2), 'pickable': True,  'openable': False},
    'vase':        {'color': (0.60, 0.20, 0.60), 'extent': (0.2, 0.2, 0.4), 'pickable': True,  'openable': False},
    'pillow':      {'color': (0.95, 0.60, 0.70), 'extent': (0.4, 0.4, 0.2), 'pickable': True,  'openable': False},
    'basketball':  {'color': (0.95, 0.45, 0.05), 'extent': (0.4, 0.4, 0.4), 'pickable': True,  'openable': False},
    'teddy_bear':  {'color': (0.50, 0.30, 0.15), 'extent': (0.4, 0.4, 0.6), 'pickable': True,  'openable': False},
    'laptop':      {'color': (0.30, 0.30, 0.30), 'extent': (0.4, 0.4, 0.2), 'pickable': True,  'openable': True},
    'box':         {'color': (0.70, 0.60, 0.40), 'extent': (0.6, 0.4, 0.4), 'pickable': True,  'openable': True},
    # Furniture: openable, never moved
    'cabinet':     {'color': (0.45, 0.25, 0.10), 'extent': (0.6, 0.6, 1.0), 'pickable': False, 'openable': True},
    'fridge':      {'color': (0.85, 0.85, 0.80), 'extent': (0.8, 0.8, 1.4), 'pickable': False, 'openable': True},
    'drawer':      {'color': (0.60, 0.40, 0.20), 'extent': (0.6, 0.4, 0.8), 'pickable': False, 'openable': True},
    'microwave':   {'color': (0.15, 0.50, 0.20), 'extent': (0.6, 0.4, 0.4), 'pickable': False, 'openable': True},
}

CLASS_NAMES = list(CLASS_PALETTE.keys())
NUM_OBJECT_CLASSES = len(CLASS_NAMES)
PICKABLE_CLASSES = tuple(k for k, name in enumerate(CLASS_NAMES) if CLASS_PALETTE[name]['pickable'])

# Structural classes follow the object classes in every probability vector
WALL_CLASS = NUM_OBJECT_CLASSES
FLOOR_CLASS = NUM_OBJECT_CLASSES + 1
NUM_CLASSES = NUM_OBJECT_CLASSES + 2
STRUCTURE_COLORS = {
    WALL_CLASS: (0.80, 0.80, 0.75),
    FLOOR_CLASS: (0.55, 0.45, 0.35),
}

# Detector error profiles standing in for a learned instance segmenter.
# These are invented desk-scale values; only trends across presets are meaningful.
NOISE_PRESETS = {
    # Exact masks, confidence degenerate at 1.0
    'gt': {
        'miss_rate': 0.0,
        'confusion_rate': 0.0,
        'mask_erosion_px': 0,
        'true_beta': None,
        'false_beta': None,
    },
    'moderate': {
        'miss_rate': 0.1,
        'confusion_rate': 0.05,
        'mask_erosion_px': 1,
        'true_beta': (18.0, 1.5),
        'false_beta': (3.0, 4.0),
    },
    'heavy': {
        'miss_rate': 0.25,
        'confusion_rate': 0.2,
        'mask_erosion_px': 2,
        'true_beta': (8.0, 2.0),
        'false_beta': (2.0, 5.0),
    },
}

HYPERPARAMETERS = {
    # Mapping
    'voxel_size': 0.05,
    'map_height': 1.6,
    'epsilon': 0.5,
    'max_depth': 10.0,
    # Perception
    'confidence_threshold': 0.9,
    # Diffing
    'distance_threshold': 0.05,
    'openness_threshold': 0.2,
    'min_instance_voxels': 4,
    # Search policy
    'expert_sigma': 0.75,
    'policy_layers': 5,
    'policy_hidden': 64,
    'policy_kernel': 3,
    'learning_rate': 3e-4,
    'batch_size': 8,
    'epochs': 15,
    'dataset_size': 512,
    'snapshot_every': 50,
    'goal_retries': 64,
    # Navigation
    'nav_cell_voxels': 5,
    'inflation': 1,
    'agent_height': 1.5,
    # Agent budgets
    'max_goals': 5,
    'mapping_steps': 300,
    'resolution_steps': 400,
    'goal_step_slack': 10,
    'resolve_attempts': 3,
    # Simulator
    'room_size': 9.6,
    'room_height': 2.4,
    'object_count': 10,
    'shuffle_count': 5,
    'image_width': 160,
    'image_height': 120,
    'focal_length_px': 100.0,
    'camera_height': 1.5,
    'interaction_range': 1.5,
}

# Ablation axes: which components are replaced by oracles
ABLATION_PRESETS = {
    'base':               {'perception': 'moderate', 'search': 'trained'},
    'no_semantic_search': {'perception': 'moderate', 'search': 'uniform'},
    'gt_search':          {'perception': 'moderate', 'search': 'gt'},
    'gt_segmentation':    {'perception': 'gt',       'search': 'trained'},
    'gt_both':            {'perception': 'gt',       'search': 'gt'},
}

PERCEPTION_MODES = tuple(NOISE_PRESETS.keys())
SEARCH_MODES = ('trained', 'uniform', 'gt')


def get_epsilon() -> float:
    """Moving-average rate, overridable through ROOMSHUFFLE_EPSILON."""
    return float(os.environ.get('ROOMSHUFFLE_EPSILON', HYPERPARAMETERS['epsilon']))


def get_confidence_threshold() -> float:
    """Detection confidence threshold, overridable through ROOMSHUFFLE_CONFIDENCE."""
    return float(os.environ.get('ROOMSHUFFLE_CONFIDENCE', HYPERPARAMETERS['confidence_threshold']))


def get_log_level() -> str:
    return os.environ.get('ROOMSHUFFLE_LOG_LEVEL', 'INFO').upper()


class RunConfig(BaseModel):
    """Validated inputs of a harness batch."""

    episodes: int = Field(default=20, ge=1)
    seed: int = 0
    perception: str = 'moderate'
    search: str = 'uniform'
    checkpoint: Optional[str] = None
    confidence: float = Field(default_factory=get_confidence_threshold, ge=0.0, le=1.0)
    epsilon: float = Field(default_factory=get_epsilon, gt=0.0, lt=1.0)
    max_goals: int = Field(default=HYPERPARAMETERS['max_goals'], ge=0)
    mapping_steps: int = Field(default=HYPERPARAMETERS['mapping_steps'], ge=1)
    resolution_steps: int = Field(default=HYPERPARAMETERS['resolution_steps'], ge=1)
    room_size: float = Field(default=HYPERPARAMETERS['room_size'], gt=0.0)
    object_count: int = Field(default=HYPERPARAMETERS['object_count'], ge=1)
    shuffle_count: int = Field(default=HYPERPARAMETERS['shuffle_count'], ge=0, le=5)
    openness_shuffles: bool = False
    jobs: int = Field(default=1, ge=1)

    @field_validator('perception')
    @classmethod
    def _known_perception(cls, value: str) -> str:
        if value not in PERCEPTION_MODES:
            raise ValueError(f"perception must be one of {PERCEPTION_MODES}, got {value!r}")
        return value

    @field_validator('search')
    @classmethod
    def _known_search(cls, value: str) -> str:
        if value not in SEARCH_MODES:
            raise ValueError(f"search must be one of {SEARCH_MODES}, got {value!r}")
        return value

    @model_validator(mode='after')
    def _checkpoint_for_trained_search(self) -> 'RunConfig':
        if self.search == 'trained':
            if not self.checkpoint:
                raise ValueError("search mode 'trained' requires a checkpoint")
            if not os.path.exists(self.checkpoint):
                raise ValueError(f"checkpoint not found: {self.checkpoint}")
        if self.shuffle_count > self.object_count:
            raise ValueError("shuffle_count cannot exceed object_count")
        return self

    def with_updates(self, **changes: Any) -> 'RunConfig':
        """Return a re-validated copy with some fields replaced."""
        return build_run_config(**{**self.model_dump(), **changes})


def build_run_config(**kwargs: Any) -> RunConfig:
    """
    Build a RunConfig, converting validation failures into ConfigError.

    Args:
        **kwargs: RunConfig fields; None values fall back to the defaults

    Returns:
        The validated configuration
    """
    fields = {key: value for key, value in kwargs.items() if value is not None}
    try:
        return RunConfig(**fields)
    except ValidationError as e:
        messages = '; '.join(err['msg'] for err in e.errors())
        raise ConfigError(f"Invalid run configuration: {messages}") from e


def apply_preset(name: str, **kwargs: Any) -> RunConfig:
    """Build a RunConfig from an ablation preset, with explicit fields taking precedence."""
    if name not in ABLATION_PRESETS:
        raise ConfigError(f"Unknown preset {name!r}; choose from {list(ABLATION_PRESETS)}")
    return build_run_config(**{**ABLATION_PRESETS[name], **{k: v for k, v in kwargs.items() if v is not None}})


def preset_names() -> List[str]:
    return list(ABLATION_PRESETS.keys())
