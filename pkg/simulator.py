"""
Simulator Module
This module provides deterministic synthetic rooms of axis-aligned box objects: two-phase
episode generation, raycast RGB-D rendering with ground-truth segmentation, discrete agent
dynamics and ground-truth rearrangement metrics.
"""
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import (CLASS_NAMES, CLASS_PALETTE, FLOOR_CLASS, HYPERPARAMETERS, NUM_CLASSES,
                    NUM_OBJECT_CLASSES, PICKABLE_CLASSES, STRUCTURE_COLORS, WALL_CLASS, InputError,
                    RoomShuffleError)
from geometry import CameraIntrinsics, GridSpec, Pose, camera_to_world_rotation, pixel_rays
from perception import SegmentationFrame, ground_truth_frame

logger = logging.getLogger(__name__)

MOVE_AHEAD = 'move_ahead'
ROTATE_LEFT = 'rotate_left'
ROTATE_RIGHT = 'rotate_right'
LOOK_UP = 'look_up'
LOOK_DOWN = 'look_down'
PICK = 'pick'
PLACE = 'place'
OPEN = 'open'
DONE = 'done'
ACTIONS = (MOVE_AHEAD, ROTATE_LEFT, ROTATE_RIGHT, LOOK_UP, LOOK_DOWN, PICK, PLACE, OPEN, DONE)

MOVE_STEP = 0.25
PITCH_STEP = math.radians(30.0)
PITCH_RANGE = (-2, 1)

POSITION_TOLERANCE = 0.05
OPENNESS_TOLERANCE = 0.2


class GenerationError(RoomShuffleError):
    """Raised when a room layout cannot be generated within the retry budget."""


@dataclass(frozen=True)
class SceneObject:
    id: int
    class_id: int
    color: Tuple[float, float, float]
    extent: Tuple[float, float, float]
    position: Tuple[float, float, float]
    openness: float = 0.0
    pickable: bool = True
    openable: bool = False

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        center = np.asarray(self.position)
        half = np.asarray(self.extent) / 2.0
        return center - half, center + half

    def to_record(self) -> dict:
        return {
            'id': self.id,
            'class': self.class_name,
            'class_id': self.class_id,
            'color': list(self.color),
            'extent': list(self.extent),
            'position': list(self.position),
            'openness': self.openness,
            'pickable': self.pickable,
            'openable': self.openable,
        }

    @classmethod
    def from_record(cls, record: dict) -> 'SceneObject':
        return cls(
            id=int(record['id']),
            class_id=int(record['class_id']),
            color=tuple(float(v) for v in record['color']),
            extent=tuple(float(v) for v in record['extent']),
            position=tuple(float(v) for v in record['position']),
            openness=float(record['openness']),
            pickable=bool(record['pickable']),
            openable=bool(record['openable']),
        )


@dataclass(frozen=True)
class Scene:
    room_size: float
    room_height: float
    objects: Tuple[SceneObject, ...] = ()

    def get(self, object_id: int) -> Optional[SceneObject]:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        return None

    def with_object(self, obj: SceneObject) -> 'Scene':
        """Scene with `obj` replacing the object of the same id (or added if absent)."""
        others = [o for o in self.objects if o.id != obj.id]
        return dataclasses.replace(self, objects=tuple(sorted(others + [obj], key=lambda o: o.id)))

    def without_object(self, object_id: int) -> 'Scene':
        return dataclasses.replace(self, objects=tuple(o for o in self.objects if o.id != object_id))

    def boxes(self) -> Tuple[np.ndarray, np.ndarray]:
        """(M, 3) lower and upper corners of every object box."""
        if not self.objects:
            return np.zeros((0, 3)), np.zeros((0, 3))
        lo, hi = zip(*(obj.bounds() for obj in self.objects))
        return np.array(lo), np.array(hi)


@dataclass(frozen=True)
class ShuffleEntry:
    object_id: int
    kind: str
    goal_position: Tuple[float, float, float]
    shuffled_position: Tuple[float, float, float]
    goal_openness: float
    shuffled_openness: float

    @property
    def displacement(self) -> float:
        return float(np.linalg.norm(np.subtract(self.shuffled_position, self.goal_position)))


@dataclass(frozen=True)
class SimulatorConfig:
    room_size: float = HYPERPARAMETERS['room_size']
    room_height: float = HYPERPARAMETERS['room_height']
    object_count: int = HYPERPARAMETERS['object_count']
    shuffle_count: int = HYPERPARAMETERS['shuffle_count']
    min_displacement: float = 0.5
    openness_shuffles: bool = False
    openness_shuffle_prob: float = 0.2
    color_jitter: float = 0.05
    camera_height: float = HYPERPARAMETERS['camera_height']
    image_width: int = HYPERPARAMETERS['image_width']
    image_height: int = HYPERPARAMETERS['image_height']
    focal_length_px: float = HYPERPARAMETERS['focal_length_px']
    agent_radius: float = 0.1
    interaction_range: float = HYPERPARAMETERS['interaction_range']
    wall_margin: float = 0.1
    object_gap: float = 0.1
    start_clearance: float = 0.45
    placement_retries: int = 10_000
    voxel_size: float = HYPERPARAMETERS['voxel_size']

    def __post_init__(self):
        if not 0 <= self.shuffle_count <= 5:
            raise InputError(f"shuffle_count must lie in [0, 5], got {self.shuffle_count}")
        if self.shuffle_count > self.object_count:
            raise InputError("shuffle_count cannot exceed object_count")
        if self.room_size <= 0 or self.room_height <= self.camera_height:
            raise InputError(f"room {self.room_size} x {self.room_height} cannot hold the camera")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.centered(self.image_width, self.image_height, self.focal_length_px)

    def grid(self) -> GridSpec:
        return GridSpec.for_room(self.room_size, self.voxel_size)


@dataclass(frozen=True)
class EpisodeSpec:
    seed: int
    config: SimulatorConfig
    goal_scene: Scene
    shuffled_scene: Scene
    shuffle_set: Tuple[ShuffleEntry, ...]
    start_position: Tuple[float, float]
    start_yaw: int = 0

    @property
    def shuffled_ids(self) -> List[int]:
        return [entry.object_id for entry in self.shuffle_set]


def _snapped_range(extent: float, config: SimulatorConfig) -> Tuple[int, int]:
    """Inclusive range of voxel-center indices keeping a box of `extent` off the walls."""
    v = config.voxel_size
    half = extent / 2.0
    lo = int(math.ceil((config.wall_margin + half) / v - 0.5 - 1e-9))
    hi = int(math.floor((config.room_size - config.wall_margin - half) / v - 0.5 + 1e-9))
    if hi < lo:
        raise GenerationError(f"extent {extent} does not fit in a {config.room_size} m room")
    return lo, hi


def _overlaps(lo: np.ndarray, hi: np.ndarray, others: Sequence[SceneObject], gap: float) -> bool:
    for other in others:
        olo, ohi = other.bounds()
        if np.all(lo[:2] - gap < ohi[:2]) and np.all(olo[:2] < hi[:2] + gap):
            return True
    return False


def _sample_position(rng: np.random.Generator, extent: Tuple[float, float, float],
                     others: Sequence[SceneObject], config: SimulatorConfig,
                     away_from: Optional[Tuple[float, float, float]] = None) -> Tuple[float, float, float]:
    x_range = _snapped_range(extent[0], config)
    y_range = _snapped_range(extent[1], config)
    half = np.asarray(extent) / 2.0
    v = config.voxel_size
    for _ in range(config.placement_retries):
        i = int(rng.integers(x_range[0], x_range[1] + 1))
        j = int(rng.integers(y_range[0], y_range[1] + 1))
        center = np.array([(i + 0.5) * v, (j + 0.5) * v, half[2]])
        if away_from is not None and np.linalg.norm(center - np.asarray(away_from)) <= config.min_displacement:
            continue
        if _overlaps(center - half, center + half, others, config.object_gap):
            continue
        return tuple(float(c) for c in center)
    raise GenerationError(f"could not place a {extent} box after {config.placement_retries} retries")


def _clearance(point: np.ndarray, scene: Scene) -> float:
    """Distance from a floor point to the nearest wall or object footprint."""
    best = min(point[0], point[1], scene.room_size - point[0], scene.room_size - point[1])
    for obj in scene.objects:
        lo, hi = obj.bounds()
        dx = max(lo[0] - point[0], 0.0, point[0] - hi[0])
        dy = max(lo[1] - point[1], 0.0, point[1] - hi[1])
        best = min(best, math.hypot(dx, dy))
    return best


def generate_episode(seed: int, config: Optional[SimulatorConfig] = None) -> EpisodeSpec:
    """
    Generate a goal layout, its shuffled counterpart and the agent start, all from one seed.

    Object centers sit on voxel centers. Only pickable objects are shuffled, each moved by
    more than `min_displacement`. With `openness_shuffles` on, furniture joins the shuffle
    pool and openable objects may flip their openness instead.

    Args:
        seed: Seed of the episode's random stream
        config: Room and object settings

    Returns:
        EpisodeSpec

    Raises:
        GenerationError: if a layout or start position cannot be found
    """
    config = config or SimulatorConfig()
    rng = np.random.default_rng(seed)

    objects: List[SceneObject] = []
    movable = 0
    for object_id in range(config.object_count):
        # The last objects are drawn pickable when the shuffle set still needs them
        needed = config.shuffle_count - movable
        if not config.openness_shuffles and needed >= config.object_count - object_id:
            class_id = int(rng.choice(PICKABLE_CLASSES))
        else:
            class_id = int(rng.integers(NUM_OBJECT_CLASSES))
        entry = CLASS_PALETTE[CLASS_NAMES[class_id]]
        jitter = rng.uniform(-config.color_jitter, config.color_jitter, 3)
        color = tuple(float(c) for c in np.clip(np.asarray(entry['color']) + jitter, 0.0, 1.0))
        position = _sample_position(rng, entry['extent'], objects, config)
        openness = float(rng.integers(2)) if entry['openable'] else 0.0
        objects.append(SceneObject(object_id, class_id, color, tuple(entry['extent']), position,
                                   openness, entry['pickable'], entry['openable']))
        movable += int(entry['pickable'])
    goal_scene = Scene(config.room_size, config.room_height, tuple(objects))

    shuffled_scene = goal_scene
    shuffle_set = []
    pool = np.array([o.id for o in objects if config.openness_shuffles or o.pickable], dtype=np.int64)
    chosen = rng.choice(pool, size=config.shuffle_count, replace=False)
    for object_id in sorted(int(i) for i in chosen):
        obj = shuffled_scene.get(object_id)
        flip = config.openness_shuffles and obj.openable and (
            not obj.pickable or rng.random() < config.openness_shuffle_prob)
        if flip:
            moved = dataclasses.replace(obj, openness=1.0 - obj.openness)
            kind = 'openness'
        else:
            others = [o for o in shuffled_scene.objects if o.id != object_id]
            position = _sample_position(rng, obj.extent, others, config, away_from=obj.position)
            moved = dataclasses.replace(obj, position=position)
            kind = 'position'
        shuffled_scene = shuffled_scene.with_object(moved)
        shuffle_set.append(ShuffleEntry(object_id, kind, obj.position, moved.position,
                                        obj.openness, moved.openness))

    cell = MOVE_STEP
    cells = int(round(config.room_size / cell))
    candidates = []
    for i in range(cells):
        for j in range(cells):
            point = np.array([(i + 0.5) * cell, (j + 0.5) * cell])
            if min(_clearance(point, goal_scene), _clearance(point, shuffled_scene)) > config.start_clearance:
                candidates.append((float(point[0]), float(point[1])))
    if not candidates:
        raise GenerationError("no start position with enough clearance")
    start = candidates[int(rng.integers(len(candidates)))]
    start_yaw = int(rng.integers(4))

    logger.debug("generated episode %d: %d objects, %d shuffled", seed, len(objects), len(shuffle_set))
    return EpisodeSpec(seed, config, goal_scene, shuffled_scene, tuple(shuffle_set), start, start_yaw)


@dataclass
class Observation:
    pose: Pose
    rgb: np.ndarray
    depth: np.ndarray
    segmentation: SegmentationFrame
    class_map: np.ndarray
    instance_ids: np.ndarray
    openness: np.ndarray

    @property
    def visible_ids(self) -> List[int]:
        return [int(i) for i in np.unique(self.instance_ids) if i >= 0]


def render_observation(scene: Scene, pose: Pose, intr: CameraIntrinsics) -> Observation:
    """
    Raycast one RGB-D frame: every pixel ray is intersected with the room shell and with
    every object box, and the nearest hit provides depth, color, class and instance.

    Depth is measured along the optical axis.
    """
    rays = pixel_rays(intr).reshape(-1, 3)
    dirs = rays @ camera_to_world_rotation(pose).T
    dirs = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    origin = pose.position

    # Room shell: the ray leaves through the first bounding plane it reaches
    room_hi = np.array([scene.room_size, scene.room_size, scene.room_height])
    t_exit = np.where(dirs > 0, (room_hi - origin) / dirs, -origin / dirs)
    exit_axis = np.argmin(t_exit, axis=1)
    depth = t_exit[np.arange(len(dirs)), exit_axis]
    floor = (exit_axis == 2) & (dirs[:, 2] < 0)
    class_ids = np.where(floor, FLOOR_CLASS, WALL_CLASS)
    instance_ids = np.full(len(dirs), -1, dtype=np.int64)
    colors = np.where(floor[:, None], np.asarray(STRUCTURE_COLORS[FLOOR_CLASS]),
                      np.asarray(STRUCTURE_COLORS[WALL_CLASS]))
    openness = np.zeros(len(dirs))

    if scene.objects:
        lo, hi = scene.boxes()
        t1 = (lo[None, :, :] - origin) / dirs[:, None, :]
        t2 = (hi[None, :, :] - origin) / dirs[:, None, :]
        t_near = np.minimum(t1, t2).max(axis=2)
        t_far = np.maximum(t1, t2).min(axis=2)
        hit = (t_near <= t_far) & (t_near > 0)
        t_hit = np.where(hit, t_near, np.inf)
        nearest = np.argmin(t_hit, axis=1)
        t_obj = t_hit[np.arange(len(dirs)), nearest]
        closer = t_obj < depth

        depth = np.where(closer, t_obj, depth)
        idx = nearest[closer]
        class_ids[closer] = np.array([o.class_id for o in scene.objects])[idx]
        instance_ids[closer] = np.array([o.id for o in scene.objects])[idx]
        colors[closer] = np.array([o.color for o in scene.objects])[idx]
        openness[closer] = np.array([o.openness for o in scene.objects])[idx]

    shape = (intr.height, intr.width)
    class_map = class_ids.reshape(shape)
    instance_map = instance_ids.reshape(shape)
    return Observation(
        pose=pose,
        rgb=colors.reshape(shape + (3,)),
        depth=depth.reshape(shape),
        segmentation=ground_truth_frame(class_map, instance_map, NUM_CLASSES),
        class_map=class_map,
        instance_ids=instance_map,
        openness=openness.reshape(shape),
    )


@dataclass(frozen=True)
class Action:
    kind: str
    object_id: Optional[int] = None
    target: Optional[Tuple[float, ...]] = None
    openness: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ACTIONS:
            raise InputError(f"unknown action {self.kind!r}")
        if self.kind in (PICK, OPEN) and not isinstance(self.object_id, (int, np.integer)):
            raise InputError(f"{self.kind} needs an integer object id")
        if self.kind == PLACE:
            if self.target is None or len(self.target) not in (2, 3):
                raise InputError("place needs a 2- or 3-vector target")
            object.__setattr__(self, 'target', tuple(float(v) for v in self.target))
        if self.kind == OPEN and (self.openness is None or not 0.0 <= self.openness <= 1.0):
            raise InputError(f"open needs a target openness in [0, 1], got {self.openness}")

    def to_record(self) -> dict:
        record = {'kind': self.kind}
        if self.object_id is not None:
            record['object_id'] = int(self.object_id)
        if self.target is not None:
            record['target'] = list(self.target)
        if self.openness is not None:
            record['openness'] = float(self.openness)
        return record


@dataclass(frozen=True)
class ActionOutcome:
    success: bool
    reason: str = ''


@dataclass(frozen=True)
class AgentState:
    scene: Scene
    position: Tuple[float, float]
    yaw_index: int = 0
    pitch_index: int = 0
    held: Optional[SceneObject] = None
    steps: int = 0
    done: bool = False
    camera_height: float = HYPERPARAMETERS['camera_height']

    @property
    def yaw(self) -> float:
        return (self.yaw_index % 4) * math.pi / 2.0

    @property
    def heading(self) -> np.ndarray:
        """Unit floor vector the agent faces; zero yaw faces +Y, positive yaw turns left."""
        return np.array([-math.sin(self.yaw), math.cos(self.yaw)])

    def pose(self) -> Pose:
        return Pose(np.array([self.position[0], self.position[1], self.camera_height]),
                    self.yaw, self.pitch_index * PITCH_STEP)


def _disc_collides(point: np.ndarray, radius: float, scene: Scene) -> bool:
    return _clearance(point, scene) < radius


def _horizontal_distance(state: AgentState, point) -> float:
    return float(math.hypot(point[0] - state.position[0], point[1] - state.position[1]))


def step(state: AgentState, action: Action, config: SimulatorConfig) -> Tuple[AgentState, ActionOutcome]:
    """
    Apply one discrete action. Failed actions leave the world unchanged but still cost a step.

    Returns:
        (new state, outcome)
    """
    if not isinstance(action, Action):
        raise InputError(f"expected an Action, got {type(action).__name__}")
    if state.done:
        return state, ActionOutcome(False, 'episode-done')
    after = dataclasses.replace(state, steps=state.steps + 1)

    def fail(reason: str):
        return after, ActionOutcome(False, reason)

    kind = action.kind
    if kind == MOVE_AHEAD:
        target = np.asarray(state.position) + MOVE_STEP * state.heading
        if _disc_collides(target, config.agent_radius, state.scene):
            return fail('collision')
        return dataclasses.replace(after, position=(float(target[0]), float(target[1]))), ActionOutcome(True)
    if kind in (ROTATE_LEFT, ROTATE_RIGHT):
        turn = 1 if kind == ROTATE_LEFT else -1
        return dataclasses.replace(after, yaw_index=(state.yaw_index + turn) % 4), ActionOutcome(True)
    if kind in (LOOK_UP, LOOK_DOWN):
        pitch = state.pitch_index + (1 if kind == LOOK_UP else -1)
        if not PITCH_RANGE[0] <= pitch <= PITCH_RANGE[1]:
            return fail('pitch-limit')
        return dataclasses.replace(after, pitch_index=pitch), ActionOutcome(True)
    if kind == DONE:
        return dataclasses.replace(after, done=True), ActionOutcome(True)

    if kind in (PICK, OPEN):
        obj = state.scene.get(int(action.object_id))
        if obj is None:
            return fail('no-such-object')
        if kind == PICK and state.held is not None:
            return fail('hands-full')
        if kind == PICK and not obj.pickable:
            return fail('not-pickable')
        if kind == OPEN and not obj.openable:
            return fail('not-openable')
        if _horizontal_distance(state, obj.position) > config.interaction_range:
            return fail('out-of-range')
        visible = render_observation(state.scene, state.pose(), config.intrinsics()).visible_ids
        if obj.id not in visible:
            return fail('not-visible')
        if kind == PICK:
            return dataclasses.replace(after, scene=state.scene.without_object(obj.id), held=obj), ActionOutcome(True)
        opened = dataclasses.replace(obj, openness=float(action.openness))
        return dataclasses.replace(after, scene=state.scene.with_object(opened)), ActionOutcome(True)

    # place
    held = state.held
    if held is None:
        return fail('nothing-held')
    target = action.target
    if _horizontal_distance(state, target) > config.interaction_range:
        return fail('out-of-range')
    placed = dataclasses.replace(held, position=(float(target[0]), float(target[1]), held.extent[2] / 2.0))
    lo, hi = placed.bounds()
    if np.any(lo[:2] < 0) or np.any(hi[:2] > state.scene.room_size):
        return fail('outside-room')
    if _overlaps(lo, hi, state.scene.objects, 0.0):
        return fail('collision')
    agent = np.asarray(state.position)
    dx = max(lo[0] - agent[0], 0.0, agent[0] - hi[0])
    dy = max(lo[1] - agent[1], 0.0, agent[1] - hi[1])
    if math.hypot(dx, dy) < config.agent_radius:
        return fail('collision')
    return dataclasses.replace(after, scene=state.scene.with_object(placed), held=None), ActionOutcome(True)


class RearrangeEnv:
    """One phase of an episode: the agent state in a scene plus the action event log."""

    def __init__(self, scene: Scene, config: SimulatorConfig, start_position: Tuple[float, float],
                 start_yaw: int = 0, phase: int = 0):
        self.config = config
        self.intrinsics = config.intrinsics()
        self.phase = phase
        self.state = AgentState(scene, tuple(float(v) for v in start_position), int(start_yaw) % 4, 0,
                                camera_height=config.camera_height)
        self.events: List[dict] = []
        self._observation: Optional[Observation] = None

    @classmethod
    def for_phase(cls, spec: EpisodeSpec, phase: int) -> 'RearrangeEnv':
        scene = spec.goal_scene if phase == 0 else spec.shuffled_scene
        return cls(scene, spec.config, spec.start_position, spec.start_yaw, phase)

    @property
    def steps(self) -> int:
        return self.state.steps

    def observe(self) -> Observation:
        if self._observation is None:
            self._observation = render_observation(self.state.scene, self.state.pose(), self.intrinsics)
        return self._observation

    def step(self, action: Action) -> ActionOutcome:
        self.state, outcome = step(self.state, action, self.config)
        self._observation = None
        self.events.append({'event': 'action', 'phase': self.phase, 'step': self.state.steps,
                            'action': action.to_record(), 'success': outcome.success,
                            'reason': outcome.reason})
        if not outcome.success:
            logger.debug("action %s failed: %s", action.kind, outcome.reason)
        return outcome

    def final_scene(self) -> Scene:
        """Scene at the end of the phase; a still-held object is dropped at the agent's feet."""
        scene = self.state.scene
        held = self.state.held
        if held is not None:
            x, y = self.state.position
            scene = scene.with_object(dataclasses.replace(held, position=(x, y, held.extent[2] / 2.0)))
        return scene


@dataclass
class Metrics:
    fixed_strict: float
    success: float
    num_newly_misplaced: int
    num_initially_misplaced: int
    num_fixed: int = 0
    object_outcomes: List[dict] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            'fixed_strict': self.fixed_strict,
            'success': self.success,
            'num_newly_misplaced': self.num_newly_misplaced,
            'num_initially_misplaced': self.num_initially_misplaced,
            'num_fixed': self.num_fixed,
        }


def is_misplaced(obj: Optional[SceneObject], goal: SceneObject) -> bool:
    if obj is None:
        return True
    distance = np.linalg.norm(np.subtract(obj.position, goal.position))
    return bool(distance > POSITION_TOLERANCE or abs(obj.openness - goal.openness) > OPENNESS_TOLERANCE)


def evaluate_metrics(final_scene: Scene, spec: EpisodeSpec) -> Metrics:
    """
    Score the final scene against the goal scene.

    %Fixed Strict is the share of initially misplaced objects that were fixed, forced to 0
    when any object became newly misplaced. Success requires every object fixed and none
    newly misplaced.
    """
    initially = fixed = newly = 0
    outcomes = []
    for goal in spec.goal_scene.objects:
        start = spec.shuffled_scene.get(goal.id)
        end = final_scene.get(goal.id)
        was = is_misplaced(start, goal)
        now = is_misplaced(end, goal)
        initially += was
        fixed += was and not now
        newly += (not was) and now
        outcomes.append({'id': goal.id, 'class_id': goal.class_id,
                         'initially_misplaced': was, 'misplaced': now})

    if newly:
        fixed_strict = 0.0
    elif initially == 0:
        fixed_strict = 100.0
    else:
        fixed_strict = 100.0 * fixed / initially
    success = 100.0 if fixed == initially and newly == 0 else 0.0
    return Metrics(fixed_strict, success, newly, initially, fixed, outcomes)


def save_scene_records(scene: Scene, phase: str) -> List[dict]:
    records = [{'record': 'room', 'phase': phase, 'room_size': scene.room_size,
                'room_height': scene.room_height}]
    records.extend({'record': 'object', 'phase': phase, **obj.to_record()} for obj in scene.objects)
    return records


def save_episode(spec: EpisodeSpec, path: str) -> None:
    """Write an episode as JSON lines: both scenes object by object, then the shuffle set."""
    records = [{'record': 'episode', 'seed': spec.seed, 'start_position': list(spec.start_position),
                'start_yaw': spec.start_yaw, 'config': dataclasses.asdict(spec.config)}]
    records += save_scene_records(spec.goal_scene, 'walkthrough')
    records += save_scene_records(spec.shuffled_scene, 'unshuffle')
    records += [{'record': 'shuffle', **dataclasses.asdict(entry)} for entry in spec.shuffle_set]
    with open(path, 'w') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + '\n')


def load_episode(path: str) -> EpisodeSpec:
    header = None
    rooms: Dict[str, dict] = {}
    objects: Dict[str, List[SceneObject]] = {'walkthrough': [], 'unshuffle': []}
    shuffles = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                kind = record['record']
                if kind == 'episode':
                    header = record
                elif kind == 'room':
                    rooms[record['phase']] = record
                elif kind == 'object':
                    objects[record['phase']].append(SceneObject.from_record(record))
                elif kind == 'shuffle':
                    shuffles.append(ShuffleEntry(
                        int(record['object_id']), record['kind'],
                        tuple(record['goal_position']), tuple(record['shuffled_position']),
                        float(record['goal_openness']), float(record['shuffled_openness'])))
                else:
                    raise InputError(f"unknown record type {kind!r}")
            except (KeyError, ValueError, TypeError) as e:
                raise InputError(f"{path}:{number}: malformed scene record: {e}") from e
    if header is None or set(rooms) != {'walkthrough', 'unshuffle'}:
        raise InputError(f"{path}: missing episode or room records")

    def scene(phase: str) -> Scene:
        room = rooms[phase]
        return Scene(float(room['room_size']), float(room['room_height']),
                     tuple(sorted(objects[phase], key=lambda o: o.id)))

    return EpisodeSpec(int(header['seed']), SimulatorConfig(**header['config']), scene('walkthrough'),
                       scene('unshuffle'), tuple(shuffles), tuple(header['start_position']),
                       int(header['start_yaw']))
