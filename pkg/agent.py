"""
Agent Module
This module runs one rearrangement episode end to end: semantic-search driven mapping of
the goal scene and the shuffled scene, map diffing, and the pick-and-place resolution of
every disagreement.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Set, Tuple

import numpy as np

from config import (HYPERPARAMETERS, NUM_OBJECT_CLASSES, PICKABLE_CLASSES, InputError, RoomShuffleError,
                    RunConfig)
from diffing import OPENNESS, Disagreement, ObjectInstance, diff_maps, label_instances, solve_assignment
from geometry import GridSpec, observation_to_evidence, pixel_points_world
from perception import DetectorNoise, SegmentationFrame, perceive
from planner import (Cell, NavGraph, UnreachableError, build_nav_graph, cell_center, cell_of_point,
                     cells_within, nearest_reachable_cell, shortest_path)
from search_policy import (UNIFORM, ExpertDistribution, SearchPolicy, sample_goal)
from semantic_map import UNSHUFFLE, WALKTHROUGH, SemanticMap, occupancy_grid, update_map
from simulator import (DONE, LOOK_DOWN, LOOK_UP, MOVE_AHEAD, OPEN, PICK, PLACE, ROTATE_LEFT,
                       ROTATE_RIGHT, Action, ActionOutcome, EpisodeSpec, Metrics, Observation,
                       RearrangeEnv, Scene, evaluate_metrics)

logger = logging.getLogger(__name__)

OBJECT_CLASSES = tuple(range(NUM_OBJECT_CLASSES))

SCAN_PITCH = -1
CLOSE_PITCH = -2
STEEP_VIEW = math.radians(50.0)
ALIGNED_BEARING = math.radians(30.0)
# Unit cell step -> yaw index facing it
YAW_FOR_STEP = {(0, 1): 0, (-1, 0): 1, (0, -1): 2, (1, 0): 3}
MATCH_RADIUS = 0.5


class StepBudgetExhausted(RoomShuffleError):
    """Raised inside a phase when its step budget is used up."""


@dataclass(frozen=True)
class PhaseBudget:
    max_goals: int
    max_steps: int
    step_slack: int = HYPERPARAMETERS['goal_step_slack']

    def __post_init__(self):
        if self.max_goals < 0 or self.max_steps < 1 or self.step_slack < 0:
            raise InputError(f"invalid phase budget {self}")


@dataclass(frozen=True)
class AgentConfig:
    perception: str = 'moderate'
    search: str = UNIFORM
    confidence: float = HYPERPARAMETERS['confidence_threshold']
    epsilon: float = HYPERPARAMETERS['epsilon']
    max_goals: int = HYPERPARAMETERS['max_goals']
    mapping_steps: int = HYPERPARAMETERS['mapping_steps']
    resolution_steps: int = HYPERPARAMETERS['resolution_steps']
    goal_step_slack: int = HYPERPARAMETERS['goal_step_slack']
    resolve_attempts: int = HYPERPARAMETERS['resolve_attempts']
    distance_threshold: float = HYPERPARAMETERS['distance_threshold']
    openness_threshold: float = HYPERPARAMETERS['openness_threshold']
    min_instance_voxels: int = HYPERPARAMETERS['min_instance_voxels']
    agent_height: float = HYPERPARAMETERS['agent_height']
    approach_radius: float = 1.2
    approach_min_radius: float = 0.5
    identify_radius: float = 0.6

    @classmethod
    def from_run_config(cls, run_config: RunConfig) -> 'AgentConfig':
        return cls(perception=run_config.perception, search=run_config.search,
                   confidence=run_config.confidence, epsilon=run_config.epsilon,
                   max_goals=run_config.max_goals, mapping_steps=run_config.mapping_steps,
                   resolution_steps=run_config.resolution_steps)

    @property
    def noise(self) -> DetectorNoise:
        return DetectorNoise.from_preset(self.perception)

    def mapping_budget(self) -> PhaseBudget:
        return PhaseBudget(self.max_goals, self.mapping_steps, self.goal_step_slack)


class Perceiver:
    """Detector, confidence filter and geometry chain folding observations into a map."""

    def __init__(self, grid: GridSpec, noise: DetectorNoise, threshold: float, seed: int):
        self.grid = grid
        self.noise = noise
        self.threshold = threshold
        self.seed = seed
        self.frames = 0

    def integrate(self, semantic_map: SemanticMap, obs: Observation, intrinsics) -> SegmentationFrame:
        frame = perceive(obs.segmentation, self.noise, self.threshold, rng_seed=[self.seed, self.frames])
        self.frames += 1
        attributes = np.concatenate([obs.rgb, obs.openness[..., None]], axis=-1)
        evidence = observation_to_evidence(obs.depth, frame, intrinsics, obs.pose, self.grid,
                                           attributes=attributes)
        update_map(semantic_map, evidence)
        return frame


class PhaseRunner:
    """Acts for the agent inside one phase: every action is followed by a map update."""

    def __init__(self, env: RearrangeEnv, semantic_map: SemanticMap, perceiver: Perceiver,
                 config: AgentConfig, budget: PhaseBudget, rng: np.random.Generator,
                 step_hook: Optional[Callable[[SemanticMap, int], None]] = None,
                 events: Optional[List[dict]] = None):
        self.env = env
        self.map = semantic_map
        self.perceiver = perceiver
        self.config = config
        self.budget = budget
        self.rng = rng
        self.step_hook = step_hook
        self.grid = semantic_map.grid
        self.cell_voxels = HYPERPARAMETERS['nav_cell_voxels']
        top = int(math.ceil((config.agent_height - self.grid.origin[2]) / self.grid.voxel_size))
        self.z_range = (0, min(top, self.grid.dims[2]))
        self.blocked: Set[Cell] = set()
        self.last_frame: Optional[SegmentationFrame] = None
        self.events: List[dict] = events if events is not None else []
        self.touched: List[int] = []

    # Sensing and acting

    def observe(self) -> Observation:
        obs = self.env.observe()
        self.last_frame = self.perceiver.integrate(self.map, obs, self.env.intrinsics)
        if self.step_hook is not None:
            self.step_hook(self.map, self.env.steps)
        return obs

    def act(self, action: Action) -> ActionOutcome:
        if self.env.steps >= self.budget.max_steps:
            raise StepBudgetExhausted(f"step budget {self.budget.max_steps} used up")
        outcome = self.env.step(action)
        self.events.append(self.env.events[-1])
        self.observe()
        return outcome

    @property
    def origin_xy(self) -> Tuple[float, float]:
        return self.grid.origin[0], self.grid.origin[1]

    @property
    def cell(self) -> Cell:
        return cell_of_point(self.env.state.position, self.grid.voxel_size, self.cell_voxels, self.origin_xy)

    def nav_graph(self) -> NavGraph:
        occupied = occupancy_grid(self.map, OBJECT_CLASSES)
        return build_nav_graph(occupied, cell_voxels=self.cell_voxels, z_range=self.z_range,
                               blocked_cells=self.blocked, keep_free=[self.cell])

    def turn_to(self, yaw_index: int) -> None:
        diff = (yaw_index - self.env.state.yaw_index) % 4
        if diff == 3:
            self.act(Action(ROTATE_RIGHT))
        else:
            for _ in range(diff):
                self.act(Action(ROTATE_LEFT))

    def set_pitch(self, pitch_index: int) -> None:
        while self.env.state.pitch_index < pitch_index:
            self.act(Action(LOOK_UP))
        while self.env.state.pitch_index > pitch_index:
            self.act(Action(LOOK_DOWN))

    def scan(self) -> None:
        """Full turn in place at the scanning pitch."""
        self.set_pitch(SCAN_PITCH)
        for _ in range(4):
            self.act(Action(ROTATE_LEFT))

    def face(self, point) -> None:
        """Turn to the cardinal direction closest to a point and tilt so it is in view."""
        x, y = self.env.state.position
        dx, dy = point[0] - x, point[1] - y
        self.turn_to(int(round(math.atan2(-dx, dy) / (math.pi / 2.0))) % 4)
        drop = self.env.state.camera_height - float(point[2])
        self.set_pitch(CLOSE_PITCH if math.atan2(drop, math.hypot(dx, dy)) > STEEP_VIEW else SCAN_PITCH)

    # Navigation

    def _next_cell(self, nav: NavGraph, target: Cell) -> Optional[Cell]:
        """Neighbor one hop closer to target, keeping the current heading when possible."""
        current = self.cell
        hops = nav.distances_from(target)
        if current not in hops:
            return None
        options = sorted(n for n in nav.graph.neighbors(current) if hops.get(n) == hops[current] - 1)
        if not options:
            return None
        heading = self.env.state.heading
        straight = (current[0] + int(round(heading[0])), current[1] + int(round(heading[1])))
        return straight if straight in options else options[0]

    def navigate(self, choose_target: Callable[[NavGraph, Cell], Optional[Cell]]) -> bool:
        """
        Walk to the cell picked by `choose_target`, replanning on the updated map after every move.

        The walk gives up after the initial path length plus the slack in moves.

        Returns:
            True when the target cell was reached
        """
        nav = self.nav_graph()
        target = choose_target(nav, self.cell)
        if target is None:
            return False
        try:
            path = shortest_path(nav, self.cell, target)
        except UnreachableError:
            return False
        cap = len(path) - 1 + self.budget.step_slack
        moves = 0
        while self.cell != target:
            if target not in nav:
                target = choose_target(nav, self.cell)
                if target is None:
                    return False
                if self.cell == target:
                    break
            step_to = self._next_cell(nav, target)
            if step_to is None or moves >= cap:
                return False
            self.turn_to(YAW_FOR_STEP[(step_to[0] - self.cell[0], step_to[1] - self.cell[1])])
            outcome = self.act(Action(MOVE_AHEAD))
            moves += 1
            if not outcome.success:
                self.blocked.add(step_to)
            nav = self.nav_graph()
        return True

    def nearest_cell_to(self, point) -> Callable[[NavGraph, Cell], Optional[Cell]]:
        def choose(nav: NavGraph, start: Cell) -> Optional[Cell]:
            try:
                return nearest_reachable_cell(nav, start, point, self.grid.voxel_size, self.origin_xy)
            except UnreachableError:
                return None
        return choose

    def vantage_cell_near(self, point, exclude: Set[Cell] = frozenset()) -> Callable[[NavGraph, Cell], Optional[Cell]]:
        """Reachable cell within interaction reach of a point, preferring cardinal sight lines."""
        intr = self.env.intrinsics
        half_fov = math.atan2(intr.width / 2.0, intr.focal_length_px)

        def choose(nav: NavGraph, start: Cell) -> Optional[Cell]:
            candidates = cells_within(nav, start, point, self.config.approach_radius,
                                      self.grid.voxel_size, self.origin_xy)
            fallback = None
            for cell in candidates:
                if cell in exclude:
                    continue
                center = cell_center(cell, self.grid.voxel_size, self.cell_voxels, self.origin_xy)
                dx, dy = point[0] - center[0], point[1] - center[1]
                if math.hypot(dx, dy) < self.config.approach_min_radius:
                    continue
                bearing = math.atan2(abs(dx), abs(dy))
                offset = min(bearing, math.pi / 2.0 - bearing)
                if offset <= ALIGNED_BEARING:
                    return cell
                # A point outside the horizontal field of view cannot be identified or picked
                if offset < half_fov:
                    fallback = fallback or cell
            return fallback
        return choose

    def identify(self, class_id: int, point) -> Optional[int]:
        """Handle of the detection of `class_id` in view whose surface points lie nearest to a point."""
        obs = self.env.observe()
        frame = self.last_frame
        if frame is None:
            self.observe()
            frame = self.last_frame
        best = None
        for det in frame.detections:
            if det.class_id != class_id or det.instance_id < 0:
                continue
            points = pixel_points_world(obs.depth, det.mask, self.env.intrinsics, obs.pose)
            if len(points) == 0:
                continue
            distance = float(np.linalg.norm(points.mean(axis=0)[:2] - np.asarray(point)[:2]))
            if distance <= self.config.identify_radius and (best is None or distance < best[0]):
                best = (distance, det.instance_id)
        return None if best is None else int(best[1])


class GoalSource:
    """Emits navigation goals: learned or uniform search, or oracle targets first."""

    def __init__(self, mode, policy: Optional[SearchPolicy] = None, targets: Sequence = ()):
        self.mode = mode
        self.policy = policy
        self.targets = [np.asarray(t, dtype=np.float64) for t in targets]

    def next_goal(self, runner: PhaseRunner, nav: NavGraph) -> np.ndarray:
        if self.targets:
            return self.targets.pop(0)
        source = self.policy if self.policy is not None else UNIFORM
        return sample_goal(source, runner.map, nav, runner.cell, runner.rng)


def run_mapping_phase(runner: PhaseRunner, goals: GoalSource) -> SemanticMap:
    """
    Build the map of the current phase.

    The agent scans in place, then repeatedly takes a goal from the search policy, walks
    to it and scans again, until the goal or step budget runs out.

    Raises:
        BoxedInError: when no navigation cell is reachable
    """
    budget = runner.budget
    runner.observe()
    goals_used = 0
    try:
        runner.scan()
        while goals_used < budget.max_goals and runner.env.steps < budget.max_steps:
            goal = goals.next_goal(runner, runner.nav_graph())
            goals_used += 1
            runner.events.append({'event': 'goal', 'phase': runner.env.phase, 'step': runner.env.steps,
                                  'goal': [float(v) for v in goal]})
            logger.debug("phase %d goal %d at (%.2f, %.2f)", runner.env.phase, goals_used, goal[0], goal[1])
            if runner.navigate(runner.nearest_cell_to(goal)):
                runner.scan()
    except StepBudgetExhausted:
        logger.debug("phase %d mapping budget used up after %d goals", runner.env.phase, goals_used)
    return runner.map


def _resolve_position(runner: PhaseRunner, d: Disagreement) -> Optional[str]:
    attempts = runner.config.resolve_attempts
    tried: Set[Cell] = set()
    picked = None
    for _ in range(attempts):
        if not runner.navigate(runner.vantage_cell_near(d.current_anchor, tried)):
            if not tried:
                return 'unreachable'
            continue
        tried.add(runner.cell)
        runner.face(d.current)
        object_id = runner.identify(d.class_id, d.current)
        if object_id is None:
            continue
        if runner.act(Action(PICK, object_id=object_id)).success:
            picked = object_id
            break
    if picked is None:
        return 'pick-failed'
    runner.touched.append(picked)
    runner.map.clear_voxels(d.current_voxels)

    goal_xy = (float(d.goal_anchor[0]), float(d.goal_anchor[1]))
    tried = set()
    for _ in range(attempts):
        if not runner.navigate(runner.vantage_cell_near(d.goal_anchor, tried)):
            continue
        tried.add(runner.cell)
        runner.face(d.goal_anchor)
        if runner.act(Action(PLACE, target=goal_xy)).success:
            return None

    # Put the object back where it was picked up
    back = (float(d.current_anchor[0]), float(d.current_anchor[1]))
    if runner.navigate(runner.vantage_cell_near(d.current_anchor)):
        runner.act(Action(PLACE, target=back))
    return 'place-failed'


def _resolve_openness(runner: PhaseRunner, d: Disagreement) -> Optional[str]:
    tried: Set[Cell] = set()
    for _ in range(runner.config.resolve_attempts):
        if not runner.navigate(runner.vantage_cell_near(d.current_anchor, tried)):
            if not tried:
                return 'unreachable'
            continue
        tried.add(runner.cell)
        runner.face(d.current)
        object_id = runner.identify(d.class_id, d.current)
        if object_id is None:
            continue
        if runner.act(Action(OPEN, object_id=object_id, openness=float(d.goal_openness))).success:
            runner.touched.append(object_id)
            return None
    return 'open-failed'


def _as_actionable(d: Disagreement, openness_threshold: float) -> Optional[Disagreement]:
    """Furniture never moves: its position disagreements are view noise or an openness change."""
    if d.kind == OPENNESS or d.class_id in PICKABLE_CLASSES:
        return d
    if abs(d.goal_openness - d.current_openness) > openness_threshold:
        return dataclasses.replace(d, kind=OPENNESS)
    return None


def _resolution_order(disagreements: Sequence[Disagreement]) -> List[Disagreement]:
    return sorted(disagreements, key=lambda d: (-d.voxel_count, d.goal_index))


@dataclass
class Resolution:
    final_scene: Scene
    outcomes: List[dict] = field(default_factory=list)
    out_of_time: bool = False
    pending: int = 0


def resolve_disagreements(runner: PhaseRunner, disagreements: Sequence[Disagreement],
                          walkthrough_instances: Sequence[ObjectInstance]) -> Resolution:
    """
    Restore each disagreement, largest instance first, re-diffing after each one.

    A disagreement that cannot be resolved is skipped with a logged reason; the loop stops
    when the step budget is exhausted. Position disagreements on furniture are treated as
    openness changes when the openness differs, and skipped otherwise.
    """
    config = runner.config
    handled = set()
    pending = _resolution_order(disagreements)
    result = Resolution(runner.env.state.scene)
    try:
        while pending:
            d = pending.pop(0)
            handled.add(d.goal_index)
            action = _as_actionable(d, config.openness_threshold)
            if action is None:
                reason = 'not-movable'
            else:
                d = action
                resolve = _resolve_openness if d.kind == OPENNESS else _resolve_position
                reason = resolve(runner, d)
            record = {'event': 'resolution', 'step': runner.env.steps, 'class_id': d.class_id,
                      'kind': d.kind, 'resolved': reason is None, 'reason': reason or ''}
            result.outcomes.append(record)
            runner.events.append(record)
            if reason:
                logger.warning("skipped %s disagreement of class %d: %s", d.kind, d.class_id, reason)
            fresh = diff_maps(walkthrough_instances, runner.map, OBJECT_CLASSES, config.min_instance_voxels,
                              config.distance_threshold, config.openness_threshold).disagreements
            pending = _resolution_order([x for x in fresh if x.goal_index not in handled])
    except StepBudgetExhausted:
        result.out_of_time = True
        result.pending = len(pending) + 1
        logger.info("resolution ran out of steps with %d disagreements pending", result.pending)
    if not runner.env.state.done:
        runner.env.step(Action(DONE))
        runner.events.append(runner.env.events[-1])
    result.final_scene = runner.env.final_scene()
    return result


@dataclass
class EpisodeResult:
    seed: int
    metrics: Metrics
    summary: dict
    events: List[dict]

    def to_record(self) -> dict:
        return {'seed': self.seed, **self.metrics.to_record(), **self.summary}


def _score_predictions(disagreements: Sequence[Disagreement], spec: EpisodeSpec) -> Tuple[List[dict], List[dict]]:
    """
    Label predicted disagreements against the true shuffle set.

    Predictions and shuffled objects are paired one-to-one by minimum total distance; a
    pair counts when the classes agree and the prediction lies within MATCH_RADIUS.
    """
    truth = []
    for entry in spec.shuffle_set:
        obj = spec.goal_scene.get(entry.object_id)
        truth.append((entry, obj.class_id, np.asarray(entry.shuffled_position[:2])))
    hits = [False] * len(disagreements)
    found = set()
    if disagreements and truth:
        far = 1e6
        cost = np.full((len(disagreements), len(truth)), far)
        for p, d in enumerate(disagreements):
            for t, (_, class_id, where) in enumerate(truth):
                distance = float(np.linalg.norm(np.asarray(d.current[:2]) - where))
                if class_id == d.class_id and distance <= MATCH_RADIUS:
                    cost[p, t] = distance
        for p, t in solve_assignment(cost).pairs:
            if cost[p, t] < far:
                hits[p] = True
                found.add(truth[t][0].object_id)
    predicted = [{'class_id': int(d.class_id), 'kind': d.kind, 'tp': hit} for d, hit in zip(disagreements, hits)]
    ground_truth = [{'class_id': int(class_id), 'object_id': entry.object_id, 'kind': entry.kind,
                     'detected': entry.object_id in found} for entry, class_id, _ in truth]
    return predicted, ground_truth


def failure_indicator_rows(spec: EpisodeSpec, metrics: Metrics) -> List[dict]:
    """Per initially misplaced object: size, shuffle displacement, nearest same-class distance, fixed."""
    entries = {entry.object_id: entry for entry in spec.shuffle_set}
    rows = []
    for outcome in metrics.object_outcomes:
        if not outcome['initially_misplaced']:
            continue
        obj = spec.goal_scene.get(outcome['id'])
        entry = entries.get(obj.id)
        same = [np.linalg.norm(np.subtract(o.position, obj.position))
                for o in spec.goal_scene.objects if o.class_id == obj.class_id and o.id != obj.id]
        rows.append({
            'object_id': obj.id,
            'class_id': obj.class_id,
            'size': obj.volume,
            'displacement': entry.displacement if entry is not None else 0.0,
            'nearest_same_class': float(min(same)) if same else None,
            'fixed': not outcome['misplaced'],
        })
    return rows


def _map_stats(semantic_map: SemanticMap, instances: Sequence[ObjectInstance]) -> dict:
    return {'occupied_voxels': int(len(semantic_map.nonzero_indices())), 'instances': len(instances)}


def oracle_targets(spec: EpisodeSpec, phase: int) -> List[Tuple[float, float, float]]:
    """
    Oracle search goals: every shuffled object's location in this phase's scene, then its
    location in the other scene, so both phases view the same places when the goal
    budget allows.
    """
    goal = [entry.goal_position for entry in spec.shuffle_set]
    shuffled = [entry.shuffled_position for entry in spec.shuffle_set if entry.displacement > 0]
    return goal + shuffled if phase == WALKTHROUGH else shuffled + goal


def run_episode(spec: EpisodeSpec, config: AgentConfig, policy: Optional[SearchPolicy] = None) -> EpisodeResult:
    """
    Map the goal scene, map the shuffled scene, diff the maps, resolve and score.

    Errors raised inside the phases are logged and recorded in the event log; the episode
    is scored on whatever state the scene was left in.
    """
    grid = spec.config.grid()
    noise = config.noise
    if config.search == 'trained' and policy is None:
        raise InputError("trained search needs a policy")
    search_policy = policy if config.search == 'trained' else None

    events: List[dict] = [{'event': 'episode', 'seed': spec.seed, 'perception': config.perception,
                           'search': config.search}]
    predicted_disagreements: List[Disagreement] = []
    resolution = None
    error = None
    env = None
    runners: List[PhaseRunner] = []
    touched: List[int] = []
    try:
        maps = {}
        instances0: List[ObjectInstance] = []
        for phase in (WALKTHROUGH, UNSHUFFLE):
            env = RearrangeEnv.for_phase(spec, phase)
            semantic_map = SemanticMap.empty(grid, config.epsilon, phase)
            perceiver = Perceiver(grid, noise, config.confidence, spec.seed)
            # Both phases share one random stream so identical scenes give identical maps
            rng = np.random.default_rng([spec.seed, 1])
            runner = PhaseRunner(env, semantic_map, perceiver, config, config.mapping_budget(), rng,
                                 events=events)
            runners.append(runner)
            targets = oracle_targets(spec, phase) if config.search == 'gt' else []
            events.append({'event': 'phase', 'phase': phase, 'step': env.steps})
            run_mapping_phase(runner, GoalSource(config.search, search_policy, targets))
            if phase == WALKTHROUGH:
                semantic_map.freeze()
                instances0 = label_instances(semantic_map, OBJECT_CLASSES, config.min_instance_voxels)
                stats = _map_stats(semantic_map, instances0)
            else:
                stats = _map_stats(semantic_map, label_instances(semantic_map, OBJECT_CLASSES,
                                                                 config.min_instance_voxels))
            maps[phase] = semantic_map
            events.append({'event': 'map', 'phase': phase, 'step': env.steps, **stats})
            logger.info("episode %d phase %d mapped in %d steps: %s", spec.seed, phase, env.steps, stats)

        diff = diff_maps(instances0, maps[UNSHUFFLE], OBJECT_CLASSES, config.min_instance_voxels,
                         config.distance_threshold, config.openness_threshold)
        predicted_disagreements = list(diff.disagreements)
        events.append({'event': 'disagreements', 'items': [d.to_record() for d in predicted_disagreements],
                       'unmatched_walkthrough': len(diff.unmatched_walkthrough),
                       'unmatched_unshuffle': len(diff.unmatched_unshuffle)})

        mapping_runner = runners[-1]
        budget = PhaseBudget(config.max_goals, env.steps + config.resolution_steps, config.goal_step_slack)
        resolver = PhaseRunner(env, maps[UNSHUFFLE], mapping_runner.perceiver, config, budget,
                               mapping_runner.rng, events=events)
        resolver.blocked = set(mapping_runner.blocked)
        runners.append(resolver)
        resolution = resolve_disagreements(resolver, predicted_disagreements, instances0)
        final_scene = resolution.final_scene
    except RoomShuffleError as e:
        error = f"{type(e).__name__}: {e}"
        logger.warning("episode %d failed: %s", spec.seed, error)
        events.append({'event': 'error', 'message': error})
        final_scene = env.final_scene() if env is not None and env.phase == UNSHUFFLE else spec.shuffled_scene

    for runner in runners:
        touched.extend(runner.touched)

    metrics = evaluate_metrics(final_scene, spec)
    predicted, ground_truth = _score_predictions(predicted_disagreements, spec)
    shuffled = set(spec.shuffled_ids)
    summary = {
        'predicted': predicted,
        'ground_truth': ground_truth,
        'touched': sorted(set(touched)),
        'wrong_objects': sorted(set(touched) - shuffled),
        'out_of_time': bool(resolution.out_of_time) if resolution is not None else False,
        'indicators': failure_indicator_rows(spec, metrics),
        'error': error,
    }
    events.append({'event': 'metrics', **metrics.to_record()})
    return EpisodeResult(spec.seed, metrics, summary, events)


def collect_snapshots(spec: EpisodeSpec, config: AgentConfig, every: int,
                      sink: Callable[[SemanticMap, ExpertDistribution], None],
                      sigma: float = None) -> int:
    """
    Explore the shuffled scene with uniform search and hand map snapshots to `sink` every
    `every` steps, each paired with the expert centered on the shuffled objects.

    Returns:
        Number of snapshots taken
    """
    if every < 1:
        raise InputError(f"snapshot interval must be positive, got {every}")
    sigma = HYPERPARAMETERS['expert_sigma'] if sigma is None else sigma
    modes = [spec.shuffled_scene.get(i).position for i in spec.shuffled_ids]
    if not modes:
        return 0
    expert = ExpertDistribution(np.array(modes), sigma)
    taken = {'count': 0, 'last': -1}

    def hook(semantic_map: SemanticMap, steps: int) -> None:
        if steps > 0 and steps % every == 0 and steps != taken['last']:
            taken['last'] = steps
            taken['count'] += 1
            sink(semantic_map.copy(), expert)

    grid = spec.config.grid()
    env = RearrangeEnv.for_phase(spec, UNSHUFFLE)
    semantic_map = SemanticMap.empty(grid, config.epsilon, UNSHUFFLE)
    perceiver = Perceiver(grid, config.noise, config.confidence, spec.seed)
    runner = PhaseRunner(env, semantic_map, perceiver, config, config.mapping_budget(),
                         np.random.default_rng([spec.seed, 2]), step_hook=hook)
    try:
        run_mapping_phase(runner, GoalSource(UNIFORM))
    except RoomShuffleError as e:
        logger.warning("snapshot collection for episode %d stopped: %s", spec.seed, e)
    return taken['count']
