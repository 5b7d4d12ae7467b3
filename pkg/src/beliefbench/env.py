"""Deterministic 2D tabletop pick-and-place POMDP with occlusion.

The workspace is the unit square.  A point gripper moves by bounded position
deltas and can grasp the nearest visible free object within a small radius.
Objects released over the goal region are marked *placed* and immediately
vanish from the rendered view.  In the aliased task variants a duplicate of
the first target starts occluded (buried in the clutter margin) and is
revealed when the first placement frees a slot.  The combination is the
partial-observability mechanism under test: after the first placement an
aliased scene shows exactly one object of each required appearance — the
same image an untouched plain episode starts from — so the current frame no
longer determines how far the task has progressed, and only interaction
history can.

State transitions are pure functions of (state, action); all sampling happens
in :func:`reset` and is fully determined by (task, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

# palette index 0.. matches ObjectState.color_id; background stays black
COLOR_PALETTE = np.array(
    [
        [220, 50, 47],    # red
        [64, 190, 70],    # green
        [56, 100, 230],   # blue
        [228, 200, 44],   # yellow
        [200, 62, 200],   # magenta
        [62, 200, 204],   # cyan
    ],
    dtype=np.uint8,
)
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan")
GRIPPER_COLOR = np.array([255, 255, 255], dtype=np.uint8)
GOAL_COLOR = np.array([110, 110, 110], dtype=np.uint8)
# half side length in pixels per shape id
SHAPE_HALF_EXTENT = (1, 2)

DELTA_MAX = 0.05
GRASP_RADIUS = 0.05
GOAL_RADIUS = 0.07
MIN_SEPARATION = 0.1
EXPERT_NOISE = 0.005
GRIPPER_START = (0.5, 0.5)
PROPRIO_DIM = 6
ACTION_DIM = 3


class TaskError(ValueError):
    """Invalid task specification or unsatisfiable reset configuration."""


@dataclass(frozen=True)
class TaskSpec:
    family: str                      # "pick_place" | "stack"
    targets: tuple[int, ...]         # object indices, placed in this order
    goal_pos: tuple[float, float]    # bin center (pick_place) or stack base
    horizon: int
    name: str = ""
    aliased: bool = False
    n_objects: int = 2               # objects instantiated at reset

    def __post_init__(self) -> None:
        if self.family not in ("pick_place", "stack"):
            raise TaskError(f"unknown family {self.family!r}")
        if not self.targets:
            raise TaskError("targets must be non-empty")
        if len(set(self.targets)) != len(self.targets):
            raise TaskError("duplicate target indices")
        if any(i < 0 or i >= self.n_objects for i in self.targets):
            raise TaskError("target index out of range")
        if self.horizon < 1:
            raise TaskError("horizon must be positive")


@dataclass(frozen=True)
class ObjectState:
    pos: tuple[float, float]
    color_id: int
    shape_id: int
    placed: bool = False
    occluded: bool = False


@dataclass(frozen=True)
class WorldState:
    gripper_pos: tuple[float, float]
    gripper_vel: tuple[float, float]
    grip_closed: bool
    held_object: int | None
    objects: tuple[ObjectState, ...]
    step_count: int
    task: TaskSpec
    placed_sequence: tuple[int, ...] = ()

    def signature(self, idx: int) -> tuple[int, int]:
        obj = self.objects[idx]
        return (obj.color_id, obj.shape_id)

    def target_signatures(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.signature(i) for i in self.task.targets)

    def placed_signatures(self) -> tuple[tuple[int, int], ...]:
        return tuple(self.signature(i) for i in self.placed_sequence)

    @property
    def success(self) -> bool:
        return self.placed_signatures() == self.target_signatures()

    @property
    def progress_valid(self) -> bool:
        """Placed sequence is still a prefix of the required signatures."""
        placed = self.placed_signatures()
        return placed == self.target_signatures()[: len(placed)]

    @property
    def terminal(self) -> bool:
        return self.success or not self.progress_valid or self.step_count >= self.task.horizon


@dataclass(frozen=True)
class Observation:
    image: np.ndarray    # (H, W, 3) uint8
    proprio: np.ndarray  # (6,) float32: x, y, vx, vy, grip, holding


@dataclass(frozen=True)
class Action:
    delta: tuple[float, float]
    grip_cmd: float

    def as_array(self) -> np.ndarray:
        return np.array([self.delta[0], self.delta[1], self.grip_cmd], dtype=np.float32)

    @staticmethod
    def from_array(arr: np.ndarray) -> "Action":
        return Action(delta=(float(arr[0]), float(arr[1])), grip_cmd=float(arr[2]))


TASK_NAMES = ("pp1", "ppN", "stack1", "stackN")


def make_task(name: str, aliased: bool = False, horizon: int | None = None) -> TaskSpec:
    """Build a task template; object appearance is sampled later, at reset.

    Layouts (index order): targets first, then the stack base if any, then
    distractors, then the duplicate appended by aliased variants.
    """
    if name == "pp1":
        spec = TaskSpec("pick_place", (0,), (0.82, 0.82), horizon or 150, name, aliased, 2)
    elif name == "ppN":
        spec = TaskSpec("pick_place", (0, 1), (0.82, 0.82), horizon or 200, name, aliased, 2)
    elif name == "stack1":
        spec = TaskSpec("stack", (0,), (0.5, 0.5), horizon or 150, name, aliased, 2)
    elif name == "stackN":
        spec = TaskSpec("stack", (0, 1), (0.5, 0.5), horizon or 200, name, aliased, 3)
    else:
        raise TaskError(f"unknown task {name!r}; expected one of {TASK_NAMES}")
    if aliased:
        spec = replace(spec, n_objects=spec.n_objects + 1)
    return spec


def stack_base_index(task: TaskSpec) -> int | None:
    if task.family != "stack":
        return None
    return len(task.targets)


def reset(
    task: TaskSpec,
    seed: int,
    n_colors: int = 4,
    n_shapes: int = 2,
    min_separation: float = MIN_SEPARATION,
) -> tuple[WorldState, Observation]:
    """Sample the initial episode state; deterministic in (task, seed).

    Colors for the distinct roles are drawn without replacement so targets
    are discriminable; the aliased duplicate copies target 0's appearance
    exactly and starts occluded, so plain and aliased episodes are
    indistinguishable until the first placement reveals it.  Positions are
    rejection-sampled with a minimum pairwise separation and kept clear of
    the goal region and workspace margin.
    """
    if n_colors < 2 or n_colors > len(COLOR_PALETTE):
        raise TaskError(f"n_colors must lie in [2, {len(COLOR_PALETTE)}]")
    rng = np.random.default_rng(seed)
    n = task.n_objects
    n_roles = n - 1 if task.aliased else n
    if n_roles > n_colors:
        raise TaskError(f"task needs {n_roles} distinct colors, palette has {n_colors}")

    colors = rng.choice(n_colors, size=n_roles, replace=False)
    shapes = rng.integers(0, n_shapes, size=n_roles)
    appearance = [(int(colors[i]), int(shapes[i])) for i in range(n_roles)]
    if task.aliased:
        appearance.append(appearance[0])  # duplicate of target 0

    base_idx = stack_base_index(task)
    positions = _sample_positions(rng, n, task.goal_pos if base_idx is None else None, min_separation)
    goal_pos = task.goal_pos if base_idx is None else positions[base_idx]
    concrete = replace(task, goal_pos=(float(goal_pos[0]), float(goal_pos[1])))

    duplicate_idx = n - 1 if task.aliased else None
    objects = tuple(
        ObjectState(
            pos=(float(positions[i][0]), float(positions[i][1])),
            color_id=appearance[i][0],
            shape_id=appearance[i][1],
            occluded=(i == duplicate_idx),
        )
        for i in range(n)
    )
    state = WorldState(
        gripper_pos=GRIPPER_START,
        gripper_vel=(0.0, 0.0),
        grip_closed=False,
        held_object=None,
        objects=objects,
        step_count=0,
        task=concrete,
    )
    return state, render(state)


def _sample_positions(
    rng: np.random.Generator,
    n: int,
    goal_pos: tuple[float, float] | None,
    min_separation: float,
    margin: float = 0.08,
    max_attempts: int = 1000,
) -> list[np.ndarray]:
    positions: list[np.ndarray] = []
    for _ in range(n):
        for attempt in range(max_attempts):
            cand = rng.uniform(margin, 1.0 - margin, size=2)
            if goal_pos is not None and np.linalg.norm(cand - np.asarray(goal_pos)) < 0.12:
                continue
            if np.linalg.norm(cand - np.asarray(GRIPPER_START)) < 0.06:
                continue
            if all(np.linalg.norm(cand - p) >= min_separation for p in positions):
                positions.append(cand)
                break
        else:
            raise TaskError(f"could not place {n} objects after {max_attempts} attempts")
    return positions


def step(state: WorldState, action: Action) -> tuple[WorldState, Observation, bool]:
    """Apply one bounded control step; invalid actions are clipped, not rejected."""
    delta = np.clip(np.asarray(action.delta, dtype=np.float64), -DELTA_MAX, DELTA_MAX)
    old = np.asarray(state.gripper_pos, dtype=np.float64)
    new = np.clip(old + delta, 0.0, 1.0)
    vel = new - old
    want_grip = float(action.grip_cmd) > 0.5

    objects = list(state.objects)
    held = state.held_object
    placed_sequence = state.placed_sequence

    if held is not None:
        objects[held] = replace(objects[held], pos=(float(new[0]), float(new[1])))

    if want_grip and held is None:
        best, best_dist = None, GRASP_RADIUS
        for i, obj in enumerate(objects):
            if obj.placed or obj.occluded:
                continue
            d = float(np.hypot(obj.pos[0] - new[0], obj.pos[1] - new[1]))
            if d <= best_dist:
                best, best_dist = i, d
        if best is not None:
            held = best
            objects[held] = replace(objects[held], pos=(float(new[0]), float(new[1])))

    if not want_grip and held is not None:
        goal = np.asarray(state.task.goal_pos)
        if float(np.linalg.norm(new - goal)) <= GOAL_RADIUS:
            objects[held] = replace(objects[held], placed=True, occluded=True)
            placed_sequence = placed_sequence + (held,)
            # a placement frees a clutter slot: buried objects surface
            objects = [
                replace(o, occluded=False) if o.occluded and not o.placed else o
                for o in objects
            ]
        held = None

    new_state = WorldState(
        gripper_pos=(float(new[0]), float(new[1])),
        gripper_vel=(float(vel[0]), float(vel[1])),
        grip_closed=want_grip,
        held_object=held,
        objects=tuple(objects),
        step_count=state.step_count + 1,
        task=state.task,
        placed_sequence=placed_sequence,
    )
    return new_state, render(new_state), new_state.terminal


def _px(coord: float, size: int) -> int:
    return int(round(float(coord) * (size - 1)))


def _draw_square(img: np.ndarray, pos: tuple[float, float], half: int, color: np.ndarray) -> None:
    size = img.shape[0]
    r, c = _px(pos[1], size), _px(pos[0], size)
    img[max(0, r - half) : min(size, r + half + 1), max(0, c - half) : min(size, c + half + 1)] = color


def render(
    state: WorldState,
    image_size: int = 32,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
    aug_brightness: float = 0.1,
    aug_noise: float = 0.02,
    aug_crop: int = 2,
) -> Observation:
    """Draw the current scene; placed objects contribute zero pixels.

    Draw order is goal region, objects, gripper cross, so the gripper stays
    visible while carrying.  Augmentation (brightness jitter, additive
    Gaussian noise, small crop shift) runs only in train mode and consumes
    the supplied rng, keeping eval renders bit-reproducible.
    """
    img = np.zeros((image_size, image_size, 3), dtype=np.uint8)
    goal_half = max(1, int(round(GOAL_RADIUS * (image_size - 1))))
    _draw_square(img, state.task.goal_pos, goal_half, GOAL_COLOR)

    for obj in state.objects:
        if obj.occluded:
            continue
        _draw_square(img, obj.pos, SHAPE_HALF_EXTENT[obj.shape_id], COLOR_PALETTE[obj.color_id])

    r, c = _px(state.gripper_pos[1], image_size), _px(state.gripper_pos[0], image_size)
    arm = 2
    img[max(0, r - arm) : min(image_size, r + arm + 1), c] = GRIPPER_COLOR
    img[r, max(0, c - arm) : min(image_size, c + arm + 1)] = GRIPPER_COLOR

    if train_mode:
        if rng is None:
            raise ValueError("train-mode render needs an rng")
        img = augment_image(img, rng, aug_brightness, aug_noise, aug_crop)

    proprio = np.array(
        [
            state.gripper_pos[0],
            state.gripper_pos[1],
            state.gripper_vel[0],
            state.gripper_vel[1],
            1.0 if state.grip_closed else 0.0,
            1.0 if state.held_object is not None else 0.0,
        ],
        dtype=np.float32,
    )
    return Observation(image=img, proprio=proprio)


def augment_image(img: np.ndarray, rng: np.random.Generator, brightness: float = 0.1, noise: float = 0.02, crop: int = 2) -> np.ndarray:
    """Brightness jitter, additive Gaussian noise, and a small wrap shift."""
    out = img.astype(np.float64)
    out = out * (1.0 + rng.uniform(-brightness, brightness))
    out = out + rng.normal(0.0, noise * 255.0, size=out.shape)
    if crop > 0:
        dy, dx = rng.integers(-crop, crop + 1, size=2)
        out = np.roll(out, (int(dy), int(dx)), axis=(0, 1))
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def expert_action(state: WorldState, rng: np.random.Generator | None = None, noise: float = EXPERT_NOISE) -> Action:
    """Privileged proportional controller toward the next required object.

    Matching duplicates are interchangeable: the expert heads for the nearest
    visible unplaced object with the next target's (color, shape) signature,
    so its behavior is a function of what is visible plus true task phase.
    """
    gripper = np.asarray(state.gripper_pos)
    if state.held_object is not None:
        goal = np.asarray(state.task.goal_pos)
        dist = float(np.linalg.norm(goal - gripper))
        grip = 0.0 if dist <= 0.8 * GOAL_RADIUS else 1.0
        target = goal
    else:
        k = len(state.placed_sequence)
        sigs = state.target_signatures()
        if k >= len(sigs):
            return Action((0.0, 0.0), 0.0)
        want = sigs[k]
        candidates = [
            (float(np.linalg.norm(np.asarray(o.pos) - gripper)), i)
            for i, o in enumerate(state.objects)
            if not o.placed and not o.occluded and (o.color_id, o.shape_id) == want
        ]
        if not candidates:
            return Action((0.0, 0.0), 0.0)
        dist, idx = min(candidates)
        target = np.asarray(state.objects[idx].pos)
        grip = 1.0 if dist <= 0.8 * GRASP_RADIUS else 0.0

    delta = np.clip(target - gripper, -DELTA_MAX, DELTA_MAX)
    if rng is not None and noise > 0:
        delta = np.clip(delta + rng.normal(0.0, noise, size=2), -DELTA_MAX, DELTA_MAX)
    return Action((float(delta[0]), float(delta[1])), float(grip))


def gt_summary(state: WorldState) -> np.ndarray:
    """Analysis-only ground-truth vector; never fed to any learned component."""
    head = [
        state.gripper_pos[0],
        state.gripper_pos[1],
        state.gripper_vel[0],
        state.gripper_vel[1],
        1.0 if state.grip_closed else 0.0,
        -1.0 if state.held_object is None else float(state.held_object),
        float(len(state.placed_sequence)),
        1.0 if state.progress_valid else 0.0,
    ]
    body: list[float] = []
    for obj in state.objects:
        body.extend(
            [obj.pos[0], obj.pos[1], 1.0 if obj.placed else 0.0, 1.0 if obj.occluded else 0.0,
             float(obj.color_id), float(obj.shape_id)]
        )
    return np.array(head + body, dtype=np.float32)


def check_invariants(state: WorldState) -> None:
    """Raise AssertionError if a structural invariant is violated."""
    assert 0.0 <= state.gripper_pos[0] <= 1.0 and 0.0 <= state.gripper_pos[1] <= 1.0
    assert state.step_count <= state.task.horizon
    held = [i for i, o in enumerate(state.objects) if i == state.held_object]
    assert len(held) <= 1
    for i, obj in enumerate(state.objects):
        if obj.placed:
            assert obj.occluded, "placed object must be occluded"
            assert state.held_object != i, "placed object cannot be held"
