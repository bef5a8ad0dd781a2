"""Top-down tabletop world with a height channel.

The table is the unit square. The end effector has a pose
``(x, y, z, gripper)`` with every component in [0, 1]; objects sit on the
table (z = 0) unless held. Frames are 32x32 flat-shaded renders from a fixed
overhead camera, plus a matching normalized height map.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "V_MAX",
    "GRASP_RADIUS",
    "RES",
    "FAMILIES",
    "COLORS",
    "INSTRUCTIONS",
    "instruction_id",
    "Obj",
    "TaskSpec",
    "EnvState",
    "PlacementError",
    "UnreachableError",
    "make_task",
    "reset",
    "step",
    "render_rgb",
    "render_depth",
    "expert_action",
    "check_success",
]

V_MAX = 0.08
GRASP_RADIUS = 0.03
GRASP_HEIGHT = 0.1
PUSH_RADIUS = 0.05
HOVER_Z = 0.3
LIFT_Z = 0.6
START_Z = 0.5
RES = 32
SPAWN_LO, SPAWN_HI = 0.15, 0.85
MIN_SEP = 0.12

FAMILIES = ("reach", "push", "pick", "place", "press-button", "open-drawer")
COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.1),
}
BACKGROUND = (0.55, 0.5, 0.45)
GOAL_COLOR = (1.0, 1.0, 1.0)
BUTTON_COLOR = (0.9, 0.4, 0.8)
DRAWER_COLOR = (0.45, 0.25, 0.1)
GRIPPER_OPEN = (0.2, 0.2, 0.2)
GRIPPER_CLOSED = (0.0, 0.0, 0.0)

OBJ_HEIGHT = {"block": 0.1, "button": 0.05, "drawer": 0.15}


def _build_vocab() -> list[str]:
    vocab = []
    for color in COLORS:
        vocab.append(f"reach the {color} block")
    for color in COLORS:
        vocab.append(f"pick {color} block")
    for color in COLORS:
        vocab.append(f"place the {color} block on the goal")
    for color in COLORS:
        vocab.append(f"push the {color} block to the goal")
    vocab.append("press the button")
    vocab.append("open the drawer")
    return vocab


INSTRUCTIONS: list[str] = _build_vocab()


def instruction_id(text: str) -> int:
    return INSTRUCTIONS.index(text)


class PlacementError(RuntimeError):
    """Could not place objects without overlap."""


class UnreachableError(RuntimeError):
    """The expert has no way to make progress from this state."""


@dataclass
class Obj:
    shape: str  # block | button | drawer
    color: str
    pos: np.ndarray  # (x, y, z)
    held: bool = False


@dataclass(frozen=True)
class TaskSpec:
    family: str
    color: str = "red"
    tol: float = 0.05

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown task family {self.family!r}")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        instruction_id(self.instruction)

    @property
    def instruction(self) -> str:
        f, c = self.family, self.color
        if f == "reach":
            return f"reach the {c} block"
        if f == "pick":
            return f"pick {c} block"
        if f == "place":
            return f"place the {c} block on the goal"
        if f == "push":
            return f"push the {c} block to the goal"
        if f == "press-button":
            return "press the button"
        return "open the drawer"

    @property
    def instr_id(self) -> int:
        return instruction_id(self.instruction)


def make_task(family: str, color: str = "red") -> TaskSpec:
    tol = {"reach": 0.05, "push": 0.07, "place": 0.06}.get(family, 0.05)
    return TaskSpec(family, color, tol)


@dataclass
class EnvState:
    pose: np.ndarray  # (x, y, z, gripper)
    objects: list[Obj]
    task: TaskSpec
    target: int  # index into objects
    goal: np.ndarray | None = None  # (x, y) for push / place
    pressed: bool = False
    drawer_y0: float = 0.0
    steps: int = 0
    seed: int = 0
    info: dict = field(default_factory=dict)

    def copy(self) -> "EnvState":
        return copy.deepcopy(self)

    @property
    def held(self) -> int | None:
        for i, o in enumerate(self.objects):
            if o.held:
                return i
        return None

    @property
    def target_obj(self) -> Obj:
        return self.objects[self.target]


# ---------------------------------------------------------------------------
# reset


def reset(seed: int, task: TaskSpec, n_distractors: int = 1, max_tries: int = 1000) -> EnvState:
    if n_distractors < 0:
        raise ValueError("n_distractors must be >= 0")
    rng = np.random.default_rng(seed)
    n_points = 1 + n_distractors + (1 if task.family in ("push", "place") else 0)

    for _ in range(max_tries):
        pts = rng.uniform(SPAWN_LO, SPAWN_HI, size=(n_points, 2))
        if task.family == "open-drawer":
            pts[0, 1] = rng.uniform(SPAWN_LO, 0.55)
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(n_points)
        if d.min() < MIN_SEP:
            continue
        if task.family == "push" and np.linalg.norm(pts[0] - pts[-1]) < 0.25:
            continue
        start = np.array([*rng.uniform(0.1, 0.9, size=2), START_Z, 0.0])
        if np.linalg.norm(start[:2] - pts[0]) < 0.2:
            continue
        break
    else:
        raise PlacementError(f"no legal layout after {max_tries} tries (seed={seed})")

    if task.family == "press-button":
        target = Obj("button", "pink", np.array([*pts[0], 0.0]))
    elif task.family == "open-drawer":
        target = Obj("drawer", "brown", np.array([*pts[0], 0.0]))
    else:
        target = Obj("block", task.color, np.array([*pts[0], 0.0]))
    others = [c for c in COLORS if c != task.color]
    objects = [target]
    for j in range(n_distractors):
        color = others[int(rng.integers(len(others)))]
        objects.append(Obj("block", color, np.array([*pts[1 + j], 0.0])))
    goal = pts[-1].copy() if task.family in ("push", "place") else None
    return EnvState(
        pose=start,
        objects=objects,
        task=task,
        target=0,
        goal=goal,
        drawer_y0=float(pts[0, 1]),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# dynamics


def step(state: EnvState, pose_target) -> EnvState:
    """Move toward ``pose_target`` by at most ``V_MAX``; apply grasp / push rules."""
    s = state.copy()
    tgt = np.clip(np.asarray(pose_target, dtype=np.float64), 0.0, 1.0)
    if not np.all(np.isfinite(tgt)):
        tgt = s.pose.copy()
    delta = tgt[:3] - s.pose[:3]
    dist = float(np.linalg.norm(delta))
    if dist > V_MAX:
        delta = delta * (V_MAX / dist)
    new_xyz = np.clip(s.pose[:3] + delta, 0.0, 1.0)
    move_xy = new_xyz[:2] - s.pose[:2]

    want_closed = tgt[3] >= 0.5
    held = s.held
    if held is not None and s.objects[held].shape == "drawer":
        # a grasped drawer slides along y only
        new_xyz[0] = s.objects[held].pos[0]
    s.pose[:3] = new_xyz

    if want_closed and held is None and s.pose[3] < 0.5:
        for i, o in enumerate(s.objects):
            if o.shape == "button":
                continue
            if np.linalg.norm(o.pos[:2] - s.pose[:2]) <= GRASP_RADIUS and s.pose[2] <= GRASP_HEIGHT:
                o.held = True
                break
    elif not want_closed and held is not None:
        o = s.objects[held]
        o.held = False
        o.pos[2] = 0.0
    s.pose[3] = 1.0 if want_closed else 0.0

    held = s.held
    if held is not None:
        o = s.objects[held]
        if o.shape == "drawer":
            o.pos[1] = float(np.clip(s.pose[1], 0.0, 1.0))
        else:
            o.pos[:] = s.pose[:3]

    # a low gripper sweeps loose blocks ahead of it; blocks already under the
    # fingers (within grasp radius) are left alone
    n_move = float(np.linalg.norm(move_xy))
    if s.pose[2] <= GRASP_HEIGHT and n_move > 0:
        n_sub = max(1, math.ceil(n_move / 0.01))
        start = s.pose[:2] - move_xy
        for j in range(1, n_sub + 1):
            at = start + move_xy * (j / n_sub)
            for o in s.objects:
                if o.held or o.shape != "block":
                    continue
                off = o.pos[:2] - at
                r = float(np.linalg.norm(off))
                if GRASP_RADIUS < r < PUSH_RADIUS:
                    o.pos[:2] = np.clip(at + off / r * PUSH_RADIUS, 0.0, 1.0)

    for o in s.objects:
        if o.shape == "button" and np.linalg.norm(o.pos[:2] - s.pose[:2]) <= GRASP_RADIUS and s.pose[2] <= 0.05:
            s.pressed = True
    s.steps += 1
    return s


# ---------------------------------------------------------------------------
# rendering


def _cell(v: float) -> int:
    return min(RES - 1, max(0, int(math.floor(v * RES))))


def _footprint(o: Obj) -> list[tuple[int, int]]:
    cx, cy = _cell(o.pos[0]), _cell(o.pos[1])
    if o.shape == "drawer":
        cells = [(cx + dx, cy + dy) for dx in range(-2, 3) for dy in range(-1, 2)]
    elif o.shape == "button":
        cells = [(cx, cy), (cx - 1, cy), (cx + 1, cy), (cx, cy - 1), (cx, cy + 1)]
    else:
        cells = [(cx + dx, cy + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
    return [(x, y) for x, y in cells if 0 <= x < RES and 0 <= y < RES]


def _color(o: Obj):
    if o.shape == "button":
        return BUTTON_COLOR
    if o.shape == "drawer":
        return DRAWER_COLOR
    return COLORS[o.color]


def render_rgb(state: EnvState) -> np.ndarray:
    """``[32, 32, 3]`` float32 image in [0, 1]; row index is y, column is x."""
    img = np.empty((RES, RES, 3), dtype=np.float32)
    img[:] = BACKGROUND
    if state.goal is not None:
        gx, gy = _cell(state.goal[0]), _cell(state.goal[1])
        for dx, dy in ((-1, -1), (1, -1), (-1, 1), (1, 1)):
            x, y = gx + dx, gy + dy
            if 0 <= x < RES and 0 <= y < RES:
                img[y, x] = GOAL_COLOR
    # low objects first so held (raised) ones draw on top
    for o in sorted(state.objects, key=lambda o: o.pos[2]):
        for x, y in _footprint(o):
            img[y, x] = _color(o)
    gx, gy = _cell(state.pose[0]), _cell(state.pose[1])
    shade = GRIPPER_CLOSED if state.pose[3] >= 0.5 else GRIPPER_OPEN
    for dx, dy in ((0, -1), (-1, 0), (1, 0), (0, 1)):
        x, y = gx + dx, gy + dy
        if 0 <= x < RES and 0 <= y < RES:
            img[y, x] = shade
    return img


def render_depth(state: EnvState) -> np.ndarray:
    """``[32, 32, 1]`` normalized height map consistent with :func:`render_rgb`."""
    h = np.zeros((RES, RES), dtype=np.float32)
    for o in sorted(state.objects, key=lambda o: o.pos[2]):
        top = min(1.0, o.pos[2] + OBJ_HEIGHT[o.shape])
        for x, y in _footprint(o):
            h[y, x] = top
    gx, gy = _cell(state.pose[0]), _cell(state.pose[1])
    for dx, dy in ((0, -1), (-1, 0), (1, 0), (0, 1)):
        x, y = gx + dx, gy + dy
        if 0 <= x < RES and 0 <= y < RES:
            h[y, x] = state.pose[2]
    return h[:, :, None]


# ---------------------------------------------------------------------------
# scripted expert


def _toward(state: EnvState, xy, z, grip) -> np.ndarray:
    return np.array([xy[0], xy[1], z, grip], dtype=np.float64)


def _grasp_plan(state: EnvState, obj: Obj) -> np.ndarray:
    """Hover over ``obj``, descend, close."""
    p = state.pose
    d = np.linalg.norm(obj.pos[:2] - p[:2])
    if d > 0.01:
        z = HOVER_Z if d > 0.1 else min(p[2], HOVER_Z)
        return _toward(state, obj.pos[:2], z, 0.0)
    if p[2] > 0.02:
        return _toward(state, obj.pos[:2], 0.0, 0.0)
    return _toward(state, obj.pos[:2], 0.0, 1.0)


def expert_action(state: EnvState, task: TaskSpec | None = None) -> np.ndarray:
    task = task or state.task
    p = state.pose
    obj = state.target_obj
    f = task.family
    if check_success(state, task):
        return p.copy()

    if f == "reach":
        return _toward(state, obj.pos[:2], p[2], 0.0)

    if f == "pick":
        if obj.held:
            return _toward(state, p[:2], LIFT_Z + 0.05, 1.0)
        return _grasp_plan(state, obj)

    if f == "place":
        goal = state.goal
        if not obj.held:
            if np.linalg.norm(obj.pos[:2] - goal) <= task.tol * 0.5:
                return _toward(state, p[:2], HOVER_Z, 0.0)
            return _grasp_plan(state, obj)
        d = np.linalg.norm(goal - p[:2])
        if d > 0.01:
            return _toward(state, goal, HOVER_Z if d > 0.1 else p[2], 1.0)
        if p[2] > 0.02:
            return _toward(state, goal, 0.0, 1.0)
        return _toward(state, goal, 0.0, 0.0)

    if f == "push":
        goal = state.goal
        off = goal - obj.pos[:2]
        dist = float(np.linalg.norm(off))
        u = off / max(dist, 1e-9)
        behind = obj.pos[:2] - u * (PUSH_RADIUS + 0.02)
        # aligned when the gripper sits on the line behind the block
        rel = p[:2] - obj.pos[:2]
        along = float(rel @ u)
        lateral = float(np.linalg.norm(rel - along * u))
        aligned = along < -0.02 and lateral < 0.015
        if not aligned:
            if p[2] <= GRASP_HEIGHT and np.linalg.norm(behind - p[:2]) > 0.02:
                return _toward(state, p[:2], HOVER_Z, 0.0)
            if np.linalg.norm(behind - p[:2]) > 0.01:
                return _toward(state, behind, HOVER_Z, 0.0)
            return _toward(state, behind, 0.0, 0.0)
        if p[2] > 0.02:
            return _toward(state, behind, 0.0, 0.0)
        return _toward(state, goal - u * PUSH_RADIUS, 0.0, 0.0)

    if f == "press-button":
        d = np.linalg.norm(obj.pos[:2] - p[:2])
        if d > 0.01:
            return _toward(state, obj.pos[:2], HOVER_Z if d > 0.1 else p[2], 0.0)
        return _toward(state, obj.pos[:2], 0.0, 0.0)

    if f == "open-drawer":
        if obj.held:
            return _toward(state, (obj.pos[0], state.drawer_y0 + 0.2), 0.0, 1.0)
        return _grasp_plan(state, obj)

    raise UnreachableError(f"no expert for {f}")


def check_success(state: EnvState, task: TaskSpec | None = None) -> bool:
    task = task or state.task
    obj = state.target_obj
    f = task.family
    if f == "reach":
        return bool(np.linalg.norm(state.pose[:2] - obj.pos[:2]) <= task.tol)
    if f == "pick":
        return bool(obj.held and state.pose[2] >= 0.5)
    if f in ("place", "push"):
        return bool(not obj.held and obj.pos[2] == 0.0 and np.linalg.norm(obj.pos[:2] - state.goal) <= task.tol)
    if f == "press-button":
        return state.pressed
    if f == "open-drawer":
        return bool(obj.pos[1] - state.drawer_y0 >= 0.15)
    return False
