"""Three-corridor 2D navigation maze.

Layout on the unit square: a bottom chamber (start) and a top chamber (goal)
joined by three vertical corridors.  Each corridor has a blockade slot at
mid-height that can be switched on to close it.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

CORRIDORS = ("left", "middle", "right")

STEP_SIZE = 0.03
STEP_CAP = 300
STEP_REWARD = -0.1
GOAL_REWARD = 10.0


class CollisionError(ValueError):
    """Requested position lies inside a wall or an active blockade."""


@dataclass(frozen=True)
class Rect:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        # open interior: touching a wall face is allowed
        return self.x0 < x < self.x1 and self.y0 < y < self.y1

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class WorldGeometry:
    corridor_centers: tuple[float, float, float] = (0.2, 0.5, 0.8)
    corridor_width: float = 0.12
    chamber_height: float = 0.15
    blockade_height: float = 0.04
    start: tuple[float, float] = (0.5, 0.075)
    goal: tuple[float, float] = (0.5, 0.925)
    goal_radius: float = 0.05
    walls: list[Rect] = field(init=False)
    blockade_slots: dict[str, Rect] = field(init=False)

    def __post_init__(self):
        lo, hi = self.chamber_height, 1.0 - self.chamber_height
        half = self.corridor_width / 2
        # outer walls reach past the bounds so x=0 and x=1 are not free seams
        edges = [-0.01]
        for c in self.corridor_centers:
            edges += [c - half, c + half]
        edges.append(1.01)
        self.walls = [Rect(edges[i], lo, edges[i + 1], hi) for i in range(0, len(edges), 2)]
        mid = 0.5 * (lo + hi)
        hb = self.blockade_height / 2
        # slots overlap the side walls so no seam is left along the wall faces
        bw = half + 0.01
        self.blockade_slots = {
            name: Rect(c - bw, mid - hb, c + bw, mid + hb) for name, c in zip(CORRIDORS, self.corridor_centers)
        }

    def corridor_band(self, name: str) -> tuple[float, float]:
        c = self.corridor_centers[CORRIDORS.index(name)]
        return c - self.corridor_width / 2, c + self.corridor_width / 2

    def to_dict(self) -> dict:
        return {
            "bounds": [0.0, 0.0, 1.0, 1.0],
            "walls": [w.as_list() for w in self.walls],
            "start": list(self.start),
            "goal": {"center": list(self.goal), "radius": self.goal_radius},
            "blockade_slots": {k: r.as_list() for k, r in self.blockade_slots.items()},
            "corridor_centers": list(self.corridor_centers),
            "corridor_width": self.corridor_width,
            "chamber_height": self.chamber_height,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EnvState:
    position: tuple[float, float]
    steps_elapsed: int = 0

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.position)


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    terminal: bool
    collision: bool
    reached_goal: bool

    @property
    def truncated(self) -> bool:
        return self.terminal and not self.reached_goal


class MazeEnv:
    """Deterministic kinematic point agent in the three-corridor maze."""

    def __init__(self, geometry: WorldGeometry | None = None, step_cap: int = STEP_CAP):
        self.geometry = geometry or WorldGeometry()
        self.step_cap = step_cap
        self.blockades: dict[str, bool] = {name: False for name in CORRIDORS}
        self.state = EnvState(self.geometry.start, 0)

    def clone(self) -> "MazeEnv":
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        active = ",".join(k for k in CORRIDORS if self.blockades[k])
        return f"{self.geometry.fingerprint()}:{active or 'open'}"

    # collision model

    def obstacles(self) -> list[Rect]:
        g = self.geometry
        return g.walls + [g.blockade_slots[k] for k in CORRIDORS if self.blockades[k]]

    def is_free(self, x: float, y: float) -> bool:
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            return False
        return not any(r.contains(x, y) for r in self.obstacles())

    def _segment_blocked(self, x0: float, y0: float, x1: float, y1: float) -> bool:
        """Axis-aligned segment test against open rectangles and the bounds."""
        if not (0.0 <= x1 <= 1.0 and 0.0 <= y1 <= 1.0):
            return True
        xa, xb = min(x0, x1), max(x0, x1)
        ya, yb = min(y0, y1), max(y0, y1)
        for r in self.obstacles():
            if xa < r.x1 and xb > r.x0 and ya < r.y1 and yb > r.y0:
                # degenerate axis must lie strictly inside the open interval
                if xa == xb and not (r.x0 < xa < r.x1):
                    continue
                if ya == yb and not (r.y0 < ya < r.y1):
                    continue
                return True
        return False

    def in_goal(self, x: float, y: float) -> bool:
        gx, gy = self.geometry.goal
        return math.hypot(x - gx, y - gy) <= self.geometry.goal_radius

    # API

    def reset(self, seed: int | None = None) -> EnvState:
        rng = np.random.default_rng(seed)
        sx, sy = self.geometry.start
        while True:
            r = 0.01 * math.sqrt(rng.uniform())
            th = rng.uniform(0.0, 2.0 * math.pi)
            x, y = sx + r * math.cos(th), sy + r * math.sin(th)
            if self.is_free(x, y):
                break
        self.state = EnvState((x, y), 0)
        return self.state

    def set_state(self, position, steps_elapsed: int = 0) -> EnvState:
        x, y = float(position[0]), float(position[1])
        if not self.is_free(x, y):
            raise CollisionError(f"position ({x:.4f}, {y:.4f}) is inside an obstacle")
        self.state = EnvState((x, y), int(steps_elapsed))
        return self.state

    def set_blockade(self, corridor: str, active: bool) -> None:
        if corridor not in CORRIDORS:
            raise KeyError(f"unknown corridor {corridor!r}; expected one of {CORRIDORS}")
        self.blockades[corridor] = bool(active)

    def transition(self, state: EnvState, action) -> StepResult:
        """Pure transition function; does not touch ``self.state``."""
        ax = min(max(float(action[0]), -1.0), 1.0)
        ay = min(max(float(action[1]), -1.0), 1.0)
        x, y = state.position
        collision = False
        nx = x + STEP_SIZE * ax
        if self._segment_blocked(x, y, nx, y):
            nx, collision = x, True
        ny = y + STEP_SIZE * ay
        if self._segment_blocked(nx, y, nx, ny):
            ny, collision = y, True
        steps = state.steps_elapsed + 1
        goal = self.in_goal(nx, ny)
        reward = STEP_REWARD + (GOAL_REWARD if goal else 0.0)
        terminal = goal or steps >= self.step_cap
        return StepResult(EnvState((nx, ny), steps), reward, terminal, collision, goal)

    def step(self, action) -> StepResult:
        result = self.transition(self.state, action)
        self.state = result.next_state
        return result

    def corridor_of(self, position) -> str | None:
        """Corridor whose x-band holds ``position`` when y is in the corridor band.

        A shared boundary goes to the lower corridor index (left < middle < right).
        """
        x, y = float(position[0]), float(position[1])
        g = self.geometry
        if not (g.chamber_height <= y <= 1.0 - g.chamber_height):
            return None
        for name in CORRIDORS:
            lo, hi = g.corridor_band(name)
            if lo <= x <= hi:
                return name
        return None


def flood_fill_reachable(env: MazeEnv, resolution: float = 0.005) -> np.ndarray:
    """Boolean grid of free cells reachable from the start (4-connectivity)."""
    n = int(round(1.0 / resolution)) + 1
    coords = np.linspace(0.0, 1.0, n)
    free = np.array([[env.is_free(x, y) for y in coords] for x in coords])
    sx = int(round(env.geometry.start[0] / resolution))
    sy = int(round(env.geometry.start[1] / resolution))
    seen = np.zeros_like(free)
    seen[sx, sy] = True
    queue = deque([(sx, sy)])
    while queue:
        i, j = queue.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < n and 0 <= b < n and free[a, b] and not seen[a, b]:
                seen[a, b] = True
                queue.append((a, b))
    return seen


def corridor_passable(env: MazeEnv, corridor: str, resolution: float = 0.005) -> bool:
    """True iff the goal is reachable from the start using only ``corridor``.

    The other two corridors are treated as closed during the fill.
    """
    probe = env.clone()
    for name in CORRIDORS:
        if name != corridor:
            probe.blockades[name] = True
    seen = flood_fill_reachable(probe, resolution)
    gx = int(round(env.geometry.goal[0] / resolution))
    gy = int(round(env.geometry.goal[1] / resolution))
    return bool(seen[gx, gy])
