"""Deterministic gridworld with five instruction-conditioned task families.

Commands are the 12-dim locomotion vectors of :mod:`moeq.actions`. Only the
planar velocities, yaw rate and the termination flag affect the grid; the
gait/height/frequency entries are recorded but inert.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .actions import ACTION_DIM, COMMAND_NAMES, TERMINATE, default_bounds, is_stop

SKILLS = ("go_to", "go_avoid", "stop", "distinguish", "go_through")
GAITS = ("trot", "bound", "pronk", "pace")
SPEEDS = ("slow", "normal", "fast")
SKILL_OBJECTS = {
    "go_to": ("trashcan", "piano", "chair", "fan", "cube", "sofa"),
    "go_avoid": ("trashcan", "piano", "chair", "fan", "cube", "sofa"),
    "stop": ("red_ball", "blue_ball", "green_ball"),
    "distinguish": ("letter_A", "letter_B", "letter_C", "letter_D"),
    "go_through": ("silver_rectangle", "gold_arch", "red_rectangle", "blue_arch"),
}
OBJECTS = tuple(dict.fromkeys(o for objs in SKILL_OBJECTS.values() for o in objs))

EMPTY, WALL, OBJECT, OBSTACLE, BALL, TUNNEL = range(6)
N_CELL_TYPES = 6
PATCH_CELLS = 9

# heading 0..3 = +y, +x, -y, -x
FORWARD = ((0, 1), (1, 0), (0, -1), (-1, 0))
SPEED_MAGNITUDE = {"slow": 0.5, "normal": 0.7, "fast": 0.9}
GAIT_PATTERN = {
    "trot": (0.5, 0.0, 0.0),
    "bound": (0.0, 0.5, 0.0),
    "pronk": (0.0, 0.0, 0.5),
    "pace": (0.5, 0.5, 0.0),
}
SPEED_FREQ = {"slow": 0.3, "normal": 0.5, "fast": 0.8}
TERMINATE_ON, TERMINATE_OFF = 0.8, -0.8
DEAD_ZONE = 1.0 / 3.0
MAX_LAYOUT_RETRIES = 20


class LayoutError(RuntimeError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    skill: str
    target: str
    gait: str = "trot"
    speed: str = "normal"
    seed: int = 0

    def __post_init__(self):
        if self.skill not in SKILLS:
            raise ValueError(f"unknown skill {self.skill!r}")
        if self.target not in SKILL_OBJECTS[self.skill]:
            raise ValueError(f"object {self.target!r} is not valid for {self.skill}")
        if self.gait not in GAITS or self.speed not in SPEEDS:
            raise ValueError(f"unknown gait/speed {self.gait!r}/{self.speed!r}")

    def instruction(self) -> tuple[int, int, int, int]:
        return (SKILLS.index(self.skill), OBJECTS.index(self.target),
                GAITS.index(self.gait), SPEEDS.index(self.speed))

    def as_dict(self) -> dict:
        return {"skill": self.skill, "target": self.target, "gait": self.gait,
                "speed": self.speed, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(d["skill"], d["target"], d["gait"], d["speed"], int(d["seed"]))


def random_spec(rng: np.random.Generator, skill: str | None = None) -> TaskSpec:
    skill = skill or SKILLS[rng.integers(len(SKILLS))]
    objs = SKILL_OBJECTS[skill]
    return TaskSpec(skill, objs[rng.integers(len(objs))], GAITS[rng.integers(len(GAITS))],
                    SPEEDS[rng.integers(len(SPEEDS))], int(rng.integers(2**31)))


@dataclass(frozen=True)
class Observation:
    pos: int
    heading: int
    target: int
    patch: tuple[int, ...]

    def as_list(self) -> list[int]:
        return [self.pos, self.heading, self.target, *self.patch]

    @classmethod
    def from_list(cls, v) -> "Observation":
        return cls(int(v[0]), int(v[1]), int(v[2]), tuple(int(x) for x in v[3:]))


@dataclass
class GridState:
    width: int
    height: int
    agent: tuple[int, int]
    heading: int
    goal: tuple[int, int]
    blocked: set = field(default_factory=set)        # walls and objects
    objects_cells: set = field(default_factory=set)  # objects and boxes (subset of blocked)
    obstacles: set = field(default_factory=set)      # touching fails the episode
    forbidden: set = field(default_factory=set)      # wrong tunnel entrance
    tunnels: set = field(default_factory=set)
    ball: tuple[int, int] | None = None
    ball_velocity: tuple[int, int] = (0, -1)
    step_count: int = 0
    horizon: int = 60
    done: bool = False
    success: bool = False

    def in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def cell_type(self, c) -> int:
        if not self.in_bounds(c):
            return WALL
        if c in self.objects_cells:
            return OBJECT
        if c in self.blocked:
            return WALL
        if c in self.obstacles:
            return OBSTACLE
        if c == self.ball:
            return BALL
        if c in self.tunnels:
            return TUNNEL
        return EMPTY


def _sign(u: float) -> int:
    return 1 if u > DEAD_ZONE else (-1 if u < -DEAD_ZONE else 0)


def _left(h: int) -> int:
    return (h + 3) % 4


def to_agent_frame(dx: int, dy: int, heading: int) -> tuple[int, int]:
    fx, fy = FORWARD[heading]
    lx, ly = FORWARD[_left(heading)]
    return dx * fx + dy * fy, dx * lx + dy * ly


class GridEnv:
    """Single-episode grid simulator; ``reset`` then ``step`` until done."""

    def __init__(self, width: int = 7, height: int = 7, horizon: int = 60, bounds=None):
        self.width, self.height, self.horizon = width, height, horizon
        self.bounds = default_bounds() if bounds is None else np.asarray(bounds, dtype=np.float64)
        self.radius = max(width, height) - 1
        self.state: GridState | None = None
        self.spec: TaskSpec | None = None

    # vocabulary sizes of the symbolic observation
    @property
    def n_pos(self) -> int:
        return self.width * self.height

    @property
    def n_target(self) -> int:
        return (2 * self.radius + 1) ** 2

    # ------------------------------------------------------------------ layout

    def reset(self, spec: TaskSpec) -> Observation:
        for sub in range(MAX_LAYOUT_RETRIES):
            rng = np.random.default_rng([spec.seed, sub])
            state = self._layout(spec.skill, rng)
            if state is not None and self._feasible(spec.skill, state):
                self.state, self.spec = state, spec
                return self.observe()
        raise LayoutError(f"no feasible {spec.skill} layout on a {self.width}x{self.height} grid "
                          f"after {MAX_LAYOUT_RETRIES} attempts (seed {spec.seed})")

    def _free(self, rng, taken, xs=None, ys=None):
        xs = range(self.width) if xs is None else xs
        ys = range(self.height) if ys is None else ys
        cells = [(x, y) for y in ys for x in xs if (x, y) not in taken]
        if not cells:
            return None
        return cells[rng.integers(len(cells))]

    def _layout(self, skill: str, rng) -> GridState | None:
        W, H = self.width, self.height
        if W < 3 or H < 3:
            return None
        heading = int(rng.integers(4))
        base = dict(width=W, height=H, heading=heading, horizon=self.horizon)
        if skill == "go_to":
            obj = self._free(rng, set(), ys=range(1, H))
            goal = (obj[0], obj[1] - 1)
            distractor = self._free(rng, {obj, goal})
            agent = self._free(rng, {obj, goal, distractor})
            if agent is None or abs(agent[0] - goal[0]) + abs(agent[1] - goal[1]) < 2:
                return None
            objs = {obj, distractor}
            return GridState(agent=agent, goal=goal, blocked=set(objs), objects_cells=objs, **base)
        if skill == "go_avoid":
            vertical = bool(rng.integers(2))
            gap = int(rng.integers(3, max(W, H)))
            if vertical:
                x = int(rng.integers(W))
                ay = int(rng.integers(0, H - 1 - gap)) if H - 1 - gap > 0 else None
                if ay is None:
                    return None
                agent, goal = (x, ay), (x, ay + gap)
                obstacle = (x, ay + int(rng.integers(1, gap)))
            else:
                y = int(rng.integers(0, H - 1))
                if gap >= W:
                    return None
                ax = int(rng.integers(0, W - gap))
                agent, goal = (ax, y), (ax + gap, y)
                if rng.integers(2):
                    agent, goal = goal, agent
                lo = min(agent[0], goal[0])
                obstacle = (lo + int(rng.integers(1, gap)), y)
            obj = (goal[0], goal[1] + 1)
            if not (0 <= obj[1] < H):
                return None
            return GridState(agent=agent, goal=goal, blocked={obj}, objects_cells={obj},
                             obstacles={obstacle}, **base)
        if skill == "stop":
            bx = int(rng.integers(W))
            offsets = [d for d in (-3, -2, -1, 1, 2, 3) if 0 <= bx + d < W]
            if not offsets or H < 4:
                return None
            ax = bx + offsets[rng.integers(len(offsets))]
            return GridState(agent=(ax, 1), goal=(bx, 1), ball=(bx, H - 1), **base)
        if skill == "distinguish":
            # a row of lettered boxes along the far wall
            cols = sorted(int(c) for c in rng.choice(W, 3, replace=False))
            boxes = [(c, H - 1) for c in cols]
            correct = boxes[rng.integers(3)]
            agent = self._free(rng, set(), ys=range(0, max(1, H - 4)))
            if agent[0] == correct[0]:
                return None
            cells = set(boxes)
            return GridState(agent=agent, goal=correct, blocked=set(cells),
                             objects_cells=cells, **base)
        if skill == "go_through":
            wy = H // 2
            if W < 4:
                return None
            c1, c2 = sorted(int(c) for c in rng.choice(W, 2, replace=False))
            if c2 - c1 < 2:
                return None
            correct, wrong = (c1, c2) if rng.integers(2) else (c2, c1)
            wall = {(x, wy) for x in range(W)} - {(c1, wy), (c2, wy)}
            agent = self._free(rng, set(), ys=range(0, wy))
            return GridState(agent=agent, goal=(correct, wy + 1), blocked=wall,
                             tunnels={(c1, wy), (c2, wy)}, forbidden={(wrong, wy)}, **base)
        raise ValueError(skill)

    def _feasible(self, skill: str, s: GridState) -> bool:
        if skill == "stop":
            return abs(s.agent[0] - s.ball[0]) <= s.ball[1] - s.agent[1] - 1
        if skill == "distinguish":
            return True
        return shortest_path(s, s.agent, s.goal) is not None

    # ------------------------------------------------------------------ dynamics

    def observe(self) -> Observation:
        s = self.state
        ax, ay = s.agent
        target = s.ball if s.ball is not None and self.spec.skill == "stop" else s.goal
        fwd, left = to_agent_frame(target[0] - ax, target[1] - ay, s.heading)
        r = self.radius
        fwd, left = int(np.clip(fwd, -r, r)), int(np.clip(left, -r, r))
        target_id = (fwd + r) * (2 * r + 1) + (left + r)
        fx, fy = FORWARD[s.heading]
        lx, ly = FORWARD[_left(s.heading)]
        patch = tuple(s.cell_type((ax + df * fx + dl * lx, ay + df * fy + dl * ly))
                      for df in (1, 0, -1) for dl in (1, 0, -1))
        return Observation(ay * self.width + ax, s.heading, target_id, patch)

    def step(self, cmd) -> tuple[Observation, bool, bool]:
        s = self.state
        if s is None or s.done:
            raise EpisodeDoneError("step called on a finished episode; call reset first")
        cmd = np.asarray(cmd, dtype=np.float64)
        if cmd.shape != (ACTION_DIM,):
            raise ValueError(f"command must have {ACTION_DIM} entries, got shape {cmd.shape}")
        s.step_count += 1
        skill = self.spec.skill
        if is_stop(cmd, self.bounds):
            s.done = True
            s.success = self._criterion_met()
            return self.observe(), True, s.success

        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        u = (cmd - 0.5 * (lo + hi)) / (0.5 * (hi - lo))
        fwd, lat, rot = _sign(u[0]), _sign(u[1]), _sign(u[2])
        fx, fy = FORWARD[s.heading]
        lx, ly = FORWARD[_left(s.heading)]
        dest = (s.agent[0] + fwd * fx + lat * lx, s.agent[1] + fwd * fy + lat * ly)
        prev = s.agent
        if dest != s.agent and s.in_bounds(dest) and dest not in s.blocked:
            s.agent = dest
        if rot > 0:
            s.heading = _left(s.heading)
        elif rot < 0:
            s.heading = (s.heading + 1) % 4

        if s.agent in s.obstacles or s.agent in s.forbidden:
            s.done, s.success = True, False
        elif skill == "stop":
            self._advance_ball(prev)
        if not s.done and s.step_count >= s.horizon:
            s.done, s.success = True, False
        return self.observe(), s.done, s.success

    def _advance_ball(self, agent_prev):
        s = self.state
        if s.agent == s.ball:
            s.done, s.success = True, True
            return
        old = s.ball
        s.ball = (old[0] + s.ball_velocity[0], old[1] + s.ball_velocity[1])
        if s.ball == s.agent or (s.ball == agent_prev and old == s.agent):
            s.done, s.success = True, True
        elif not s.in_bounds(s.ball):
            s.ball = None
            s.done, s.success = True, False

    def _criterion_met(self) -> bool:
        s = self.state
        skill = self.spec.skill
        if skill == "distinguish":
            return facing(s, s.goal)
        if skill == "stop":
            return False
        return s.agent == s.goal


def facing(s: GridState, cell) -> bool:
    dx, dy = cell[0] - s.agent[0], cell[1] - s.agent[1]
    fwd, left = to_agent_frame(dx, dy, s.heading)
    return fwd > 0 and left == 0


def shortest_path(s: GridState, start, goal) -> list | None:
    """4-neighbour BFS avoiding walls, objects, obstacles and wrong tunnels."""
    if start == goal:
        return [start]
    avoid = s.blocked | s.obstacles | s.forbidden
    prev = {start: None}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for dx, dy in FORWARD:
            n = (c[0] + dx, c[1] + dy)
            if n in prev or not s.in_bounds(n) or n in avoid:
                continue
            prev[n] = c
            if n == goal:
                path = [n]
                while prev[path[-1]] is not None:
                    path.append(prev[path[-1]])
                return path[::-1]
            queue.append(n)
    return None


# ---------------------------------------------------------------------- collectors


def base_command(spec: TaskSpec) -> np.ndarray:
    cmd = np.zeros(ACTION_DIM)
    cmd[3:6] = GAIT_PATTERN[spec.gait]
    cmd[COMMAND_NAMES.index("freq")] = SPEED_FREQ[spec.speed]
    cmd[COMMAND_NAMES.index("height")] = 0.6
    cmd[TERMINATE] = TERMINATE_OFF
    return cmd


def stop_command(spec: TaskSpec) -> np.ndarray:
    cmd = base_command(spec)
    cmd[TERMINATE] = TERMINATE_ON
    return cmd


def move_command(spec: TaskSpec, heading: int, dx: int, dy: int) -> np.ndarray:
    cmd = base_command(spec)
    fwd, left = to_agent_frame(dx, dy, heading)
    mag = SPEED_MAGNITUDE[spec.speed]
    cmd[0], cmd[1] = fwd * mag, left * mag
    return cmd


def scripted_expert(env: GridEnv) -> np.ndarray:
    """Shortest-path controller for the current episode."""
    s, spec = env.state, env.spec
    if spec.skill == "stop":
        if s.ball is None:
            return stop_command(spec)
        dx = int(np.sign(s.ball[0] - s.agent[0]))
        return move_command(spec, s.heading, dx, 0)
    if spec.skill == "distinguish":
        if facing(s, s.goal):
            return stop_command(spec)
        dx, dy = s.goal[0] - s.agent[0], s.goal[1] - s.agent[1]
        if dx != 0 and dy != 0:
            # walk along the wall until the box is straight ahead
            return move_command(spec, s.heading, int(np.sign(dx)), 0)
        want = FORWARD.index((int(np.sign(dx)), int(np.sign(dy))))
        cmd = base_command(spec)
        cmd[2] = 0.7 if _left(s.heading) == want else -0.7
        return cmd
    if s.agent == s.goal:
        return stop_command(spec)
    path = shortest_path(s, s.agent, s.goal)
    if path is None:
        return stop_command(spec)
    return move_command(spec, s.heading, path[1][0] - s.agent[0], path[1][1] - s.agent[1])


def random_command(rng: np.random.Generator, bounds=None) -> np.ndarray:
    bounds = default_bounds() if bounds is None else np.asarray(bounds)
    return rng.uniform(bounds[:, 0], bounds[:, 1])


def scripted_suboptimal(env: GridEnv, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Expert command with probability 1 - epsilon, otherwise a uniform random command."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return random_command(rng, env.bounds)
    return scripted_expert(env)
