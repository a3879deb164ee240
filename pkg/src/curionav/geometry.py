"""2D floorplan world: map files, raycast range sensing, discrete kinematics,
collision/goal logic and the navigation episode state machine."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .rewards import RewardParams, extrinsic_reward

N_BEAMS = 72
MAX_RANGE = 7.0
STEP_LENGTH = 0.06
TURN_ANGLE = math.radians(8.0)
TURNS_PER_REV = 45  # 45 * 8 deg = 360 deg
GRID_CELL = 0.05
MAX_SAMPLING_TRIES = 10_000

BEAM_OFFSETS = -math.pi + np.arange(N_BEAMS) * (2.0 * math.pi / N_BEAMS)

MAPS_DIR = Path(__file__).parent / "maps"


class MapFormatError(ValueError):
    """Raised for unparsable or invalid map files."""


class SamplingExhausted(RuntimeError):
    """No valid (start, goal) pair found within the rejection budget."""


class EpisodeContractError(RuntimeError):
    """Raised when a finished episode is stepped again."""


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.remainder(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    return a


class Action(enum.IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2

    def one_hot(self) -> np.ndarray:
        v = np.zeros(len(Action))
        v[int(self)] = 1.0
        return v


class TerminalKind(enum.Enum):
    NONE = "none"
    REACHED_GOAL = "reached_goal"
    COLLISION = "collision"
    TIME_LIMIT = "time_limit"


@dataclass(frozen=True)
class Pose:
    """Robot pose; ``omega`` is kept wrapped to (-pi, pi].

    Discrete turns are tracked as an integer count relative to ``ref_heading``
    so that a left turn followed by a right turn restores ``omega`` exactly.
    """

    x: float
    y: float
    omega: float = 0.0
    ref_heading: float | None = field(default=None, repr=False, compare=False)
    turns: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "omega", wrap_angle(float(self.omega)))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


class GoalObservation(NamedTuple):
    distance: float
    sin_rel: float
    cos_rel: float


@dataclass(frozen=True)
class MapSpec:
    name: str
    width: float
    height: float
    segments: np.ndarray  # (S, 4) rows of x1, y1, x2, y2
    spawn_clearance: float = 0.1

    def __post_init__(self):
        seg = np.array(self.segments, dtype=np.float64).reshape(-1, 4)
        seg.setflags(write=False)
        object.__setattr__(self, "segments", seg)
        validate_map(self)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def __hash__(self):
        return hash((self.name, self.width, self.height, self.segments.tobytes()))

    def __eq__(self, other):
        if not isinstance(other, MapSpec):
            return NotImplemented
        return (self.name, self.width, self.height) == (other.name, other.width, other.height) and \
            np.array_equal(self.segments, other.segments)


def boundary_segments(width: float, height: float) -> np.ndarray:
    return np.array([
        [0.0, 0.0, width, 0.0],
        [width, 0.0, width, height],
        [width, height, 0.0, height],
        [0.0, height, 0.0, 0.0],
    ])


def _side_covered(seg: np.ndarray, fixed_axis: int, value: float, length: float, tol=1e-9) -> bool:
    other = 1 - fixed_axis
    on_side = (np.abs(seg[:, fixed_axis] - value) < tol) & (np.abs(seg[:, fixed_axis + 2] - value) < tol)
    spans = sorted(
        (min(s[other], s[other + 2]), max(s[other], s[other + 2])) for s in seg[on_side]
    )
    reach = 0.0
    for lo, hi in spans:
        if lo > reach + tol:
            return False
        reach = max(reach, hi)
    return reach >= length - tol


def validate_map(m: MapSpec) -> None:
    if not (m.width > 0 and m.height > 0):
        raise MapFormatError(f"{m.name}: width and height must be positive")
    seg = m.segments
    if not np.all(np.isfinite(seg)):
        raise MapFormatError(f"{m.name}: non-finite segment coordinate")
    xs, ys = seg[:, [0, 2]], seg[:, [1, 3]]
    if np.any(xs < 0) or np.any(xs > m.width) or np.any(ys < 0) or np.any(ys > m.height):
        raise MapFormatError(f"{m.name}: segment endpoint outside bounds [0,{m.width}]x[0,{m.height}]")
    sides = [(1, 0.0, m.width), (1, m.height, m.width), (0, 0.0, m.height), (0, m.width, m.height)]
    for axis, value, length in sides:
        if not _side_covered(seg, axis, value, length):
            raise MapFormatError(f"{m.name}: boundary wall missing (the four boundary walls must be present)")


def parse_map(text: str, name: str = "map") -> MapSpec:
    width = height = None
    closed = False
    walls = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "bounds":
                if width is not None:
                    raise MapFormatError(f"line {lineno}: duplicate bounds header")
                if len(parts) not in (3, 4) or (len(parts) == 4 and parts[3] != "closed"):
                    raise MapFormatError(f"line {lineno}: expected 'bounds <width> <height> [closed]'")
                width, height = float(parts[1]), float(parts[2])
                closed = len(parts) == 4
            elif parts[0] == "wall":
                if width is None:
                    raise MapFormatError(f"line {lineno}: wall before bounds header")
                if len(parts) != 5:
                    raise MapFormatError(f"line {lineno}: expected 'wall <x1> <y1> <x2> <y2>'")
                walls.append([float(p) for p in parts[1:]])
            else:
                raise MapFormatError(f"line {lineno}: unknown directive {parts[0]!r}")
        except ValueError as exc:
            if isinstance(exc, MapFormatError):
                raise
            raise MapFormatError(f"line {lineno}: bad number ({exc})") from None
    if width is None:
        raise MapFormatError("missing 'bounds' header")
    segs = np.array(walls, dtype=np.float64).reshape(-1, 4)
    if closed:
        segs = np.vstack([boundary_segments(width, height), segs])
    return MapSpec(name=name, width=width, height=height, segments=segs)


def resolve_map_path(path: str | Path) -> Path:
    """Accept a file path or the name of a bundled map (``map1``, ``map1.map``)."""
    p = Path(path)
    if p.exists():
        return p
    bundled = MAPS_DIR / (p.name if p.suffix == ".map" else p.name + ".map")
    if bundled.exists():
        return bundled
    raise FileNotFoundError(str(path))


def load_map(path: str | Path) -> MapSpec:
    p = resolve_map_path(path)
    return parse_map(p.read_text(), name=p.stem)


def format_map(m: MapSpec) -> str:
    lines = [f"bounds {m.width!r} {m.height!r}"]
    lines += [f"wall {x1!r} {y1!r} {x2!r} {y2!r}" for x1, y1, x2, y2 in m.segments]
    return "\n".join(lines) + "\n"


def bundled_maps() -> list[str]:
    return sorted(p.stem for p in MAPS_DIR.glob("*.map"))


_SEG_EPS = 1e-9


def _ray_distances(m: MapSpec, x: float, y: float, angles: np.ndarray) -> np.ndarray:
    seg = m.segments
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    ex, ey = (seg[:, 2] - seg[:, 0])[None, :], (seg[:, 3] - seg[:, 1])[None, :]
    wx, wy = (seg[:, 0] - x)[None, :], (seg[:, 1] - y)[None, :]
    denom = dx * ey - dy * ex
    with np.errstate(all="ignore"):
        t = (wx * ey - wy * ex) / denom
        u = (wx * dy - wy * dx) / denom
    # rays through a shared vertex must not slip between the two segments
    hit = (denom != 0) & (t >= 0) & (u >= -_SEG_EPS) & (u <= 1 + _SEG_EPS)
    t = np.where(hit, t, np.inf)
    return np.minimum(t.min(axis=1), MAX_RANGE)


def raycast(m: MapSpec, origin: Pose, beam_index: int) -> float:
    if not 0 <= beam_index < N_BEAMS:
        raise IndexError(beam_index)
    angle = np.array([origin.omega + BEAM_OFFSETS[beam_index]])
    return float(_ray_distances(m, origin.x, origin.y, angle)[0])


def scan(m: MapSpec, pose: Pose) -> np.ndarray:
    """72 range readings, beam k at heading + (-pi + k * 5 deg), clipped to 7 m."""
    return _ray_distances(m, pose.x, pose.y, pose.omega + BEAM_OFFSETS)


def apply_action(pose: Pose, action: Action | int) -> Pose:
    action = Action(action)
    if action is Action.FORWARD:
        return Pose(pose.x + STEP_LENGTH * math.cos(pose.omega),
                    pose.y + STEP_LENGTH * math.sin(pose.omega),
                    pose.omega, pose.ref_heading, pose.turns)
    ref = pose.omega if pose.ref_heading is None else pose.ref_heading
    delta = 1 if action is Action.TURN_LEFT else -1
    turns = (pose.turns + delta) % TURNS_PER_REV
    omega = wrap_angle(ref + turns * TURN_ANGLE) if turns else ref
    return Pose(pose.x, pose.y, omega, ref, turns)


def segment_distances(m: MapSpec, x, y) -> np.ndarray:
    """Distances from point(s) to every wall segment; trailing axis indexes segments."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    seg = m.segments
    ax, ay = seg[:, 0], seg[:, 1]
    ex, ey = seg[:, 2] - ax, seg[:, 3] - ay
    len2 = ex * ex + ey * ey
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.clip(((x - ax) * ex + (y - ay) * ey) / len2, 0.0, 1.0)
    s = np.where(len2 > 0, s, 0.0)
    return np.hypot(ax + s * ex - x, ay + s * ey - y)


def check_collision(m: MapSpec, pose: Pose, robot_radius: float) -> bool:
    if not (0.0 <= pose.x <= m.width and 0.0 <= pose.y <= m.height):
        return True
    return bool(segment_distances(m, pose.x, pose.y).min() < robot_radius)


def goal_observation(pose: Pose, goal) -> GoalObservation:
    gx, gy = goal
    dist = math.hypot(pose.x - gx, pose.y - gy)
    bearing = wrap_angle(math.atan2(gy - pose.y, gx - pose.x) - pose.omega)
    return GoalObservation(dist, math.sin(bearing), math.cos(bearing))


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 7000
    goal_radius: float = 0.1
    robot_radius: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_steps <= 0 or self.goal_radius <= 0 or self.robot_radius <= 0:
            raise ValueError("max_steps, goal_radius and robot_radius must be positive")


class OccupancyGrid:
    """Free-space raster at ``GRID_CELL`` resolution with 4-connected component labels."""

    def __init__(self, m: MapSpec, clearance: float, cell: float = GRID_CELL):
        self.cell = cell
        self.nx = int(math.ceil(m.width / cell))
        self.ny = int(math.ceil(m.height / cell))
        cx, cy = np.meshgrid((np.arange(self.nx) + 0.5) * cell,
                             (np.arange(self.ny) + 0.5) * cell, indexing="ij")
        free = segment_distances(m, cx, cy).min(axis=-1) >= clearance
        free &= (cx <= m.width) & (cy <= m.height)
        self.free = free
        structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        self.labels, self.n_components = ndimage.label(free, structure=structure)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (min(int(x / self.cell), self.nx - 1), min(int(y / self.cell), self.ny - 1))

    def label_at(self, x: float, y: float) -> int:
        return int(self.labels[self.cell_of(x, y)])


_GRID_CACHE: dict = {}


def occupancy_grid(m: MapSpec, clearance: float) -> OccupancyGrid:
    key = (hash(m), m.name, float(clearance))
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = _GRID_CACHE[key] = OccupancyGrid(m, clearance)
    return grid


def bfs_connected(free: np.ndarray, a: tuple[int, int], b: tuple[int, int]) -> bool:
    """Plain 4-neighbour breadth-first search over a boolean free-cell grid."""
    if not (free[a] and free[b]):
        return False
    seen = np.zeros_like(free, dtype=bool)
    seen[a] = True
    queue = deque([a])
    nx, ny = free.shape
    while queue:
        i, j = queue.popleft()
        if (i, j) == b:
            return True
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            u, v = i + di, j + dj
            if 0 <= u < nx and 0 <= v < ny and free[u, v] and not seen[u, v]:
                seen[u, v] = True
                queue.append((u, v))
    return False


def sample_episode(m: MapSpec, rng: np.random.Generator, cfg: EpisodeConfig) -> tuple[Pose, tuple[float, float]]:
    clearance = max(cfg.robot_radius, m.spawn_clearance)
    grid = occupancy_grid(m, clearance)

    def free_point():
        x = rng.uniform(0.0, m.width)
        y = rng.uniform(0.0, m.height)
        if check_collision(m, Pose(x, y), clearance):
            return None
        label = grid.label_at(x, y)
        return (x, y, label) if label else None

    for _ in range(MAX_SAMPLING_TRIES):
        start = free_point()
        if start is None:
            continue
        goal = free_point()
        if goal is None or goal[2] != start[2]:
            continue
        if math.hypot(start[0] - goal[0], start[1] - goal[1]) <= cfg.goal_radius:
            continue
        heading = wrap_angle(rng.uniform(-math.pi, math.pi))
        return Pose(start[0], start[1], heading), (goal[0], goal[1])
    raise SamplingExhausted(f"{m.name}: no connected start/goal pair after {MAX_SAMPLING_TRIES} tries")


@dataclass(frozen=True)
class StepOutcome:
    next_observation: tuple[np.ndarray, GoalObservation]
    terminal_kind: TerminalKind
    next_pose: Pose


class NavEnv:
    """Single-episode state machine over a map.  Not thread-safe; one per worker."""

    def __init__(self, m: MapSpec, cfg: EpisodeConfig | None = None, reward_params: RewardParams | None = None):
        self.map = m
        self.cfg = cfg or EpisodeConfig()
        self.reward_params = reward_params or RewardParams()
        self.rng = np.random.default_rng(self.cfg.rng_seed)
        self.pose: Pose | None = None
        self.goal = None
        self.steps = 0
        self.done = True
        self.path_length = 0.0

    def observe(self):
        return scan(self.map, self.pose), goal_observation(self.pose, self.goal)

    def reset(self, start: Pose | None = None, goal=None):
        if start is None or goal is None:
            start, goal = sample_episode(self.map, self.rng, self.cfg)
        self.pose = start
        self.goal = (float(goal[0]), float(goal[1]))
        self.steps = 0
        self.done = False
        self.path_length = 0.0
        return self.observe()

    def step(self, action) -> tuple[StepOutcome, float]:
        if self.done:
            raise EpisodeContractError("step() called on a terminated episode; call reset()")
        prev = self.pose
        pose = apply_action(prev, action)
        self.steps += 1
        self.path_length += math.hypot(pose.x - prev.x, pose.y - prev.y)
        gx, gy = self.goal
        if math.hypot(pose.x - gx, pose.y - gy) <= self.cfg.goal_radius:
            kind = TerminalKind.REACHED_GOAL
        elif check_collision(self.map, pose, self.cfg.robot_radius):
            kind = TerminalKind.COLLISION
        elif self.steps >= self.cfg.max_steps:
            kind = TerminalKind.TIME_LIMIT
        else:
            kind = TerminalKind.NONE
        reward = extrinsic_reward(prev, pose, self.goal, kind, self.reward_params)
        self.pose = pose
        self.done = kind is not TerminalKind.NONE
        return StepOutcome(self.observe(), kind, pose), reward


def render_ascii(m: MapSpec, cell: float = 0.1, clearance: float | None = None) -> str:
    """Top-down character dump: '#' wall, '.' free space, ' ' too close to a wall for the robot.

    With ``clearance`` set, free cells are lettered by connected component instead of '.'.
    """
    nx, ny = int(math.ceil(m.width / cell)), int(math.ceil(m.height / cell))
    cx, cy = np.meshgrid((np.arange(nx) + 0.5) * cell, (np.arange(ny) + 0.5) * cell, indexing="ij")
    d = segment_distances(m, cx, cy).min(axis=-1)
    grid = occupancy_grid(m, clearance) if clearance is not None else None
    rows = []
    for j in reversed(range(ny)):
        row = []
        for i in range(nx):
            if d[i, j] <= cell * 0.5:
                row.append("#")
            elif grid is None:
                row.append(".")
            else:
                label = grid.label_at(cx[i, j], cy[i, j])
                row.append(chr(ord("a") + (label - 1) % 26) if label else " ")
        rows.append("".join(row))
    return "\n".join(rows) + "\n"
