"""Synthetic BEV scenarios: moving objects, cooperating nodes, occluded views.

Every node (vehicles first, then roadside units) sees a square occupancy
grid centred on itself. Object footprints are rasterised into the grid,
cells beyond the sensing range are cleared, and a cell is cleared when the
straight ray from the node to the cell centre crosses another object's
footprint.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, UsageError
from .geometry import DetBox, Pose2D, wrap_angle

MAX_NODES = 7


@dataclass(frozen=True)
class ObjectState:
    id: int
    pose: Pose2D
    length: float
    width: float
    velocity: tuple[float, float]
    yaw_rate: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0:
            raise ConfigurationError(f"object {self.id}: non-positive extent")


@dataclass(frozen=True)
class Frame:
    t: int
    agent_poses: tuple[Pose2D, ...]
    objects: tuple[ObjectState, ...]

    @property
    def num_nodes(self) -> int:
        return len(self.agent_poses)


@dataclass
class ScenarioConfig:
    num_vehicles: int = 3
    num_rsus: int = 1
    num_objects: int = 12
    map_extent: float = 64.0        # side of the square spawn area, metres
    agent_spread: float = 0.5       # agents spawn within this fraction of the map
    frames: int = 20
    dt: float = 0.1
    v_max: float = 10.0
    agent_speed: tuple[float, float] = (2.0, 8.0)
    yaw_rate_max: float = 0.3
    yaw_rate_jitter: float = 0.05
    length_range: tuple[float, float] = (3.8, 5.0)
    width_range: tuple[float, float] = (1.7, 2.1)

    @property
    def num_nodes(self) -> int:
        return self.num_vehicles + self.num_rsus

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise ConfigurationError("scenario needs at least one agent")
        if self.num_nodes > MAX_NODES:
            raise ConfigurationError(f"at most {MAX_NODES} agents are supported, got {self.num_nodes}")
        if self.num_vehicles < 0 or self.num_rsus < 0 or self.num_objects < 0:
            raise ConfigurationError("counts must be non-negative")
        if self.frames < 1:
            raise ConfigurationError("scenario needs at least one frame")
        if self.dt <= 0 or self.v_max < 0 or self.map_extent <= 0:
            raise ConfigurationError("dt, v_max and map_extent must be positive")


@dataclass
class SensorConfig:
    window: float = 51.2      # side of the ego-centred square, metres
    cell: float = 0.4         # metres per grid cell
    max_range: float = 20.0   # metres

    @property
    def grid(self) -> int:
        n = self.window / self.cell
        if abs(n - round(n)) > 1e-6:
            raise ConfigurationError(f"window {self.window} is not a multiple of cell {self.cell}")
        return int(round(n))


@dataclass
class Scenario:
    config: ScenarioConfig
    seed: int
    frames: list[Frame] = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return self.config.num_nodes

    def to_json(self) -> str:
        doc = {
            "config": asdict(self.config),
            "seed": self.seed,
            "frames": [
                {
                    "t": f.t,
                    "agent_poses": [p.as_tuple() for p in f.agent_poses],
                    "objects": [
                        {"id": o.id, "pose": o.pose.as_tuple(), "length": o.length, "width": o.width,
                         "velocity": list(o.velocity), "yaw_rate": o.yaw_rate}
                        for o in f.objects
                    ],
                }
                for f in self.frames
            ],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        doc = json.loads(text)
        cfg = doc["config"]
        for key in ("agent_speed", "length_range", "width_range"):
            cfg[key] = tuple(cfg[key])
        frames = [
            Frame(
                t=f["t"],
                agent_poses=tuple(Pose2D(*p) for p in f["agent_poses"]),
                objects=tuple(
                    ObjectState(o["id"], Pose2D(*o["pose"]), o["length"], o["width"],
                                tuple(o["velocity"]), o["yaw_rate"])
                    for o in f["objects"]
                ),
            )
            for f in doc["frames"]
        ]
        return cls(ScenarioConfig(**cfg), doc["seed"], frames)


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------

def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Build a scenario as a pure function of ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE7]))
    half = config.map_extent / 2.0
    agent_half = half * config.agent_spread

    # agents: vehicles drive smoothly, roadside units are fixed
    agent_state = []
    for k in range(config.num_nodes):
        x, y = rng.uniform(-agent_half, agent_half, size=2)
        yaw = rng.uniform(-math.pi, math.pi)
        if k < config.num_vehicles:
            speed = rng.uniform(*config.agent_speed)
            rate = rng.uniform(-0.5, 0.5) * config.yaw_rate_max
        else:
            speed, rate = 0.0, 0.0
        agent_state.append([x, y, yaw, speed, rate])

    objects = []
    for oid in range(config.num_objects):
        length = rng.uniform(*config.length_range)
        width = rng.uniform(*config.width_range)
        for _ in range(100):
            x, y = rng.uniform(-half, half, size=2)
            clear_agents = all(math.hypot(x - a[0], y - a[1]) > 4.0 for a in agent_state)
            clear_objs = all(math.hypot(x - o[0], y - o[1]) > 5.5 for o in objects)
            if clear_agents and clear_objs:
                break
        yaw = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.0, config.v_max)
        rate = rng.uniform(-config.yaw_rate_max, config.yaw_rate_max)
        objects.append([x, y, yaw, speed, rate, length, width])

    frames = []
    for t in range(config.frames):
        poses = tuple(Pose2D(a[0], a[1], a[2]) for a in agent_state)
        objs = tuple(
            ObjectState(i, Pose2D(o[0], o[1], o[2]), o[5], o[6],
                        (o[3] * math.cos(o[2]), o[3] * math.sin(o[2])), o[4])
            for i, o in enumerate(objects)
        )
        frames.append(Frame(t, poses, objs))
        for a in agent_state:
            a[2] = wrap_angle(a[2] + a[4] * config.dt)
            a[0] += a[3] * math.cos(a[2]) * config.dt
            a[1] += a[3] * math.sin(a[2]) * config.dt
        for o in objects:
            o[4] = float(np.clip(o[4] + rng.normal(0.0, config.yaw_rate_jitter),
                                 -config.yaw_rate_max, config.yaw_rate_max))
            o[2] = wrap_angle(o[2] + o[4] * config.dt)
            o[0] += o[3] * math.cos(o[2]) * config.dt
            o[1] += o[3] * math.sin(o[2]) * config.dt
    return Scenario(config, int(seed), frames)


# ----------------------------------------------------------------------------
# observation rendering
# ----------------------------------------------------------------------------

def cell_centers(grid: int, cell: float) -> np.ndarray:
    """Local coordinates of cell centres along one axis (ego at the middle)."""
    return (np.arange(grid) + 0.5) * cell - grid * cell / 2.0


def _object_local(obj: ObjectState, owner: Pose2D):
    c = owner.to_local(np.array([obj.pose.x, obj.pose.y]))
    return float(c[0]), float(c[1]), wrap_angle(obj.pose.yaw - owner.yaw)


def _inside_rect(px, py, cx, cy, yaw, length, width):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = px - cx, py - cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= length / 2.0) & (np.abs(v) <= width / 2.0)


def _ray_blocked(points: np.ndarray, rect) -> np.ndarray:
    """Does the segment from the origin to each point cross ``rect``?"""
    cx, cy, yaw, length, width = rect
    c, s = math.cos(yaw), math.sin(yaw)
    # segment endpoints in the rectangle's frame
    ox, oy = c * (-cx) + s * (-cy), -s * (-cx) + c * (-cy)
    dx = c * (points[:, 0] - cx) + s * (points[:, 1] - cy) - ox
    dy = -s * (points[:, 0] - cx) + c * (points[:, 1] - cy) - oy
    lo = np.zeros(len(points))
    hi = np.ones(len(points))
    for o, d, half in ((ox, dx, length / 2.0), (oy, dy, width / 2.0)):
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        parallel = np.abs(d) < 1e-12
        inside = abs(o) <= half
        tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        lo = np.maximum(lo, tmin)
        hi = np.minimum(hi, tmax)
    return lo <= hi


def render_observation(frame: Frame, node: int, sensing: SensorConfig) -> np.ndarray:
    """Occupancy grid ``[1, H, W]`` (float32) seen by ``node``.

    Row index follows the local y axis, column index the local x axis.
    """
    if not 0 <= node < frame.num_nodes:
        raise UsageError(f"node {node} out of range for {frame.num_nodes} agents")
    owner = frame.agent_poses[node]
    n = sensing.grid
    centers = cell_centers(n, sensing.cell)
    grid = np.zeros((1, n, n), dtype=np.float32)
    if not frame.objects:
        return grid
    rects = [(*_object_local(o, owner), o.length, o.width) for o in frame.objects]
    reach = sensing.max_range
    for k, (cx, cy, yaw, length, width) in enumerate(rects):
        rad = 0.5 * math.hypot(length, width)
        if math.hypot(cx, cy) - rad > reach:
            continue
        cols = np.nonzero(np.abs(centers - cx) <= rad + sensing.cell)[0]
        rows = np.nonzero(np.abs(centers - cy) <= rad + sensing.cell)[0]
        if not len(cols) or not len(rows):
            continue
        px, py = np.meshgrid(centers[cols], centers[rows])
        hit = _inside_rect(px, py, cx, cy, yaw, length, width)
        hit &= np.hypot(px, py) <= reach
        rr, cc = np.nonzero(hit)
        if not len(rr):
            continue
        pts = np.stack([px[rr, cc], py[rr, cc]], axis=1)
        visible = np.ones(len(pts), dtype=bool)
        for j, other in enumerate(rects):
            if j == k:
                continue
            ocx, ocy, _, ol, ow = other
            if math.hypot(ocx, ocy) - 0.5 * math.hypot(ol, ow) > reach:
                continue
            if _inside_rect(0.0, 0.0, *other):
                continue  # an object sitting on the sensor does not shadow the scene
            visible &= ~_ray_blocked(pts, other)
        grid[0, rows[rr[visible]], cols[cc[visible]]] = 1.0
    return grid


def ground_truth_boxes(frame: Frame, node: int, window: float) -> list[DetBox]:
    """Every object whose centre lies in the ego-centred window, occluded or not."""
    owner = frame.agent_poses[node]
    half = window / 2.0
    out = []
    for o in frame.objects:
        x, y, yaw = _object_local(o, owner)
        if abs(x) < half and abs(y) < half:
            out.append(DetBox(x, y, o.width, o.length, yaw, 1.0))
    return out


def visible_object_ids(frame: Frame, node: int, sensing: SensorConfig) -> set[int]:
    """Objects contributing at least one occupied cell to ``node``'s grid."""
    solo = []
    grid = render_observation(frame, node, sensing)
    owner = frame.agent_poses[node]
    centers = cell_centers(sensing.grid, sensing.cell)
    px, py = np.meshgrid(centers, centers)
    for o in frame.objects:
        x, y, yaw = _object_local(o, owner)
        mask = _inside_rect(px, py, x, y, yaw, o.length, o.width)
        if (grid[0][mask] > 0).any():
            solo.append(o.id)
    return set(solo)
