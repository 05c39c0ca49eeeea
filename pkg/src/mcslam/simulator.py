"""Deterministic 2D world simulator: line-segment walls, a differential-drive
robot with scan sensors and noisy wheel odometry.

Random numbers come from ``numpy.random.Generator(PCG64(seed))``. Draw order
per tick k >= 1: three standard normals for the odometry increment (x, y,
theta), then for each sensor in declaration order ``beam_count`` standard
normals for the ranges. Tick 0 draws only the range normals. Every draw is
made even when the matching sigma is zero, so changing a sigma never shifts
the stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .frontend.types import LaserScan, OdometryReading, SensorExtrinsics
from .geometry import Pose2, wrap_angle

MISS = math.inf

# scans of sensor i are stamped (i + 1) * SCAN_STAGGER after the odometry line of
# the same tick so dataset lines are strictly sorted by time
SCAN_STAGGER = 1e-4


class SpawnInWall(ValueError):
    pass


@dataclass
class World:
    segments: np.ndarray  # (n, 2, 2): n segments of two endpoints
    name: str = "world"

    def __post_init__(self) -> None:
        self.segments = np.asarray(self.segments, dtype=float).reshape(-1, 2, 2)
        if len(self.segments) == 0:
            raise ValueError("a world needs at least one segment")
        if not np.all(np.isfinite(self.segments)):
            raise ValueError("segment endpoints must be finite")

    def to_text(self) -> str:
        lines = [json.dumps({"type": "world", "name": self.name})]
        for (ax, ay), (bx, by) in self.segments.tolist():
            lines.append(json.dumps({"type": "segment", "a": [ax, ay], "b": [bx, by]}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "World":
        name, segs = "world", []
        for rec in _records(text):
            if rec.get("type") == "world":
                name = rec.get("name", name)
            elif rec.get("type") == "segment":
                segs.append([rec["a"], rec["b"]])
            else:
                raise ValueError(f"unexpected record {rec.get('type')!r} in world file")
        return cls(np.array(segs, dtype=float), name)


@dataclass
class ScanSensor:
    extrinsics: SensorExtrinsics
    beam_count: int = 181
    fov: float = math.pi
    range_min: float = 0.05
    range_max: float = 10.0
    sigma_range: float = 0.01

    def __post_init__(self) -> None:
        if self.beam_count < 2:
            raise ValueError("beam_count must be at least 2")

    @property
    def topic(self) -> str:
        return self.extrinsics.topic

    @property
    def angle_min(self) -> float:
        return -self.fov / 2

    @property
    def angle_increment(self) -> float:
        return self.fov / (self.beam_count - 1)

    def beam_angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(self.beam_count)


@dataclass
class RobotModel:
    sensors: list[ScanSensor]
    sigma_xy_per_meter: float = 0.02
    sigma_theta_per_radian: float = 0.02
    sigma_theta_per_meter: float = 0.005
    rate: float = 10.0
    radius: float = 0.2

    def __post_init__(self) -> None:
        if not self.rate > 0:
            raise ValueError("rate must be positive")

    def noiseless(self) -> "RobotModel":
        sensors = [ScanSensor(s.extrinsics, s.beam_count, s.fov, s.range_min, s.range_max, 0.0) for s in self.sensors]
        return RobotModel(sensors, 0.0, 0.0, 0.0, self.rate, self.radius)

    def to_text(self) -> str:
        lines = [json.dumps({
            "type": "robot",
            "rate": self.rate,
            "radius": self.radius,
            "sigma_xy_per_meter": self.sigma_xy_per_meter,
            "sigma_theta_per_radian": self.sigma_theta_per_radian,
            "sigma_theta_per_meter": self.sigma_theta_per_meter,
        })]
        for s in self.sensors:
            p = s.extrinsics.sensor_in_base
            lines.append(json.dumps({
                "type": "sensor", "topic": s.topic, "x": p.x, "y": p.y, "theta": p.theta,
                "beam_count": s.beam_count, "fov": s.fov, "range_min": s.range_min,
                "range_max": s.range_max, "sigma_range": s.sigma_range,
            }))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RobotModel":
        head, sensors = {}, []
        for rec in _records(text):
            if rec.get("type") == "robot":
                head = rec
            elif rec.get("type") == "sensor":
                ext = SensorExtrinsics(rec["topic"], Pose2(rec["x"], rec["y"], rec["theta"]))
                sensors.append(ScanSensor(ext, int(rec["beam_count"]), float(rec["fov"]), float(rec["range_min"]),
                                          float(rec["range_max"]), float(rec["sigma_range"])))
            else:
                raise ValueError(f"unexpected record {rec.get('type')!r} in robot file")
        kw = {k: float(head[k]) for k in ("rate", "radius", "sigma_xy_per_meter", "sigma_theta_per_radian",
                                           "sigma_theta_per_meter") if k in head}
        return cls(sensors, **kw)


@dataclass
class PathCommand:
    """Piecewise-constant velocity commands starting from ``start``."""

    commands: list[tuple[float, float, float]]  # (v m/s, omega rad/s, duration s)
    start: Pose2 = field(default_factory=Pose2)

    def __post_init__(self) -> None:
        self.commands = [(float(v), float(w), float(d)) for v, w, d in self.commands]
        if any(not d > 0 for _, _, d in self.commands):
            raise ValueError("command durations must be positive")

    @property
    def duration(self) -> float:
        return sum(d for _, _, d in self.commands)

    def length(self) -> float:
        return sum(abs(v) * d for v, _, d in self.commands)

    def to_text(self) -> str:
        lines = [json.dumps({"type": "start", "x": self.start.x, "y": self.start.y, "theta": self.start.theta})]
        for v, w, d in self.commands:
            lines.append(json.dumps({"type": "command", "v": v, "omega": w, "duration": d}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PathCommand":
        start, cmds = Pose2(), []
        for rec in _records(text):
            if rec.get("type") == "start":
                start = Pose2(rec["x"], rec["y"], rec["theta"])
            elif rec.get("type") == "command":
                cmds.append((rec["v"], rec["omega"], rec["duration"]))
            else:
                raise ValueError(f"unexpected record {rec.get('type')!r} in path file")
        return cls(cmds, start)


def _records(text: str) -> Iterable[dict]:
    for line in text.split("\n"):
        if line.strip():
            yield json.loads(line)


# -- kinematics and sensing ------------------------------------------------


def step_unicycle(pose: Pose2, v: float, omega: float, dt: float) -> Pose2:
    """Exact arc integration of constant (v, omega) over ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    th = pose.theta
    if abs(omega) < 1e-9:
        return Pose2(pose.x + v * dt * math.cos(th), pose.y + v * dt * math.sin(th), th)
    th1 = th + omega * dt
    r = v / omega
    return Pose2(pose.x + r * (math.sin(th1) - math.sin(th)), pose.y + r * (math.cos(th) - math.cos(th1)),
                 wrap_angle(th1))


def ray_cast_many(segments: np.ndarray, origin, directions: np.ndarray, range_max: float) -> np.ndarray:
    """Distances along each direction to the nearest segment; ``inf`` when nothing is hit within range."""
    o = np.asarray(origin, dtype=float)
    d = np.stack([np.cos(directions), np.sin(directions)], axis=1)  # (B, 2)
    a = segments[:, 0]  # (S, 2)
    s = segments[:, 1] - a
    ao = a - o
    denom = d[:, None, 0] * s[None, :, 1] - d[:, None, 1] * s[None, :, 0]  # (B, S)
    t_num = ao[None, :, 0] * s[None, :, 1] - ao[None, :, 1] * s[None, :, 0]
    u_num = ao[None, :, 0] * d[:, None, 1] - ao[None, :, 1] * d[:, None, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = t_num / denom
        u = u_num / denom
    hit = (np.abs(denom) > 1e-12) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    t = np.where(hit, t, np.inf)
    best = t.min(axis=1)
    best[best > range_max] = np.inf
    return best


def ray_cast(world: World, origin, direction: float, range_max: float) -> float:
    if not math.isfinite(direction):
        raise ValueError("direction must be finite")
    return float(ray_cast_many(world.segments, origin, np.array([direction]), range_max)[0])


def distance_to_walls(world: World, point) -> float:
    p = np.asarray(point, dtype=float)
    a, b = world.segments[:, 0], world.segments[:, 1]
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.clip(np.where(L2 > 0, np.einsum("ij,ij->i", p - a, ab) / L2, 0.0), 0.0, 1.0)
    proj = a + u[:, None] * ab
    return float(np.min(np.linalg.norm(proj - p, axis=1)))


def scan(world: World, base: Pose2, sensor: ScanSensor, noise: np.ndarray) -> np.ndarray:
    """Ranges of one sweep; misses and out-of-bounds noisy returns are ``inf``."""
    sp = base.compose(sensor.extrinsics.sensor_in_base)
    dirs = sp.theta + sensor.beam_angles()
    r = ray_cast_many(world.segments, (sp.x, sp.y), dirs, sensor.range_max)
    r = r + sensor.sigma_range * noise
    r[~((r >= sensor.range_min) & (r <= sensor.range_max))] = MISS
    return r


# -- simulation ------------------------------------------------------------


@dataclass
class SimulationResult:
    records: list[dict]
    ground_truth: list[tuple[float, Pose2]]  # at the primary (first) sensor's scan times

    def dataset_text(self) -> str:
        return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in self.records)


def _advance(pose: Pose2, commands, t0: float, t1: float) -> tuple[Pose2, float, float]:
    """Integrate commands between t0 and t1; returns (pose, distance, |rotation|)."""
    dist = rot = 0.0
    start = 0.0
    for v, w, d in commands:
        end = start + d
        lo, hi = max(start, t0), min(end, t1)
        if hi > lo:
            pose = step_unicycle(pose, v, w, hi - lo)
            dist += abs(v) * (hi - lo)
            rot += abs(w) * (hi - lo)
        start = end
        if start >= t1:
            break
    return pose, dist, rot


def simulate(world: World, robot: RobotModel, path: PathCommand, seed: int) -> SimulationResult:
    if distance_to_walls(world, (path.start.x, path.start.y)) < robot.radius:
        raise SpawnInWall(f"start ({path.start.x}, {path.start.y}) is within {robot.radius} m of a wall")
    rng = np.random.Generator(np.random.PCG64(seed))
    rate = robot.rate
    n_ticks = int(math.floor(path.duration * rate + 1e-9)) + 1
    truth = odom = path.start
    records: list[dict] = []
    gt: list[tuple[float, Pose2]] = []
    prev_t = 0.0
    for k in range(n_ticks):
        t = k / rate
        if k > 0:
            truth_next, dist, rot = _advance(truth, path.commands, prev_t, t)
            z = rng.standard_normal(3)
            odom_step, _, _ = _advance(odom, path.commands, prev_t, t)
            sxy = robot.sigma_xy_per_meter * dist
            sth = robot.sigma_theta_per_radian * rot + robot.sigma_theta_per_meter * dist
            if sxy > 0 or sth > 0:
                odom_step = odom_step.compose(Pose2(sxy * z[0], sxy * z[1], sth * z[2]))
            odom = odom_step
            truth = truth_next
            prev_t = t
        records.append(OdometryReading(t, odom).to_record())
        for i, sensor in enumerate(robot.sensors):
            noise = rng.standard_normal(sensor.beam_count)
            ranges = scan(world, truth, sensor, noise)
            ts = t + (i + 1) * SCAN_STAGGER
            records.append(LaserScan(ts, sensor.topic, sensor.angle_min, sensor.angle_increment, sensor.range_min,
                                     sensor.range_max, ranges).to_record())
            if i == 0:
                gt.append((ts, truth))
    return SimulationResult(records, gt)


# -- built-in robot, worlds and paths --------------------------------------


def default_robot(dual: bool = True) -> RobotModel:
    sensors = [ScanSensor(SensorExtrinsics("front_scan", Pose2(0.2, 0.0, 0.0)))]
    if dual:
        sensors.append(ScanSensor(SensorExtrinsics("rear_scan", Pose2(-0.2, 0.0, math.pi))))
    return RobotModel(sensors)


def _rect(x0: float, y0: float, x1: float, y1: float) -> list:
    return [[(x0, y0), (x1, y0)], [(x1, y0), (x1, y1)], [(x1, y1), (x0, y1)], [(x0, y1), (x0, y0)]]


def box_world(size: float = 10.0) -> World:
    h = size / 2
    return World(np.array(_rect(-h, -h, h, h)), "box")


def box_path(radius: float = 40.0 / (4 * math.pi), laps: int = 2, speed: float = 1.0) -> PathCommand:
    """Circle laps about the box centre, total length ``laps * 2 * pi * radius``."""
    duration = laps * 2 * math.pi * radius / speed
    return PathCommand([(speed, speed / radius, duration)], Pose2(0.0, -radius, 0.0))


def office_world() -> World:
    """A 24 x 16 m floor: a ring corridor around a central block of rooms,
    with door recesses and pillars giving structure along the corridors."""
    segs = _rect(0, 0, 24, 16)
    # central block outline with two door recesses per long side
    segs += [[(5, 5), (8, 5)], [(8, 5), (8, 5.6)], [(8, 5.6), (9.2, 5.6)], [(9.2, 5.6), (9.2, 5)],
             [(9.2, 5), (14.8, 5)], [(14.8, 5), (14.8, 5.6)], [(14.8, 5.6), (16, 5.6)], [(16, 5.6), (16, 5)],
             [(16, 5), (19, 5)], [(19, 5), (19, 11)],
             [(19, 11), (16, 11)], [(16, 11), (16, 10.4)], [(16, 10.4), (14.8, 10.4)], [(14.8, 10.4), (14.8, 11)],
             [(14.8, 11), (9.2, 11)], [(9.2, 11), (9.2, 10.4)], [(9.2, 10.4), (8, 10.4)], [(8, 10.4), (8, 11)],
             [(8, 11), (5, 11)], [(5, 11), (5, 5)]]
    # pillars along the outer walls
    for cx, cy in [(4, 0.6), (11, 0.6), (18, 0.6), (6.5, 15.4), (13, 15.4), (20, 15.4),
                   (0.6, 8.5), (23.4, 6.5)]:
        segs += _rect(cx - 0.2, cy - 0.2, cx + 0.2, cy + 0.2)
    # an interior wall splitting the block into two rooms
    segs += [[(12, 5), (12, 11)]]
    return World(np.array(segs, dtype=float), "office")


def rounded_rectangle_path(start: Pose2, straight_a: float, straight_b: float, radius: float,
                           speed: float, extra: float = 0.0) -> PathCommand:
    """Counter-clockwise lap of a rounded rectangle starting mid-way along a long side.

    ``extra`` metres of the first straight are driven again after the lap so
    the end of the run overlaps its beginning.
    """
    w = speed / radius
    turn = (math.pi / 2) * radius / speed
    half = straight_a / 2
    cmds = [(speed, 0.0, half / speed), (speed, w, turn),
            (speed, 0.0, straight_b / speed), (speed, w, turn),
            (speed, 0.0, straight_a / speed), (speed, w, turn),
            (speed, 0.0, straight_b / speed), (speed, w, turn),
            (speed, 0.0, (half + extra) / speed)]
    return PathCommand(cmds, start)


def office_path(speed: float = 1.0) -> PathCommand:
    """About 61 m around the central block plus 5 m of overlap."""
    return rounded_rectangle_path(Pose2(12.0, 2.5, 0.0), 17.0, 8.0, 1.5, speed, extra=5.0)


def corridor_world(length: float = 18.0, width: float = 2.4) -> World:
    """A plain corridor closed at both ends: only the end walls constrain motion along it."""
    h = width / 2
    return World(np.array(_rect(0.0, -h, length, h)), "corridor")


def corridor_path(length: float = 18.0, speed: float = 0.8) -> PathCommand:
    """Down the corridor, a tight U-turn, and back."""
    r = 0.5
    run = length - 3.0
    start = Pose2(1.5, -r, 0.0)
    return PathCommand([(speed, 0.0, run / speed), (speed, speed / r, math.pi * r / speed),
                        (speed, 0.0, run / speed)], start)


def two_rooms_world() -> World:
    """Two closed rooms side by side sharing a double dividing wall (no door)."""
    segs = _rect(0, 0, 8, 8) + _rect(8.3, 0, 14.3, 6)
    # furniture so the rooms are not plain rectangles
    segs += _rect(1.0, 6.6, 2.5, 7.5) + _rect(10.5, 5.0, 11.5, 5.6)
    return World(np.array(segs, dtype=float), "two_rooms")


def two_rooms_path(room: str = "left", speed: float = 0.8) -> PathCommand:
    """Two laps of a loop inside one room, so the second lap revisits the first."""
    if room == "left":
        start, a, b = Pose2(4.0, 1.6, 0.0), 3.6, 2.8
    else:
        start, a, b = Pose2(11.3, 1.4, 0.0), 2.6, 1.6
    lap = rounded_rectangle_path(start, a, b, 0.7, speed)
    return PathCommand(lap.commands + lap.commands, start)


SCENARIOS = {
    "box": (box_world, box_path),
    "office": (office_world, office_path),
    "corridor": (corridor_world, corridor_path),
    "two_rooms": (two_rooms_world, two_rooms_path),
}


def scenario(name: str) -> tuple[World, PathCommand]:
    try:
        world_fn, path_fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return world_fn(), path_fn()
