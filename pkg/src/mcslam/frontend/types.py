from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..geometry import PointCloud2, Pose2
from ..properties import PropertyContainer


@dataclass
class LaserScan:
    timestamp: float
    topic: str
    angle_min: float
    angle_increment: float
    range_min: float
    range_max: float
    ranges: np.ndarray  # non-finite entries are invalid beams

    def __post_init__(self) -> None:
        self.ranges = np.asarray(self.ranges, dtype=float)
        if not self.angle_increment > 0:
            raise ValueError("angle_increment must be positive")
        if not self.range_min < self.range_max:
            raise ValueError("range_min must be below range_max")

    def to_record(self) -> dict:
        return {
            "type": "laser_scan",
            "topic": self.topic,
            "t": self.timestamp,
            "angle_min": self.angle_min,
            "angle_increment": self.angle_increment,
            "range_min": self.range_min,
            "range_max": self.range_max,
            # misses are written as null to stay within strict JSON
            "ranges": [r if math.isfinite(r) else None for r in self.ranges.tolist()],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LaserScan":
        ranges = np.array([math.inf if r is None else r for r in rec["ranges"]], dtype=float)
        return cls(float(rec["t"]), rec["topic"], float(rec["angle_min"]), float(rec["angle_increment"]),
                   float(rec["range_min"]), float(rec["range_max"]), ranges)


@dataclass
class OdometryReading:
    timestamp: float
    pose: Pose2

    def to_record(self) -> dict:
        return {"type": "odometry", "t": self.timestamp, "x": self.pose.x, "y": self.pose.y,
                "theta": self.pose.theta}

    @classmethod
    def from_record(cls, rec: dict) -> "OdometryReading":
        return cls(float(rec["t"]), Pose2(rec["x"], rec["y"], rec["theta"]))


@dataclass
class SensorExtrinsics:
    topic: str
    sensor_in_base: Pose2


@dataclass
class MeasurementPacket:
    timestamp: float
    cues: PropertyContainer = field(default_factory=PropertyContainer)


@dataclass
class LocalMap:
    id: int
    origin: Pose2
    scene: PropertyContainer = field(default_factory=PropertyContainer)
    trajectory: list[tuple[float, Pose2]] = field(default_factory=list)

    def cloud(self, cue: str) -> Optional[PointCloud2]:
        return self.scene.get(cue) if cue in self.scene else None

    def point_count(self) -> int:
        return sum(len(p.value) for p in self.scene if isinstance(p.value, PointCloud2))
