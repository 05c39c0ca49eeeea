"""Raw data pre-processors: turn sensor readings into measurement cues."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from ..configurable import Configurable
from ..geometry import PointCloud2, Pose2, estimate_normals, voxel_decimate
from ..properties import Kind
from .types import LaserScan, OdometryReading, SensorExtrinsics


def scan_to_points(scan: LaserScan, sensor_in_base: Pose2) -> np.ndarray:
    r = scan.ranges
    angles = scan.angle_min + scan.angle_increment * np.arange(len(r))
    valid = np.isfinite(r) & (r >= scan.range_min) & (r <= scan.range_max)
    r, a = r[valid], angles[valid]
    local = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    return sensor_in_base.transform_points(local)


def preprocess_scan(
    scan: LaserScan,
    extrinsics: SensorExtrinsics | Pose2,
    voxel_resolution: float = 0.025,
    normal_k: int = 8,
    normal_spacing_factor: float = 10.0,
) -> PointCloud2:
    """Polar ranges -> base-frame points with normals, voxel-decimated."""
    sensor = extrinsics.sensor_in_base if isinstance(extrinsics, SensorExtrinsics) else extrinsics
    pts = scan_to_points(scan, sensor)
    cloud = estimate_normals(PointCloud2(pts, check=False), k=normal_k, spacing_factor=normal_spacing_factor)
    if voxel_resolution > 0:
        cloud = voxel_decimate(cloud, voxel_resolution)
    return cloud


def preprocess_odometry(prev: OdometryReading, cur: OdometryReading) -> Pose2:
    if cur.timestamp < prev.timestamp:
        raise ValueError("odometry readings out of order")
    return prev.pose.between(cur.pose)


class Preprocessor(Configurable):
    """A module producing one named cue of the measurement container."""

    cue_kind: Kind = Kind.POINT_CLOUD_2

    @property
    def cue(self) -> str:
        return self.param("cue")


class LaserScanPreprocessor(Preprocessor):
    class_name = "LaserScanPreprocessor"
    PARAMS = {
        "topic": (Kind.STRING, "front_scan"),
        "cue": (Kind.STRING, "front_scan"),
        "sensor_in_base": (Kind.POSE2, Pose2()),
        "voxel_resolution": (Kind.FLOAT, 0.025),
        "normal_k": (Kind.INT, 8),
        # beam spacing grows with range, so far walls need a wider neighbourhood
        "normal_spacing_factor": (Kind.FLOAT, 10.0),
    }

    def configure(self) -> None:
        self.topic = self.param("topic")
        self.extrinsics = SensorExtrinsics(self.topic, self.param("sensor_in_base"))
        self.voxel_resolution = self.param("voxel_resolution")
        self.normal_k = self.param("normal_k")
        self.normal_spacing_factor = self.param("normal_spacing_factor")

    def process(self, scan: LaserScan) -> PointCloud2:
        return preprocess_scan(scan, self.extrinsics, self.voxel_resolution, self.normal_k, self.normal_spacing_factor)


class OdometryPreprocessor(Preprocessor):
    class_name = "OdometryPreprocessor"
    cue_kind = Kind.POSE2
    PARAMS = {"cue": (Kind.STRING, "odom_delta")}

    def process(self, prev: Optional[OdometryReading], cur: OdometryReading) -> Optional[Pose2]:
        if prev is None:
            return None
        return preprocess_odometry(prev, cur)
