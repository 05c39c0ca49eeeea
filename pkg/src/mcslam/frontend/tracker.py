"""Multi-Tracker: local-map bookkeeping around the Multi-Aligner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..configurable import Configurable, Slot
from ..geometry import PointCloud2, Pose2, voxel_decimate
from ..properties import Kind, PropertyContainer
from .aligner import AlignStats, DegenerateAlignment, MultiAligner
from .types import LocalMap, MeasurementPacket


class TrackerSlice(Configurable):
    """Integrates one cue of a measurement into the matching scene entry."""

    @property
    def cue(self) -> str:
        return self.param("cue")

    def merge(self, scene: PropertyContainer, packet: MeasurementPacket, pose_in_map: Pose2) -> None:
        raise NotImplementedError


class Lidar2DTrackerSlice(TrackerSlice):
    class_name = "Lidar2DTrackerSlice"
    PARAMS = {
        "cue": (Kind.STRING, "front_scan"),
        "resolution": (Kind.FLOAT, 0.05),
        "max_points": (Kind.INT, 20000),
    }

    def configure(self) -> None:
        self.resolution = self.param("resolution")
        self.max_points = self.param("max_points")

    def merge(self, scene, packet, pose_in_map):
        cue = self.cue
        if cue not in packet.cues:
            return
        incoming = packet.cues.get(cue, Kind.POINT_CLOUD_2).transformed(pose_in_map)
        if cue in scene:
            current = scene.get(cue, Kind.POINT_CLOUD_2)
            if len(current) >= self.max_points:
                return
            merged = current.concatenated(incoming)
        else:
            merged = incoming
        scene.put(cue, Kind.POINT_CLOUD_2, voxel_decimate(merged, self.resolution, self.max_points))


def merge(local_map: LocalMap, packet: MeasurementPacket, pose_in_map: Pose2,
          slices: dict[str, TrackerSlice] | list[TrackerSlice]) -> LocalMap:
    if not all(map(math.isfinite, pose_in_map)):
        raise ValueError("pose must be finite")
    for s in (slices.values() if isinstance(slices, dict) else slices):
        s.merge(local_map.scene, packet, pose_in_map)
    return local_map


def clip(local_map: LocalMap, pose_in_map: Pose2, radius: float) -> PropertyContainer:
    """Sub-scene of point-cloud cues within ``radius`` of the pose's position."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    out = PropertyContainer()
    center = pose_in_map.translation
    for prop in local_map.scene:
        if prop.kind is not Kind.POINT_CLOUD_2:
            continue
        cloud = prop.value
        d = cloud.points - center
        inside = np.einsum("ij,ij->i", d, d) <= radius * radius
        out.put(prop.name, Kind.POINT_CLOUD_2, cloud if inside.all() else cloud.subset(np.nonzero(inside)[0]))
    return out


def should_split(pose_in_map: Pose2, t_trans: float, t_rot: float) -> bool:
    return pose_in_map.norm() > t_trans or abs(pose_in_map.theta) > t_rot


class MapClipper(Configurable):
    class_name = "MapClipper"
    PARAMS = {"radius": (Kind.FLOAT, 10.0)}

    def clip(self, local_map: LocalMap, pose_in_map: Pose2) -> PropertyContainer:
        return clip(local_map, pose_in_map, self.param("radius"))


class LocalMapSplitter(Configurable):
    class_name = "LocalMapSplitter"
    PARAMS = {
        "t_trans": (Kind.FLOAT, 1.0),
        "t_rot": (Kind.FLOAT, 0.5),
    }

    def should_split(self, pose_in_map: Pose2) -> bool:
        return should_split(pose_in_map, self.param("t_trans"), self.param("t_rot"))


@dataclass
class TrackerEvent:
    """Result of processing one packet.

    ``finished_map`` and ``closing_relative`` are set when the packet
    triggered a split: ``closing_relative`` is the new map's origin in the
    frame of the finished one.
    """

    step: int
    timestamp: float
    local_map_id: int
    pose_in_map: Pose2
    started_map: Optional[LocalMap] = None
    finished_map: Optional[LocalMap] = None
    closing_relative: Optional[Pose2] = None
    degenerate: bool = False
    stats: Optional[AlignStats] = None


class MultiTracker(Configurable):
    class_name = "MultiTracker"
    PARAMS = {"odometry_cue": (Kind.STRING, "odom_delta")}
    SLOTS = {
        "aligner": Slot(MultiAligner),
        "slices": Slot(TrackerSlice, many=True),
        "clipper": Slot(MapClipper),
        "splitter": Slot(LocalMapSplitter),
    }

    def configure(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.local_map: Optional[LocalMap] = None
        self.pose_in_map = Pose2()
        self.step = 0
        self._next_id = 0

    def _new_map(self, origin: Pose2) -> LocalMap:
        m = LocalMap(self._next_id, origin)
        self._next_id += 1
        return m

    def track(self, packet: MeasurementPacket) -> TrackerEvent:
        slices = self.slot("slices")
        step = self.step
        self.step += 1
        if self.local_map is None:
            self.local_map = self._new_map(Pose2())
            self.pose_in_map = Pose2()
            merge(self.local_map, packet, self.pose_in_map, slices)
            self.local_map.trajectory.append((packet.timestamp, self.pose_in_map))
            return TrackerEvent(step, packet.timestamp, self.local_map.id, self.pose_in_map,
                                started_map=self.local_map)

        odom_cue = self.param("odometry_cue")
        delta = packet.cues.get(odom_cue, Kind.POSE2) if odom_cue in packet.cues else Pose2()
        guess = self.pose_in_map.compose(delta)
        fixed = self.slot("clipper").clip(self.local_map, guess)
        degenerate = False
        stats = None
        try:
            pose, stats = self.slot("aligner").align(fixed, packet, guess)
        except DegenerateAlignment:
            pose, degenerate = guess, True
        self.pose_in_map = pose
        if not degenerate:
            merge(self.local_map, packet, pose, slices)
        self.local_map.trajectory.append((packet.timestamp, pose))
        event = TrackerEvent(step, packet.timestamp, self.local_map.id, pose, degenerate=degenerate, stats=stats)

        if self.slot("splitter").should_split(pose):
            finished = self.local_map
            fresh = self._new_map(finished.origin.compose(pose))
            merge(fresh, packet, Pose2(), slices)
            fresh.trajectory.append((packet.timestamp, Pose2()))
            self.local_map = fresh
            self.pose_in_map = Pose2()
            event.finished_map = finished
            event.closing_relative = pose
            event.started_map = fresh
            event.local_map_id = fresh.id
            event.pose_in_map = Pose2()
        return event


def track(tracker: MultiTracker, packet: MeasurementPacket) -> TrackerEvent:
    return tracker.track(packet)
