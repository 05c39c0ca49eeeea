"""Config-driven processing pipeline: packet assembly, presets and file outputs."""

from __future__ import annotations

import bisect
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional

import numpy as np

from .configurable import Configurable, Registry, Slot, instantiate, write_config
from .evaluation import MetricReport, Trajectory, evaluate, read_tum, write_tum
from .frontend import (
    IterativeSolver,
    LaserScan,
    LaserScanPreprocessor,
    LocalMap,
    LocalMapSplitter,
    Lidar2DAlignerSlice,
    Lidar2DTrackerSlice,
    MapClipper,
    MeasurementPacket,
    MultiAligner,
    MultiTracker,
    OdometryAlignerSlice,
    OdometryPreprocessor,
    OdometryReading,
    Preprocessor,
    TrackerEvent,
)
from .geometry import Pose2, voxel_keep_first, wrap_angle
from .graph_slam import (
    GlobalOptimizer,
    GraphSLAM,
    LoopValidator,
    MetricLoopDetector,
    serialize_graph,
)
from .properties import Kind, ParseError, PropertyContainer


class PipelineError(RuntimeError):
    """A module error raised while processing a given packet."""

    def __init__(self, packet_index: int, cause: BaseException):
        super().__init__(f"packet {packet_index}: {type(cause).__name__}: {cause}")
        self.packet_index = packet_index
        self.cause = cause


# -- dataset ------------------------------------------------------------------


def read_dataset(text: str) -> tuple[list[LaserScan], list[OdometryReading]]:
    scans, odom = [], []
    last_t = -math.inf
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "laser_scan":
                item = LaserScan.from_record(rec)
                scans.append(item)
            elif kind == "odometry":
                item = OdometryReading.from_record(rec)
                odom.append(item)
            else:
                raise ParseError(f"unknown record type {kind!r}")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"dataset line {lineno}: {exc}") from exc
        if item.timestamp < last_t:
            raise ParseError(f"dataset line {lineno}: timestamps out of order")
        last_t = item.timestamp
    return scans, odom


def interpolate_odometry(readings: list[OdometryReading], times: list[float], t: float,
                         tolerance: float) -> Optional[OdometryReading]:
    """Odometry at time ``t``: linear in position, shortest arc in angle.

    Outside the recorded span the nearest reading is used if it lies within
    ``tolerance``; otherwise None.
    """
    if not readings:
        return None
    i = bisect.bisect_left(times, t)
    if i < len(times) and times[i] == t:
        return readings[i]
    if i == 0 or i == len(times):
        j = 0 if i == 0 else len(times) - 1
        return OdometryReading(t, readings[j].pose) if abs(times[j] - t) <= tolerance else None
    a, b = readings[i - 1], readings[i]
    s = (t - a.timestamp) / (b.timestamp - a.timestamp)
    dth = wrap_angle(b.pose.theta - a.pose.theta)
    pose = Pose2(a.pose.x + s * (b.pose.x - a.pose.x), a.pose.y + s * (b.pose.y - a.pose.y), a.pose.theta + s * dth)
    return OdometryReading(t, pose)


# -- pipeline -----------------------------------------------------------------


class Pipeline(Configurable):
    """Root module: pre-processors, the tracker and an optional graph back-end."""

    class_name = "Pipeline"
    PARAMS = {
        "primary_topic": (Kind.STRING, "front_scan"),
        "sync_window": (Kind.FLOAT, 0.05),
    }
    SLOTS = {
        "preprocessors": Slot(Preprocessor, many=True),
        "tracker": Slot(MultiTracker),
        "graph_slam": Slot(GraphSLAM, optional=True),
    }

    def configure(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.local_maps: list[LocalMap] = []
        self.events: list[TrackerEvent] = []
        for name in ("tracker", "graph_slam"):
            mod = self.params.get(name)
            if mod is not None:
                mod.reset()

    def packets(self, scans: list[LaserScan], odometry: list[OdometryReading]) -> Iterator[MeasurementPacket]:
        """Bundle measurements per primary-scan timestamp.

        Other scan topics contribute their scan nearest in time within the
        sync window; odometry is interpolated to the primary scan time and
        enters as the delta since the previous packet.
        """
        primary = self.param("primary_topic")
        window = self.param("sync_window")
        pre = list(self.slot("preprocessors").values())
        scan_pre = {p.topic: p for p in pre if isinstance(p, LaserScanPreprocessor)}
        odom_pre = [p for p in pre if isinstance(p, OdometryPreprocessor)]
        by_topic: dict[str, list[LaserScan]] = {}
        for s in scans:
            by_topic.setdefault(s.topic, []).append(s)
        stamps = {k: [s.timestamp for s in v] for k, v in by_topic.items()}
        odom_t = [o.timestamp for o in odometry]
        prev_odom: Optional[OdometryReading] = None
        for scan in by_topic.get(primary, []):
            t = scan.timestamp
            cues = PropertyContainer()
            for topic, proc in scan_pre.items():
                if topic == primary:
                    chosen = scan
                else:
                    chosen = _nearest(by_topic.get(topic, []), stamps.get(topic, []), t, window)
                if chosen is not None:
                    cues.put(proc.cue, Kind.POINT_CLOUD_2, proc.process(chosen))
            if odom_pre:
                cur = interpolate_odometry(odometry, odom_t, t, window)
                if cur is not None:
                    for proc in odom_pre:
                        delta = proc.process(prev_odom, cur)
                        if delta is not None:
                            cues.put(proc.cue, Kind.POSE2, delta)
                    prev_odom = cur
            yield MeasurementPacket(t, cues)

    def process(self, packet: MeasurementPacket) -> TrackerEvent:
        event = self.slot("tracker").track(packet)
        self.events.append(event)
        if event.started_map is not None:
            self.local_maps.append(event.started_map)
        graph = self.params.get("graph_slam")
        if graph is not None:
            graph.on_tracker_event(event)
        return event

    def finish(self) -> None:
        graph = self.params.get("graph_slam")
        if graph is not None:
            graph.finish()

    @property
    def graph(self):
        g = self.params.get("graph_slam")
        return g.graph if g is not None else None

    def trajectory(self) -> Trajectory:
        """World-frame pose per packet: local-map origin composed with the local pose."""
        samples: list[tuple[float, Pose2]] = []
        last = -math.inf
        for lm in self.local_maps:
            for t, p in lm.trajectory:
                if t > last:
                    samples.append((t, lm.origin.compose(p)))
                    last = t
        return Trajectory(samples)


def _nearest(items: list, stamps: list[float], t: float, window: float):
    if not items:
        return None
    i = bisect.bisect_left(stamps, t)
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(stamps) and (best is None or abs(stamps[j] - t) < abs(stamps[best] - t)):
            best = j
    return items[best] if abs(stamps[best] - t) <= window else None


# -- registry and presets ----------------------------------------------------

BUILTIN_CLASSES = (
    Pipeline,
    LaserScanPreprocessor,
    OdometryPreprocessor,
    IterativeSolver,
    Lidar2DAlignerSlice,
    OdometryAlignerSlice,
    MultiAligner,
    Lidar2DTrackerSlice,
    MapClipper,
    LocalMapSplitter,
    MultiTracker,
    MetricLoopDetector,
    LoopValidator,
    GlobalOptimizer,
    GraphSLAM,
)


def builtin_registry() -> Registry:
    reg = Registry()
    for cls in BUILTIN_CLASSES:
        reg.register(cls)
    return reg


SCAN_TOPICS = {"front_scan": Pose2(0.2, 0.0, 0.0), "rear_scan": Pose2(-0.2, 0.0, math.pi)}
PRESETS = ("lidar-single", "lidar-dual", "lidar-dual-odom")


def make_pipeline(scan_topics: dict[str, Pose2], odometry: bool, graph: bool = True,
                  align_iterations: int = 10, normal_spacing_factor: float = 30.0, normal_k: int = 8) -> Pipeline:
    pre = {f"pre_{t}": LaserScanPreprocessor(topic=t, cue=t, sensor_in_base=p, normal_k=normal_k,
                                             normal_spacing_factor=normal_spacing_factor)
           for t, p in scan_topics.items()}
    aligner_slices = {f"align_{t}": Lidar2DAlignerSlice(cue=t) for t in scan_topics}
    tracker_slices = {f"merge_{t}": Lidar2DTrackerSlice(cue=t) for t in scan_topics}
    if odometry:
        pre["pre_odometry"] = OdometryPreprocessor()
        aligner_slices["align_odometry"] = OdometryAlignerSlice()
    aligner = MultiAligner(iterations=align_iterations, solver=IterativeSolver(max_iterations=3),
                           slices=aligner_slices)
    tracker = MultiTracker(aligner=aligner, slices=tracker_slices, clipper=MapClipper(), splitter=LocalMapSplitter())
    backend = None
    if graph:
        loop_aligner = MultiAligner(
            iterations=15,
            solver=IterativeSolver(max_iterations=5),
            slices={f"loop_{t}": Lidar2DAlignerSlice(cue=t, gate_start=1.0) for t in scan_topics},
        )
        backend = GraphSLAM(
            detector=MetricLoopDetector(),
            validator=LoopValidator(aligner=loop_aligner),
            optimizer=GlobalOptimizer(solver=IterativeSolver(max_iterations=20)),
        )
    return Pipeline(primary_topic=next(iter(scan_topics)), preprocessors=pre, tracker=tracker, graph_slam=backend)


def preset(name: str) -> Pipeline:
    if name == "lidar-single":
        return make_pipeline({"front_scan": SCAN_TOPICS["front_scan"]}, odometry=False)
    if name == "lidar-dual":
        return make_pipeline(SCAN_TOPICS, odometry=False)
    if name == "lidar-dual-odom":
        return make_pipeline(SCAN_TOPICS, odometry=True)
    raise ValueError(f"unknown preset {name!r}; choose from {list(PRESETS)}")


def preset_config(name: str) -> str:
    return write_config(preset(name))


def load_pipeline(config_text: str, registry: Optional[Registry] = None) -> Pipeline:
    root = instantiate(config_text, registry or builtin_registry())
    if not isinstance(root, Pipeline):
        raise TypeError(f"config root must be a Pipeline, got {type(root).__name__}")
    return root


# -- running ------------------------------------------------------------------


@dataclass
class RunResult:
    trajectory: Trajectory
    pipeline: Pipeline
    packets: int
    processing_time: float
    report: Optional[MetricReport] = None
    degenerate_steps: int = 0

    @property
    def frame_rate(self) -> float:
        return self.packets / self.processing_time if self.processing_time > 0 else 0.0


def run(pipeline: Pipeline, dataset_text: str, ground_truth: Optional[Trajectory] = None,
        on_packet: Optional[Callable[[int, Pipeline], None]] = None, delta: int = 1) -> RunResult:
    """Stream a dataset through a pipeline; times pre-processing and tracking."""
    scans, odom = read_dataset(dataset_text)
    pipeline.reset()
    n = 0
    elapsed = 0.0
    start = time.perf_counter()
    for packet in pipeline.packets(scans, odom):
        try:
            pipeline.process(packet)
        except Exception as exc:
            raise PipelineError(n, exc) from exc
        n += 1
        if on_packet is not None:
            elapsed += time.perf_counter() - start
            on_packet(n, pipeline)
            start = time.perf_counter()
    try:
        pipeline.finish()
    except Exception as exc:
        raise PipelineError(n, exc) from exc
    elapsed += time.perf_counter() - start
    traj = pipeline.trajectory()
    result = RunResult(traj, pipeline, n, elapsed, degenerate_steps=sum(e.degenerate for e in pipeline.events))
    if ground_truth is not None:
        result.report = evaluate(ground_truth, traj, delta=delta, frame_rate=result.frame_rate)
    return result


def run_pipeline(config_text: str, dataset_text: str, traj_path: Optional[str] = None,
                 graph_path: Optional[str] = None, map_path: Optional[str] = None,
                 gt_text: Optional[str] = None, save_graph_every: int = 0,
                 registry: Optional[Registry] = None) -> RunResult:
    """Run a config on a dataset and write the requested output files."""
    pipeline = load_pipeline(config_text, registry)
    gt = read_tum(gt_text) if gt_text is not None else None
    hook = None
    if save_graph_every > 0:
        out_dir = os.path.dirname(os.path.abspath(graph_path)) if graph_path else os.getcwd()

        def hook(step: int, p: Pipeline) -> None:
            if step % save_graph_every == 0 and p.graph is not None:
                _write(os.path.join(out_dir, f"graph_{step}.json"), serialize_graph(p.graph))

    result = run(pipeline, dataset_text, gt, hook)
    if traj_path:
        _write(traj_path, write_tum(result.trajectory))
    if graph_path and pipeline.graph is not None:
        _write(graph_path, serialize_graph(pipeline.graph))
    if map_path:
        _write(map_path, render_svg(pipeline, result.trajectory))
    return result


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def render_svg(pipeline: Pipeline, trajectory: Trajectory, size: int = 800, margin: float = 0.5,
               resolution: float = 0.05) -> str:
    """Map scenes as points in world frame and the trajectory as a polyline.

    Overlapping local maps are thinned to one point per ``resolution`` cell.
    """
    pts = []
    for lm in pipeline.local_maps:
        for prop in lm.scene:
            if prop.kind is Kind.POINT_CLOUD_2 and len(prop.value):
                pts.append(lm.origin.transform_points(prop.value.points))
    cloud = np.concatenate(pts) if pts else np.zeros((0, 2))
    cloud = cloud[voxel_keep_first(cloud, resolution)]
    path = trajectory.positions()
    allp = np.concatenate([cloud, path]) if len(path) else cloud
    if len(allp) == 0:
        allp = np.zeros((1, 2))
    lo = allp.min(axis=0) - margin
    hi = allp.max(axis=0) + margin
    scale = size / float(max(hi - lo))
    w, h = (hi - lo) * scale

    def xy(p):
        return (p[0] - lo[0]) * scale, (hi[1] - p[1]) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0f}" height="{h:.0f}" '
           f'viewBox="0 0 {w:.1f} {h:.1f}">',
           f'<rect width="{w:.1f}" height="{h:.1f}" fill="white"/>',
           '<g fill="black">']
    for p in cloud:
        x, y = xy(p)
        out.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1"/>')
    out.append("</g>")
    if len(path) > 1:
        poly = " ".join("{:.1f},{:.1f}".format(*xy(p)) for p in path)
        out.append(f'<polyline points="{poly}" fill="none" stroke="red" stroke-width="1.5"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
