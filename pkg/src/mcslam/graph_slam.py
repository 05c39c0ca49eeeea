"""Pose graph over local maps: loop closing, global optimization, graph files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .configurable import Configurable, Slot
from .frontend.aligner import DegenerateAlignment, IterativeSolver, MultiAligner
from .frontend.types import LocalMap, MeasurementPacket
from .geometry import CorrespondenceFinder, PointCloud2, Pose2
from .properties import (
    DanglingReference,
    Kind,
    ParseError,
    PropertyContainer,
    decode_field,
    encode_scalar,
)
from .solver import Huber, RelativePoseFactor, Variable


@dataclass
class GraphNode:
    id: int
    pose: Pose2
    local_map: LocalMap


@dataclass
class GraphEdge:
    from_id: int
    to_id: int
    measurement: Pose2
    information: np.ndarray
    kind: str = "odometry"

    def __post_init__(self) -> None:
        if self.from_id == self.to_id:
            raise ValueError("edge endpoints must differ")
        self.information = np.asarray(self.information, dtype=float).reshape(3, 3)


@dataclass
class LoopResult:
    relative: Pose2
    chi2: float
    inlier_ratio: float
    inliers: int
    mean_residual: float
    accepted: bool
    reason: str = ""


@dataclass
class LoopCandidate:
    query_id: int
    match_id: int
    initial_guess: Pose2
    result: Optional[LoopResult] = None


class PoseGraph:
    def __init__(self) -> None:
        self.nodes: dict[int, GraphNode] = {}
        self.edges: list[GraphEdge] = []

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def last_id(self) -> Optional[int]:
        return next(reversed(self.nodes)) if self.nodes else None

    def add_node(self, node: GraphNode) -> GraphNode:
        if self.nodes and node.id <= self.last_id:
            raise ValueError("node ids must increase with creation order")
        self.nodes[node.id] = node
        node.local_map.origin = node.pose
        return node

    def add_edge(self, edge: GraphEdge) -> GraphEdge:
        for nid in (edge.from_id, edge.to_id):
            if nid not in self.nodes:
                raise DanglingReference(f"edge references missing node {nid}")
        self.edges.append(edge)
        return edge

    def loop_edges(self) -> list[GraphEdge]:
        return [e for e in self.edges if e.kind == "loop"]


DEFAULT_ODOMETRY_INFORMATION = (100.0, 100.0, 400.0)


def add_local_map(graph: PoseGraph, local_map: LocalMap, closing_relative: Optional[Pose2] = None,
                  information=DEFAULT_ODOMETRY_INFORMATION) -> GraphNode:
    """Append a node for ``local_map``; the first node becomes the gauge at identity."""
    if not graph.nodes:
        return graph.add_node(GraphNode(local_map.id, Pose2(), local_map))
    if closing_relative is None:
        raise ValueError("a relative pose from the previous node is required")
    prev = graph.nodes[graph.last_id]
    node = graph.add_node(GraphNode(local_map.id, prev.pose.compose(closing_relative), local_map))
    graph.add_edge(GraphEdge(prev.id, node.id, closing_relative, np.diag(information), "odometry"))
    return node


def detect_loops(graph: PoseGraph, query_id: int, search_radius: float = 3.0,
                 exclude_last: int = 5) -> list[LoopCandidate]:
    """Earlier nodes within ``search_radius`` of the query, skipping its ``exclude_last`` predecessors."""
    query = graph.nodes[query_id]
    out = []
    for node in graph.nodes.values():
        if node.id >= query_id - exclude_last:
            continue
        if math.hypot(node.pose.x - query.pose.x, node.pose.y - query.pose.y) <= search_radius:
            out.append(LoopCandidate(query_id, node.id, node.pose.between(query.pose)))
    return out


def scene_overlap(fixed: PropertyContainer, moving: PropertyContainer, relative: Pose2,
                  gate: float, normal_gate: float) -> tuple[float, int, float]:
    """(inlier ratio, inlier count, mean inlier distance) of ``moving`` placed at ``relative`` in ``fixed``."""
    total = inliers = 0
    dist_sum = 0.0
    for prop in moving:
        if prop.kind is not Kind.POINT_CLOUD_2:
            continue
        total += len(prop.value)
        if prop.name not in fixed:
            continue
        corr = CorrespondenceFinder(fixed.get(prop.name)).find(prop.value, relative, gate, normal_gate)
        inliers += len(corr)
        dist_sum += float(corr.distance.sum())
    ratio = inliers / total if total else 0.0
    return ratio, inliers, (dist_sum / inliers if inliers else math.inf)


class MetricLoopDetector(Configurable):
    class_name = "MetricLoopDetector"
    PARAMS = {
        "search_radius": (Kind.FLOAT, 3.0),
        "exclude_last": (Kind.INT, 5),
    }

    def detect(self, graph: PoseGraph, query_id: int) -> list[LoopCandidate]:
        return detect_loops(graph, query_id, self.param("search_radius"), self.param("exclude_last"))


class LoopValidator(Configurable):
    """Re-registers two local maps and checks the result against thresholds."""

    class_name = "LoopValidator"
    PARAMS = {
        "min_inlier_ratio": (Kind.FLOAT, 0.5),
        "max_mean_residual": (Kind.FLOAT, 0.1),
        "max_correction_translation": (Kind.FLOAT, 2.0),
        "max_correction_rotation": (Kind.FLOAT, 1.0),
        "inlier_gate": (Kind.FLOAT, 0.2),
        "normal_gate": (Kind.FLOAT, 0.7),
    }
    SLOTS = {"aligner": Slot(MultiAligner)}

    def measure(self, fixed: PropertyContainer, moving: PropertyContainer, relative: Pose2):
        return scene_overlap(fixed, moving, relative, self.param("inlier_gate"), self.param("normal_gate"))

    def judge(self, ratio: float, residual: float, correction: Pose2) -> str:
        """Empty string when acceptable, otherwise the failed check."""
        if ratio < self.param("min_inlier_ratio"):
            return "inlier_ratio"
        if not residual <= self.param("max_mean_residual"):
            return "residual"
        if (correction.norm() > self.param("max_correction_translation")
                or abs(correction.theta) > self.param("max_correction_rotation")):
            return "correction"
        return ""

    def validate(self, candidate: LoopCandidate, graph: PoseGraph) -> LoopResult:
        fixed = graph.nodes[candidate.match_id].local_map.scene
        moving = graph.nodes[candidate.query_id].local_map.scene
        packet = MeasurementPacket(0.0, moving)
        try:
            rel, stats = self.slot("aligner").align(fixed, packet, candidate.initial_guess)
        except DegenerateAlignment:
            # too little overlap to align is reported as such; "degenerate" means overlap without constraint
            ratio, inliers, residual = self.measure(fixed, moving, candidate.initial_guess)
            reason = "inlier_ratio" if ratio < self.param("min_inlier_ratio") else "degenerate"
            res = LoopResult(candidate.initial_guess, math.inf, ratio, inliers, residual, False, reason)
            candidate.result = res
            return res
        ratio, inliers, residual = self.measure(fixed, moving, rel)
        reason = self.judge(ratio, residual, candidate.initial_guess.between(rel))
        res = LoopResult(rel, stats.chi2, ratio, inliers, residual, not reason, reason)
        candidate.result = res
        return res


def validate_loop(candidate: LoopCandidate, graph: PoseGraph, validator: LoopValidator) -> LoopResult:
    return validator.validate(candidate, graph)


class GlobalOptimizer(Configurable):
    class_name = "GlobalOptimizer"
    PARAMS = {"huber_delta": (Kind.FLOAT, 1.0)}
    SLOTS = {"solver": Slot(IterativeSolver)}

    def optimize(self, graph: PoseGraph):
        return optimize(graph, self.slot("solver"), self.param("huber_delta"))


def optimize(graph: PoseGraph, solver: IterativeSolver, huber_delta: float = 1.0):
    """Optimize all node poses with the first node held fixed; returns solver stats."""
    if not graph.nodes:
        raise ValueError("empty graph")
    first = next(iter(graph.nodes))
    variables = [Variable(n.id, n.pose, fixed=(n.id == first)) for n in graph.nodes.values()]
    kernel = Huber(huber_delta)
    factors = [RelativePoseFactor(e.from_id, e.to_id, e.measurement, e.information, kernel) for e in graph.edges]
    est, stats = solver.solve(variables, factors)
    for nid, node in graph.nodes.items():
        node.pose = est[nid]
        node.local_map.origin = node.pose
    return stats


class GraphSLAM(Configurable):
    """Arranges local maps in a pose graph, closes loops and optimizes."""

    class_name = "GraphSLAM"
    PARAMS = {
        "odometry_information": (Kind.FLOAT_VECTOR, DEFAULT_ODOMETRY_INFORMATION),
        "loop_inliers_per_unit": (Kind.FLOAT, 100.0),
        "loop_scale_min": (Kind.FLOAT, 0.1),
        "loop_scale_max": (Kind.FLOAT, 10.0),
    }
    SLOTS = {
        "detector": Slot(MetricLoopDetector),
        "validator": Slot(LoopValidator),
        "optimizer": Slot(GlobalOptimizer),
    }

    def configure(self) -> None:
        self.reset()

    def reset(self) -> None:
        self.graph = PoseGraph()
        self.candidates: list[LoopCandidate] = []

    def add_local_map(self, local_map: LocalMap, closing_relative: Optional[Pose2] = None) -> GraphNode:
        return add_local_map(self.graph, local_map, closing_relative, self.param("odometry_information"))

    def loop_information(self, inliers: int) -> np.ndarray:
        scale = inliers / self.param("loop_inliers_per_unit")
        scale = min(max(scale, self.param("loop_scale_min")), self.param("loop_scale_max"))
        return np.diag(self.param("odometry_information")) * scale

    def close_loops(self, query_id: int) -> int:
        """Detect and validate loops for one node; optimize when any is accepted."""
        accepted = 0
        for cand in self.slot("detector").detect(self.graph, query_id):
            res = self.slot("validator").validate(cand, self.graph)
            self.candidates.append(cand)
            if res.accepted:
                self.graph.add_edge(GraphEdge(cand.match_id, cand.query_id, res.relative,
                                              self.loop_information(res.inliers), "loop"))
                accepted += 1
        if accepted:
            self.optimize()
        return accepted

    def optimize(self):
        return self.slot("optimizer").optimize(self.graph)

    def on_tracker_event(self, event) -> None:
        if not self.graph.nodes and event.started_map is not None and event.finished_map is None:
            self.add_local_map(event.started_map)
            return
        if event.finished_map is not None:
            self.close_loops(event.finished_map.id)
            self.add_local_map(event.started_map, event.closing_relative)

    def finish(self) -> None:
        if self.graph.nodes:
            self.close_loops(self.graph.last_id)
            if len(self.graph.nodes) > 1:
                self.optimize()


# -- graph files -------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def serialize_graph(graph: PoseGraph) -> str:
    lines = [_dumps({"type": "graph", "nodes": len(graph.nodes), "edges": len(graph.edges)})]
    for node in graph.nodes.values():
        lm = node.local_map
        scene = {p.name: {"kind": p.kind.value, "value": encode_scalar(p.kind, p.value)} for p in lm.scene}
        summary = {p.name: len(p.value) for p in lm.scene if p.kind is Kind.POINT_CLOUD_2}
        lines.append(_dumps({
            "type": "node",
            "id": node.id,
            "pose": [node.pose.x, node.pose.y, node.pose.theta],
            "summary": summary,
            "scene": scene,
            "trajectory": [[t, p.x, p.y, p.theta] for t, p in lm.trajectory],
        }))
    for e in graph.edges:
        lines.append(_dumps({
            "type": "edge",
            "from": e.from_id,
            "to": e.to_id,
            "kind": e.kind,
            "measurement": [e.measurement.x, e.measurement.y, e.measurement.theta],
            "information": e.information.tolist(),
        }))
    return "\n".join(lines) + "\n"


def deserialize_graph(text: str) -> PoseGraph:
    graph = PoseGraph()
    header_seen = False

    def no_refs(ref):
        raise ParseError("graph scenes cannot hold references")

    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: {exc.msg}") from exc
        kind = obj.get("type") if isinstance(obj, dict) else None
        try:
            if kind == "graph":
                header_seen = True
            elif kind == "node":
                scene = PropertyContainer()
                for name, entry in obj["scene"].items():
                    k, v = decode_field(entry["value"], no_refs)
                    declared = Kind(entry["kind"])
                    if k is not declared:
                        raise ParseError(f"line {lineno}: scene entry {name!r} is not {declared.value}")
                    scene.put(name, k, v)
                pose = Pose2(*obj["pose"])
                traj = [(float(t), Pose2(x, y, th)) for t, x, y, th in obj["trajectory"]]
                lm = LocalMap(int(obj["id"]), pose, scene, traj)
                graph.add_node(GraphNode(int(obj["id"]), pose, lm))
            elif kind == "edge":
                graph.add_edge(GraphEdge(int(obj["from"]), int(obj["to"]), Pose2(*obj["measurement"]),
                                         np.array(obj["information"], dtype=float), obj["kind"]))
            else:
                raise ParseError(f"line {lineno}: unknown record type {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"line {lineno}: {exc}") from exc
    if not header_seen:
        raise ParseError("missing graph header")
    return graph


def graphs_equal(a: PoseGraph, b: PoseGraph) -> bool:
    return serialize_graph(a) == serialize_graph(b)
