"""Trajectory files and the ATE / RPE metrics."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .frontend.aligner import DegenerateAlignment
from .geometry import Pose2


class NoPairs(ValueError):
    pass


@dataclass
class Trajectory:
    samples: list[tuple[float, Pose2]] = field(default_factory=list)

    def __post_init__(self) -> None:
        ts = [t for t, _ in self.samples]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def timestamps(self) -> list[float]:
        return [t for t, _ in self.samples]

    def positions(self) -> np.ndarray:
        return np.array([[p.x, p.y] for _, p in self.samples], dtype=float).reshape(-1, 2)

    def length(self) -> float:
        p = self.positions()
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0


def format_tum_line(t: float, pose: Pose2) -> str:
    h = pose.theta / 2
    return f"{t:.6f} {pose.x:.9f} {pose.y:.9f} 0 0 0 {math.sin(h):.9f} {math.cos(h):.9f}"


def write_tum(samples: Iterable[tuple[float, Pose2]]) -> str:
    return "".join(format_tum_line(t, p) + "\n" for t, p in samples)


def read_tum(text: str) -> Trajectory:
    """Parse TUM lines (``t x y z qx qy qz qw``); only the yaw of the quaternion is kept."""
    samples = []
    for lineno, line in enumerate(text.split("\n"), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"line {lineno}: expected 8 fields, got {len(parts)}")
        t, x, y, _, qx, qy, qz, qw = map(float, parts)
        theta = math.atan2(2 * (qw * qz + qx * qy), 1 - 2 * (qy * qy + qz * qz))
        samples.append((t, Pose2(x, y, theta)))
    return Trajectory(samples)


def associate(gt: Trajectory, est: Trajectory, max_dt: float = 0.05) -> list[tuple[Pose2, Pose2]]:
    """Pair each estimate with the nearest ground-truth sample within ``max_dt``.

    Returns (gt_pose, est_pose) pairs in estimate order.
    """
    if not max_dt > 0:
        raise ValueError("max_dt must be positive")
    ts = gt.timestamps
    pairs = []
    for t, pose in est:
        i = bisect.bisect_left(ts, t)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(ts) and (best is None or abs(ts[j] - t) < abs(ts[best] - t)):
                best = j
        if best is not None and abs(ts[best] - t) <= max_dt:
            pairs.append((gt.samples[best][1], pose))
    if not pairs:
        raise NoPairs("no estimate lies within max_dt of a ground-truth sample")
    return pairs


def align_trajectories(pairs: Sequence[tuple[Pose2, Pose2]]) -> Pose2:
    """Rigid transform T minimizing the sum of ``|T * p_est - p_gt|^2`` (no scale)."""
    gt = np.array([[g.x, g.y] for g, _ in pairs], dtype=float)
    est = np.array([[e.x, e.y] for _, e in pairs], dtype=float)
    if len(pairs) < 2:
        raise DegenerateAlignment("need at least two pairs")
    cg, ce = gt.mean(axis=0), est.mean(axis=0)
    a, b = est - ce, gt - cg
    if not np.any(np.abs(a) > 1e-12 * max(1.0, float(np.abs(est).max()))):
        raise DegenerateAlignment("estimated positions are coincident")
    s_cos = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    s_sin = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    theta = math.atan2(s_sin, s_cos)
    c, s = math.cos(theta), math.sin(theta)
    t = cg - np.array([c * ce[0] - s * ce[1], s * ce[0] + c * ce[1]])
    return Pose2(float(t[0]), float(t[1]), theta)


def ate(pairs: Sequence[tuple[Pose2, Pose2]], alignment: Pose2 | None = None) -> float:
    """Position RMSE after applying ``alignment`` (identity when None) to the estimate."""
    if not pairs:
        raise NoPairs("empty pair list")
    T = alignment or Pose2()
    est = T.transform_points(np.array([[e.x, e.y] for _, e in pairs], dtype=float))
    gt = np.array([[g.x, g.y] for g, _ in pairs], dtype=float)
    d = est - gt
    return float(math.sqrt(np.mean(np.einsum("ij,ij->i", d, d))))


def rpe(pairs: Sequence[tuple[Pose2, Pose2]], delta: int = 1) -> tuple[float, float]:
    """(translation RMSE, rotation RMSE) of relative motions over ``delta`` frames."""
    if delta < 1:
        raise ValueError("delta must be at least 1")
    if len(pairs) < delta + 1:
        raise NoPairs(f"need at least {delta + 1} pairs")
    t2 = r2 = 0.0
    n = len(pairs) - delta
    for i in range(n):
        g0, e0 = pairs[i]
        g1, e1 = pairs[i + delta]
        err = g0.between(g1).inverse().compose(e0.between(e1))
        t2 += err.x * err.x + err.y * err.y
        r2 += err.theta * err.theta
    return math.sqrt(t2 / n), math.sqrt(r2 / n)


@dataclass
class MetricReport:
    ate_rmse: float
    rpe_rmse_trans: float
    rpe_rmse_rot: float
    frame_rate: float
    trajectory_length: float

    def __post_init__(self) -> None:
        for name, v in self.as_dict().items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {
            "ate_rmse": self.ate_rmse,
            "rpe_rmse_trans": self.rpe_rmse_trans,
            "rpe_rmse_rot": self.rpe_rmse_rot,
            "frame_rate": self.frame_rate,
            "trajectory_length": self.trajectory_length,
        }


def evaluate(gt: Trajectory, est: Trajectory, delta: int = 1, align: bool = True,
             max_dt: float = 0.05, frame_rate: float = 0.0) -> MetricReport:
    pairs = associate(gt, est, max_dt)
    T = align_trajectories(pairs) if align and len(pairs) >= 2 else Pose2()
    rt, rr = rpe(pairs, delta) if len(pairs) > delta else (0.0, 0.0)
    return MetricReport(ate(pairs, T), rt, rr, frame_rate, _path_length(pairs))


def _path_length(pairs) -> float:
    p = np.array([[g.x, g.y] for g, _ in pairs], dtype=float)
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())
