"""SE(2) algebra, 2D point clouds and nearest-neighbour data association.

Conventions used throughout the package:

* angles live in (-pi, pi]; ``wrap_angle(pi) == pi``.
* ``a.compose(b)`` is the homogeneous matrix product ``A @ B``.
* a pose ``X`` maps points from its own frame into its parent frame,
  ``X * p = R(theta) p + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.remainder(theta, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    r = np.remainder(theta + math.pi, TWO_PI) - math.pi
    r = np.where(r <= -math.pi, r + TWO_PI, r)
    return r


def rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, slots=True)
class Pose2:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValueError(f"non-finite pose {self.x}, {self.y}, {self.theta}")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_vector(cls, v) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2":
        return cls(float(m[0, 2]), float(m[1, 2]), math.atan2(m[1, 0], m[0, 0]))

    def to_vector(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def to_matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def rotation(self) -> np.ndarray:
        return rot(self.theta)

    def compose(self, other: "Pose2") -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    __mul__ = compose

    def inverse(self) -> "Pose2":
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2(-c * self.x - s * self.y, s * self.x - c * self.y, -self.theta)

    def between(self, other: "Pose2") -> "Pose2":
        """``self^-1 * other``: ``other`` expressed in the frame of ``self``."""
        return self.inverse().compose(other)

    def transform_point(self, p) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]])

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Apply the pose to an (N, 2) array."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = np.asarray(pts, dtype=float) @ np.array([[c, s], [-s, c]])
        out += (self.x, self.y)
        return out

    def rotate_vectors(self, v: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        out = np.empty_like(v, dtype=float)
        out[:, 0] = c * v[:, 0] - s * v[:, 1]
        out[:, 1] = s * v[:, 0] + c * v[:, 1]
        return out

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def __iter__(self) -> Iterator[float]:
        return iter((self.x, self.y, self.theta))


def compose(a: Pose2, b: Pose2) -> Pose2:
    return a.compose(b)


def inverse(a: Pose2) -> Pose2:
    return a.inverse()


def transform_point(a: Pose2, p) -> np.ndarray:
    return a.transform_point(p)


class PointCloud2:
    """2D points with optional per-point unit normals.

    ``normals`` is either ``None`` or an (N, 2) array whose rows are unit
    vectors, or NaN for points whose normal could not be estimated.
    Arrays are made read-only on construction.
    """

    __slots__ = ("points", "normals")

    def __init__(self, points, normals=None, *, check: bool = True):
        pts = np.array(points, dtype=float).reshape(-1, 2)
        nrm = None
        if normals is not None:
            nrm = np.array(normals, dtype=float).reshape(-1, 2)
            if nrm.shape != pts.shape:
                raise ValueError("normals must match points in length")
        if check:
            if not np.all(np.isfinite(pts)):
                raise ValueError("point cloud contains non-finite coordinates")
            if nrm is not None:
                ok = ~np.isnan(nrm[:, 0])
                if np.any(np.abs(np.hypot(nrm[ok, 0], nrm[ok, 1]) - 1.0) > 1e-9):
                    raise ValueError("normals must have unit length")
        pts.setflags(write=False)
        if nrm is not None:
            nrm.setflags(write=False)
        self.points = pts
        self.normals = nrm

    @classmethod
    def empty(cls, with_normals: bool = True) -> "PointCloud2":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)) if with_normals else None, check=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud2):
            return NotImplemented
        if not np.array_equal(self.points, other.points):
            return False
        if (self.normals is None) != (other.normals is None):
            return False
        return self.normals is None or np.array_equal(self.normals, other.normals, equal_nan=True)

    def __repr__(self) -> str:
        return f"PointCloud2(n={len(self)}, normals={self.normals is not None})"

    @property
    def has_normal(self) -> np.ndarray:
        """Boolean mask of points carrying a valid normal."""
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return ~np.isnan(self.normals[:, 0])

    def transformed(self, pose: Pose2) -> "PointCloud2":
        pts = pose.transform_points(self.points)
        nrm = None if self.normals is None else pose.rotate_vectors(self.normals)
        return PointCloud2(pts, nrm, check=False)

    def subset(self, idx) -> "PointCloud2":
        nrm = None if self.normals is None else self.normals[idx]
        return PointCloud2(self.points[idx], nrm, check=False)

    def concatenated(self, other: "PointCloud2") -> "PointCloud2":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        pts = np.vstack([self.points, other.points])
        if self.normals is None and other.normals is None:
            nrm = None
        else:
            a = self.normals if self.normals is not None else np.full_like(self.points, np.nan)
            b = other.normals if other.normals is not None else np.full_like(other.points, np.nan)
            nrm = np.vstack([a, b])
        return PointCloud2(pts, nrm, check=False)


def voxel_keep_first(points: np.ndarray, resolution: float) -> np.ndarray:
    """Indices of the first point falling in each grid cell, in input order."""
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    cells = np.floor(points / resolution).astype(np.int64)
    # pack both cell coordinates into one key; 2**31 cells per axis is plenty
    keys = (cells[:, 0] << 32) ^ (cells[:, 1] & 0xFFFFFFFF)
    _, first = np.unique(keys, return_index=True)
    first.sort()
    return first


def voxel_decimate(cloud: PointCloud2, resolution: float, cap: Optional[int] = None) -> PointCloud2:
    idx = voxel_keep_first(cloud.points, resolution)
    if cap is not None:
        idx = idx[:cap]
    if len(idx) == len(cloud):
        return cloud
    return cloud.subset(idx)


def estimate_normals(cloud: PointCloud2, k: int = 8, spacing_factor: float = 10.0) -> PointCloud2:
    """Estimate per-point normals from the covariance of the k nearest neighbours.

    The neighbourhood includes the point itself. Neighbours further than
    ``spacing_factor`` times the median nearest-neighbour spacing are not
    counted; points left with fewer than ``k`` neighbours get a NaN normal.
    Normals are oriented to face the origin of the cloud's frame.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    pts = cloud.points
    n = len(pts)
    normals = np.full((n, 2), np.nan)
    if n < k:
        return PointCloud2(pts, normals, check=False)
    tree = cKDTree(pts)
    d2, _ = tree.query(pts, k=2)
    spacing = float(np.median(d2[:, 1]))
    radius = spacing_factor * spacing if spacing > 0 else np.inf
    dist, idx = tree.query(pts, k=k, distance_upper_bound=radius * (1 + 1e-12))
    complete = np.all(np.isfinite(dist), axis=1)
    if not np.any(complete):
        return PointCloud2(pts, normals, check=False)
    nb = pts[idx[complete]]  # (m, k, 2)
    centered = nb - nb.mean(axis=1, keepdims=True)
    sxx = np.einsum("ij,ij->i", centered[:, :, 0], centered[:, :, 0])
    syy = np.einsum("ij,ij->i", centered[:, :, 1], centered[:, :, 1])
    sxy = np.einsum("ij,ij->i", centered[:, :, 0], centered[:, :, 1])
    # minor eigenvector of [[sxx, sxy], [sxy, syy]] is perpendicular to the major axis
    major = 0.5 * np.arctan2(2.0 * sxy, sxx - syy)
    nx, ny = -np.sin(major), np.cos(major)
    p = pts[complete]
    flip = (nx * p[:, 0] + ny * p[:, 1]) > 0.0
    nx = np.where(flip, -nx, nx)
    ny = np.where(flip, -ny, ny)
    nrm = np.stack([nx, ny], axis=1)
    nrm /= np.hypot(nrm[:, 0], nrm[:, 1])[:, None]
    normals[complete] = nrm
    return PointCloud2(pts, normals, check=False)


class Correspondence(NamedTuple):
    fixed_index: int
    moving_index: int
    distance: float


class Correspondences(NamedTuple):
    """Array form of a correspondence list, one row per association."""

    fixed_index: np.ndarray
    moving_index: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.moving_index)

    def as_list(self) -> list[Correspondence]:
        return [
            Correspondence(int(f), int(m), float(d))
            for f, m, d in zip(self.fixed_index, self.moving_index, self.distance)
        ]


def normals_agree(fixed_normals: np.ndarray, moving_normals: np.ndarray, normal_gate: float) -> np.ndarray:
    """True where the angle between paired normals is within the gate, or a normal is missing."""
    dots = np.einsum("ij,ij->i", fixed_normals, moving_normals)
    ok = dots >= math.cos(normal_gate)
    missing = np.isnan(dots)
    return ok | missing


class CorrespondenceFinder:
    """Nearest-neighbour association against a fixed cloud (KD-tree backed).

    The tree is built once per fixed cloud so repeated queries during an
    alignment only pay for the lookups.
    """

    def __init__(self, fixed: PointCloud2):
        self.fixed = fixed
        self._tree = cKDTree(fixed.points) if len(fixed) else None

    def find(
        self,
        moving: PointCloud2,
        guess: Pose2,
        gate: float,
        normal_gate: float = math.pi,
    ) -> Correspondences:
        if gate <= 0:
            raise ValueError("gate must be positive")
        if self._tree is None or len(moving) == 0:
            e = np.zeros(0, dtype=np.int64)
            return Correspondences(e, e.copy(), np.zeros(0))
        q = guess.transform_points(moving.points)
        dist, fidx = self._tree.query(q, k=1, distance_upper_bound=gate * (1 + 1e-9))
        keep = np.isfinite(dist) & (dist <= gate)
        midx = np.nonzero(keep)[0]
        fidx = fidx[keep]
        dist = dist[keep]
        if normal_gate < math.pi and self.fixed.normals is not None and moving.normals is not None:
            mn = guess.rotate_vectors(moving.normals[midx])
            ok = normals_agree(self.fixed.normals[fidx], mn, normal_gate)
            midx, fidx, dist = midx[ok], fidx[ok], dist[ok]
        return Correspondences(fidx.astype(np.int64), midx.astype(np.int64), dist)


def find_correspondences(
    fixed: PointCloud2,
    moving: PointCloud2,
    guess: Pose2,
    gate: float,
    normal_gate: float = math.pi,
) -> Correspondences:
    return CorrespondenceFinder(fixed).find(moving, guess, gate, normal_gate)
