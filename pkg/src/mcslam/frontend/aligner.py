"""Multi-Aligner: one least-squares solver fed by a set of per-cue slices."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..configurable import Configurable, Slot
from ..geometry import CorrespondenceFinder, Correspondences, PointCloud2, Pose2
from ..properties import Kind, PropertyContainer
from ..solver import (
    Factor,
    Huber,
    PointLineFactor,
    PointPairFactor,
    PosePriorFactor,
    Solver,
    SolverSettings,
    Variable,
)
from .types import MeasurementPacket


class DegenerateAlignment(Exception):
    pass


class IterativeSolver(Configurable):
    """Configurable front for :class:`mcslam.solver.Solver`."""

    class_name = "IterativeSolver"
    PARAMS = {
        "max_iterations": (Kind.INT, 10),
        "damping": (Kind.FLOAT, 1e-6),
        "chi2_epsilon": (Kind.FLOAT, 1e-9),
        "dense_threshold": (Kind.INT, 300),
    }

    def configure(self) -> None:
        self.solver = Solver(SolverSettings(
            max_iterations=self.param("max_iterations"),
            damping=self.param("damping"),
            chi2_epsilon=self.param("chi2_epsilon"),
            dense_threshold=self.param("dense_threshold"),
        ))

    def solve(self, variables, factors):
        return self.solver.solve(variables, factors)


class AlignerSlice(Configurable):
    """Produces factors on the single relative-motion variable for one cue.

    Call :meth:`begin` once per alignment, then :meth:`factors` once per
    outer iteration. ``inliers`` holds the association count of the last
    call (0 for prior-type slices).
    """

    is_prior = False

    @property
    def cue(self) -> str:
        return self.param("cue")

    def begin(self, fixed_scene: PropertyContainer, packet: MeasurementPacket, guess: Pose2) -> bool:
        """Prepare for an alignment; returns False when the cue is unavailable."""
        raise NotImplementedError

    def factors(self, estimate: Pose2, iteration: int, iterations: int) -> list[Factor]:
        raise NotImplementedError


class Lidar2DAlignerSlice(AlignerSlice):
    """Point-to-line ICP residuals for one 2D scan cue against the matching scene cloud.

    Scene points without a normal fall back to point-to-point residuals. Those
    are biased towards the previous sampling pattern when the sensor moves
    along a wall, so they get a separate, much lower information.
    """

    class_name = "Lidar2DAlignerSlice"
    PARAMS = {
        "cue": (Kind.STRING, "front_scan"),
        "gate_start": (Kind.FLOAT, 0.5),
        "gate_end": (Kind.FLOAT, 0.1),
        "normal_gate": (Kind.FLOAT, 0.7),
        "information": (Kind.FLOAT, 1.0),
        "pair_information": (Kind.FLOAT, 0.01),
        "huber_delta": (Kind.FLOAT, 0.1),
    }

    def configure(self) -> None:
        self.pair_information = self.param("pair_information")
        self.gate_start = self.param("gate_start")
        self.gate_end = self.param("gate_end")
        self.normal_gate = self.param("normal_gate")
        self.information = self.param("information")
        self.kernel = Huber(self.param("huber_delta"))
        self.inliers = 0
        self.last: Optional[Correspondences] = None
        self._finder: Optional[CorrespondenceFinder] = None
        self._moving: Optional[PointCloud2] = None

    def begin(self, fixed_scene, packet, guess) -> bool:
        self.inliers = 0
        self.last = None
        cue = self.cue
        if cue not in fixed_scene or cue not in packet.cues:
            self._finder = None
            return False
        fixed = fixed_scene.get(cue, Kind.POINT_CLOUD_2)
        moving = packet.cues.get(cue, Kind.POINT_CLOUD_2)
        if len(fixed) == 0 or len(moving) == 0:
            self._finder = None
            return False
        self._finder = CorrespondenceFinder(fixed)
        self._moving = moving
        return True

    def gate(self, iteration: int, iterations: int) -> float:
        if iterations <= 1:
            return self.gate_end
        return self.gate_start + (self.gate_end - self.gate_start) * iteration / (iterations - 1)

    def factors(self, estimate, iteration, iterations):
        if self._finder is None:
            self.inliers = 0
            return []
        corr = self._finder.find(self._moving, estimate, self.gate(iteration, iterations), self.normal_gate)
        self.last = corr
        self.inliers = len(corr)
        if not len(corr):
            return []
        fixed = self._finder.fixed
        fp = fixed.points[corr.fixed_index]
        mp = self._moving.points[corr.moving_index]
        out: list[Factor] = []
        if fixed.normals is not None:
            fn = fixed.normals[corr.fixed_index]
            line = ~np.isnan(fn[:, 0])
        else:
            fn = None
            line = np.zeros(len(corr), dtype=bool)
        if line.any():
            out.append(PointLineFactor(0, mp[line], fp[line], fn[line], self.information, self.kernel))
        if (~line).any():
            out.append(PointPairFactor(0, mp[~line], fp[~line], self.pair_information, self.kernel))
        return out


class OdometryAlignerSlice(AlignerSlice):
    """Wheel-odometry prior: one pose factor pinning the estimate to the guess."""

    class_name = "OdometryAlignerSlice"
    is_prior = True
    PARAMS = {
        "cue": (Kind.STRING, "odom_delta"),
        "information": (Kind.FLOAT_VECTOR, (50.0, 50.0, 200.0)),
        "huber_delta": (Kind.FLOAT, 1.0),
    }

    def configure(self) -> None:
        self.information = np.diag(self.param("information"))
        self.kernel = Huber(self.param("huber_delta"))
        self.inliers = 0
        self._guess: Optional[Pose2] = None

    def begin(self, fixed_scene, packet, guess) -> bool:
        self.inliers = 0
        self._guess = guess if self.cue in packet.cues else None
        return self._guess is not None

    def factors(self, estimate, iteration, iterations):
        if self._guess is None:
            return []
        return [PosePriorFactor(0, self._guess, self.information, self.kernel)]


@dataclass
class AlignStats:
    chi2: float = 0.0
    inliers_per_slice: dict[str, int] = field(default_factory=dict)
    iterations: int = 0
    condition: float = 0.0
    has_prior: bool = False

    @property
    def inliers(self) -> int:
        return sum(self.inliers_per_slice.values())


class MultiAligner(Configurable):
    """Registers a measurement packet against a scene, all cues at once.

    The single variable is the pose of the packet's base frame in the scene
    frame (``X * p_measurement ~ p_scene``); it is never fixed.
    """

    class_name = "MultiAligner"
    PARAMS = {
        "iterations": (Kind.INT, 10),
        "min_inliers": (Kind.INT, 10),
        "max_condition": (Kind.FLOAT, 1e8),
        "tolerance": (Kind.FLOAT, 1e-5),
    }
    SLOTS = {
        "solver": Slot(IterativeSolver),
        "slices": Slot(AlignerSlice, many=True),
    }

    def configure(self) -> None:
        self.iterations = self.param("iterations")
        self.min_inliers = self.param("min_inliers")
        self.max_condition = self.param("max_condition")
        self.tolerance = self.param("tolerance")

    @property
    def solver(self) -> IterativeSolver:
        return self.slot("solver")

    @property
    def slices(self) -> dict[str, AlignerSlice]:
        return self.slot("slices")

    def align(self, fixed_scene: PropertyContainer, packet: MeasurementPacket,
              guess: Pose2) -> tuple[Pose2, AlignStats]:
        slices = self.slices
        active = {name: s for name, s in slices.items() if s.begin(fixed_scene, packet, guess)}
        has_prior = any(s.is_prior for s in active.values())
        stats = AlignStats(inliers_per_slice={name: 0 for name in slices}, has_prior=has_prior)
        if not active:
            raise DegenerateAlignment("no slice produced constraints")
        estimate = guess
        it = 0
        while it < self.iterations:
            factors: list[Factor] = []
            for name, s in active.items():
                factors.extend(s.factors(estimate, it, self.iterations))
                stats.inliers_per_slice[name] = s.inliers
            if stats.inliers < self.min_inliers and not has_prior:
                raise DegenerateAlignment(f"only {stats.inliers} inliers")
            var = Variable(0, estimate)
            est, sstats = self.solver.solve([var], factors)
            step = estimate.between(est[0])
            estimate = est[0]
            stats.chi2 = sstats.chi2[-1]
            stats.iterations += sstats.iterations
            it += 1
            # settled: finish with one pass at the tightest gate
            if it < self.iterations - 1 and step.norm() < self.tolerance and abs(step.theta) < self.tolerance:
                it = self.iterations - 1
        H = sstats.hessian
        if H is not None:
            stats.condition = float(np.linalg.cond(H))
        if not has_prior and not stats.condition < self.max_condition:
            raise DegenerateAlignment(f"ill-conditioned system (cond {stats.condition:.3g})")
        return estimate, stats


def align(fixed_scene: PropertyContainer, packet: MeasurementPacket, guess: Pose2,
          aligner: MultiAligner) -> tuple[Pose2, AlignStats]:
    return aligner.align(fixed_scene, packet, guess)
