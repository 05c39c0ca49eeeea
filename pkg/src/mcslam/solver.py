"""Iterative least squares over SE(2) variables.

One engine serves both scan alignment (a single free pose) and pose-graph
optimization (many poses, one or more fixed).

Manifold increment: ``X [+] d = Pose2(dx, dy, dtheta) * X`` (the small
transform is composed on the left). All Jacobians below are taken with
respect to ``d`` at ``d = 0``.

Error vectors of pose factors are the components ``(x, y, theta)`` of the
error transform, with theta wrapped.

Factors are evaluated in batches: every factor object yields an array of
residuals with one row per elementary constraint, so a scan slice with a
thousand point correspondences is one factor object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .geometry import Pose2, wrap_angles


class SolverError(Exception):
    pass


class SingularSystem(SolverError):
    pass


class NoFixedGauge(SolverError):
    pass


@dataclass
class Variable:
    id: int
    estimate: Pose2
    fixed: bool = False


@dataclass(frozen=True)
class Huber:
    delta: float

    def robustify(self, chi2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return robustify(self, chi2)


def robustify(kernel: Optional[Huber], chi2):
    """Return (scaled chi2, weight) for one value or an array of chi2 values."""
    chi2 = np.asarray(chi2, dtype=float)
    if kernel is None or not math.isfinite(kernel.delta):
        return chi2, np.ones_like(chi2)
    d = kernel.delta
    inlier = chi2 <= d * d
    if inlier.all():
        return chi2, np.ones_like(chi2)
    root = np.sqrt(np.where(inlier, 1.0, chi2))
    rho = np.where(inlier, chi2, 2.0 * d * root - d * d)
    w = np.where(inlier, 1.0, d / root)
    return rho, w


_S = np.array([[0.0, -1.0], [1.0, 0.0]])


def _as_info(information, m: int, dim: int) -> np.ndarray:
    info = np.asarray(information, dtype=float)
    if info.ndim == 0:
        return np.broadcast_to(np.eye(dim) * info, (m, dim, dim))
    if info.ndim == 1 and dim == 1:
        return info.reshape(m, 1, 1)
    if info.shape == (dim, dim):
        return np.broadcast_to(info, (m, dim, dim))
    return info.reshape(m, dim, dim)


class Factor:
    """Base class; subclasses implement :meth:`linearize`.

    ``linearize`` returns ``(e, jacobians, information)`` with ``e`` of shape
    (m, d), one (m, d, 3) Jacobian per entry of ``variable_ids`` and
    information of shape (m, d, d).
    """

    kind: str = ""
    dim: int = 0
    variable_ids: tuple[int, ...] = ()
    kernel: Optional[Huber] = None

    def linearize(self, estimates: dict[int, Pose2]):
        raise NotImplementedError

    def error(self, estimates: dict[int, Pose2]) -> np.ndarray:
        return self.linearize(estimates)[0]

    def chi2_values(self, estimates: dict[int, Pose2]) -> np.ndarray:
        """Unrobustified ``e^T Omega e`` per row."""
        e, _, info = self.linearize(estimates)
        return np.einsum("ni,nij,nj->n", e, info, e)


def _scalar_info(information) -> Optional[float]:
    info = np.asarray(information, dtype=float)
    return float(info) if info.ndim == 0 else None


class PointPairFactor(Factor):
    """e = X * p_moving - p_fixed, one row per pair."""

    kind = "point_pair"
    dim = 2

    def __init__(self, var_id: int, moving, fixed, information=1.0, kernel: Optional[Huber] = None):
        self.variable_ids = (var_id,)
        self.moving = np.asarray(moving, dtype=float).reshape(-1, 2)
        self.fixed = np.asarray(fixed, dtype=float).reshape(-1, 2)
        self.information = _as_info(information, len(self.moving), 2)
        self.scale = _scalar_info(information)  # isotropic weight, if any
        self.kernel = kernel

    def error(self, estimates):
        return estimates[self.variable_ids[0]].transform_points(self.moving) - self.fixed

    def chi2_values(self, estimates):
        if self.scale is None:
            return super().chi2_values(estimates)
        e = self.error(estimates)
        return self.scale * np.einsum("ij,ij->i", e, e)

    def __len__(self) -> int:
        return len(self.moving)

    def linearize(self, estimates):
        X = estimates[self.variable_ids[0]]
        q = X.transform_points(self.moving)
        e = q - self.fixed
        m = len(q)
        J = np.zeros((m, 2, 3))
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        J[:, 0, 2] = -q[:, 1]
        J[:, 1, 2] = q[:, 0]
        return e, [J], self.information


class PointLineFactor(Factor):
    """e = n_fixed . (X * p_moving - p_fixed), one row per pair."""

    kind = "point_line"
    dim = 1

    def __init__(self, var_id: int, moving, fixed, normals, information=1.0, kernel: Optional[Huber] = None):
        self.variable_ids = (var_id,)
        self.moving = np.asarray(moving, dtype=float).reshape(-1, 2)
        self.fixed = np.asarray(fixed, dtype=float).reshape(-1, 2)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 2)
        self.information = _as_info(information, len(self.moving), 1)
        self.scale = _scalar_info(information)
        self.kernel = kernel

    def error(self, estimates):
        q = estimates[self.variable_ids[0]].transform_points(self.moving)
        return np.einsum("ij,ij->i", self.normals, q - self.fixed)[:, None]

    def chi2_values(self, estimates):
        if self.scale is None:
            return super().chi2_values(estimates)
        e = self.error(estimates)[:, 0]
        return self.scale * e * e

    def __len__(self) -> int:
        return len(self.moving)

    def linearize(self, estimates):
        X = estimates[self.variable_ids[0]]
        q = X.transform_points(self.moving)
        n = self.normals
        e = np.einsum("ij,ij->i", n, q - self.fixed)[:, None]
        J = np.empty((len(q), 1, 3))
        J[:, 0, 0] = n[:, 0]
        J[:, 0, 1] = n[:, 1]
        J[:, 0, 2] = n[:, 1] * q[:, 0] - n[:, 0] * q[:, 1]
        return e, [J], self.information


def _pose_error(err: Pose2) -> np.ndarray:
    return np.array([[err.x, err.y, err.theta]])


class PosePriorFactor(Factor):
    """e = components of Z^-1 * X."""

    kind = "pose_prior"
    dim = 3

    def __init__(self, var_id: int, measurement: Pose2, information=None, kernel: Optional[Huber] = None):
        self.variable_ids = (var_id,)
        self.measurement = measurement
        self.information = _as_info(np.eye(3) if information is None else information, 1, 3)
        self.kernel = kernel

    def linearize(self, estimates):
        X = estimates[self.variable_ids[0]]
        Z = self.measurement
        e = _pose_error(Z.inverse().compose(X))
        RzT = Z.rotation().T
        J = np.zeros((1, 3, 3))
        J[0, :2, :2] = RzT
        J[0, :2, 2] = RzT @ (_S @ X.translation)
        J[0, 2, 2] = 1.0
        return e, [J], self.information


class RelativePoseFactor(Factor):
    """e = components of Z^-1 * (Xi^-1 * Xj)."""

    kind = "relative_pose"
    dim = 3

    def __init__(self, from_id: int, to_id: int, measurement: Pose2, information=None,
                 kernel: Optional[Huber] = None):
        if from_id == to_id:
            raise ValueError("relative factor needs two distinct variables")
        self.variable_ids = (from_id, to_id)
        self.measurement = measurement
        self.information = _as_info(np.eye(3) if information is None else information, 1, 3)
        self.kernel = kernel

    def linearize(self, estimates):
        Xi = estimates[self.variable_ids[0]]
        Xj = estimates[self.variable_ids[1]]
        Z = self.measurement
        e = _pose_error(Z.inverse().compose(Xi.inverse().compose(Xj)))
        A = Z.rotation().T @ Xi.rotation().T
        col = A @ (_S @ Xj.translation)
        Jj = np.zeros((1, 3, 3))
        Jj[0, :2, :2] = A
        Jj[0, :2, 2] = col
        Jj[0, 2, 2] = 1.0
        Ji = -Jj
        return e, [Ji, Jj], self.information


def residual_and_jacobian(factor: Factor, estimates: dict[int, Pose2]):
    e, jacs, _ = factor.linearize(estimates)
    return e, jacs


def boxplus(X: Pose2, d) -> Pose2:
    return Pose2(d[0], d[1], d[2]).compose(X)


@dataclass
class SolverSettings:
    max_iterations: int = 10
    damping: float = 1e-6
    chi2_epsilon: float = 1e-9
    dense_threshold: int = 300
    max_damping_retries: int = 10


@dataclass
class SolverStats:
    chi2: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    # undamped normal matrix at the final linearization point, free variables only
    hessian: Optional[np.ndarray] = None


def _chi2(factors: Sequence[Factor], est: dict[int, Pose2]) -> float:
    total = 0.0
    for f in factors:
        total += float(np.sum(robustify(f.kernel, f.chi2_values(est))[0]))
    return total


def _check_gauge(variables: Sequence[Variable], factors: Sequence[Factor]) -> None:
    parent = {v.id: v.id for v in variables}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    anchored = {v.id for v in variables if v.fixed}
    for f in factors:
        ids = f.variable_ids
        if len(ids) == 1:
            anchored.add(ids[0])
        else:
            a, b = find(ids[0]), find(ids[1])
            if a != b:
                parent[a] = b
    roots_anchored = {find(a) for a in anchored}
    for v in variables:
        if find(v.id) not in roots_anchored:
            raise NoFixedGauge(f"variable {v.id} belongs to a component without a fixed gauge")


class Solver:
    """Damped Gauss-Newton (additive lambda * I) over Pose2 variables."""

    def __init__(self, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()

    def _build(self, factors, est, index, n):
        dim = 3 * n
        sparse = n > self.settings.dense_threshold
        if sparse:
            rows, cols, vals = [], [], []
        else:
            H = np.zeros((dim, dim))
        b = np.zeros(dim)
        for f in factors:
            e, jacs, info = f.linearize(est)
            slots = [index.get(vid) for vid in f.variable_ids]
            scale = getattr(f, "scale", None)
            if scale is not None and len(slots) == 1 and slots[0] is not None and not sparse:
                # isotropic unary factor: skip the per-row information products
                J = jacs[0]
                w = robustify(f.kernel, scale * np.einsum("ni,ni->n", e, e))[1] * scale
                Jw = J * w[:, None, None]
                a = 3 * slots[0]
                b[a:a + 3] += np.einsum("nki,nk->i", Jw, e)
                H[a:a + 3, a:a + 3] += np.einsum("nki,nkj->ij", Jw, J)
                continue
            c = np.einsum("ni,nij,nj->n", e, info, e)
            _, w = robustify(f.kernel, c)
            winfo = info * w[:, None, None]
            for a, Ja in zip(slots, jacs):
                if a is None:
                    continue
                JaT_W = np.einsum("nki,nkl->nil", Ja, winfo)  # (m, 3, d)
                b[3 * a:3 * a + 3] += np.einsum("nil,nl->i", JaT_W, e)
                for bb, Jb in zip(slots, jacs):
                    if bb is None:
                        continue
                    block = np.einsum("nil,nlj->ij", JaT_W, Jb)
                    if sparse:
                        r, cc = np.meshgrid(np.arange(3 * a, 3 * a + 3), np.arange(3 * bb, 3 * bb + 3), indexing="ij")
                        rows.append(r.ravel())
                        cols.append(cc.ravel())
                        vals.append(block.ravel())
                    else:
                        H[3 * a:3 * a + 3, 3 * bb:3 * bb + 3] += block
        if sparse:
            H = scipy.sparse.csc_matrix(
                (np.concatenate(vals) if vals else np.zeros(0),
                 (np.concatenate(rows) if rows else np.zeros(0, int),
                  np.concatenate(cols) if cols else np.zeros(0, int))),
                shape=(dim, dim),
            )
        return H, b

    def _solve_linear(self, H, b, lam):
        if scipy.sparse.issparse(H):
            A = (H + lam * scipy.sparse.identity(H.shape[0], format="csc")).tocsc()
            try:
                # symmetric fill-reducing ordering + diagonal pivots: LU of an SPD
                # matrix is then its Cholesky factorization up to diagonal scaling
                lu = scipy.sparse.linalg.splu(
                    A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError:
                return None
            if np.any(lu.U.diagonal() <= 0):
                return None
            x = lu.solve(-b)
            return x if np.all(np.isfinite(x)) else None
        A = H + lam * np.eye(H.shape[0])
        try:
            c = scipy.linalg.cho_factor(A, check_finite=False)
        except (np.linalg.LinAlgError, ValueError):
            return None
        x = scipy.linalg.cho_solve(c, -b, check_finite=False)
        return x if np.all(np.isfinite(x)) else None

    def solve(self, variables: Sequence[Variable], factors: Sequence[Factor]):
        """Optimize in place; returns ``({id: Pose2}, SolverStats)``."""
        s = self.settings
        ids = [v.id for v in variables]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate variable ids")
        known = set(ids)
        for f in factors:
            for vid in f.variable_ids:
                if vid not in known:
                    raise KeyError(f"factor references unknown variable {vid}")
        _check_gauge(variables, factors)

        free = [v.id for v in variables if not v.fixed]
        index = {vid: k for k, vid in enumerate(free)}
        est = {v.id: v.estimate for v in variables}
        stats = SolverStats()
        chi2 = _chi2(factors, est)
        stats.chi2.append(chi2)
        if not free:
            stats.converged = True
            return est, stats

        lam = s.damping
        for _ in range(s.max_iterations):
            H, b = self._build(factors, est, index, len(free))
            stats.hessian = H
            accepted = False
            negligible = False
            for _retry in range(s.max_damping_retries + 1):
                dx = self._solve_linear(H, b, lam)
                if dx is None:
                    lam = max(lam, 1e-12) * 10.0
                    continue
                # decrease predicted by the quadratic model; below epsilon the
                # step cannot change chi2 measurably, so stop without retrying
                predicted = -(2.0 * float(b @ dx) + float(dx @ (H @ dx)))
                if predicted < s.chi2_epsilon:
                    negligible = True
                    break
                cand = dict(est)
                for vid, k in index.items():
                    cand[vid] = boxplus(est[vid], dx[3 * k:3 * k + 3])
                new_chi2 = _chi2(factors, cand)
                if new_chi2 <= chi2:
                    accepted = True
                    lam *= 0.5
                    break
                lam = max(lam, 1e-12) * 10.0
            if dx is None and not accepted:
                raise SingularSystem("normal equations stay singular after damping retries")
            stats.iterations += 1
            if negligible or not accepted:
                # no descent direction left at this damping: treat as converged
                stats.converged = True
                break
            delta = chi2 - new_chi2
            est, chi2 = cand, new_chi2
            stats.chi2.append(chi2)
            if abs(delta) < s.chi2_epsilon:
                stats.converged = True
                break
        for v in variables:
            v.estimate = est[v.id]
        return est, stats


def solve(variables: Sequence[Variable], factors: Sequence[Factor], settings: Optional[SolverSettings] = None):
    return Solver(settings).solve(variables, factors)
