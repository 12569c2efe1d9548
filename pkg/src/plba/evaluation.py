"""TUM trajectory files, rigid alignment and absolute trajectory error."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from . import se3
from .errors import AlignmentDegenerateError, InvalidArgumentError, TrajectoryParseError

log = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.02
QUAT_TOL = 1e-6
QUAT_RENORM_TOL = 1e-3


@dataclass
class TrajectoryFile:
    """Timestamped camera-to-world poses: positions ``t`` (n, 3), quaternions ``q`` (n, 4) as x, y, z, w."""

    timestamps: np.ndarray
    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.t = np.asarray(self.t, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        if not len(self.timestamps) == len(self.t) == len(self.q):
            raise InvalidArgumentError("timestamps, positions and quaternions differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise InvalidArgumentError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @property
    def positions(self):
        return self.t

    @classmethod
    def from_poses(cls, timestamps, poses):
        """From world-to-camera Poses; the file stores camera centers and camera-to-world rotations."""
        t = np.array([p.center for p in poses]).reshape(-1, 3)
        q = np.array([Rotation.from_matrix(p.R.T).as_quat() for p in poses]).reshape(-1, 4)
        return cls(timestamps, t, q)

    def poses(self):
        """World-to-camera Poses."""
        out = []
        for t, q in zip(self.t, self.q):
            Rwc = Rotation.from_quat(q).as_matrix()
            out.append(se3.Pose(Rwc.T, -Rwc.T @ t))
        return out


def parse_trajectory(text):
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment line."""
    stamps, ts, qs = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise TrajectoryParseError(f"expected 8 fields, got {len(fields)} (field-count)", lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise TrajectoryParseError(f"non-numeric field: {exc}", lineno) from None
        if not np.all(np.isfinite(vals)):
            raise TrajectoryParseError("non-finite value", lineno)
        if stamps and vals[0] <= stamps[-1]:
            raise TrajectoryParseError(f"timestamp {fields[0]} does not increase", lineno)
        q = np.array(vals[4:])
        n = np.linalg.norm(q)
        if abs(n - 1.0) > QUAT_TOL:
            if abs(n - 1.0) > QUAT_RENORM_TOL:
                raise TrajectoryParseError(f"quaternion norm {n:.6g} is not 1", lineno)
            log.warning("line %d: renormalizing quaternion of norm %.9g", lineno, n)
            q = q / n
        stamps.append(vals[0])
        ts.append(vals[1:4])
        qs.append(q)
    return TrajectoryFile(np.array(stamps), np.array(ts).reshape(-1, 3), np.array(qs).reshape(-1, 4))


def read_trajectory(path):
    with open(path, encoding="utf-8") as f:
        return parse_trajectory(f.read())


def format_trajectory(traj):
    lines = []
    for s, t, q in zip(traj.timestamps, traj.t, traj.q):
        lines.append(" ".join("%.17g" % v for v in (s, *t, *q)))
    return "".join(line + "\n" for line in lines)


def write_trajectory(path, traj):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_trajectory(traj))


def associate(a_stamps, b_stamps, tolerance=ASSOCIATION_TOLERANCE):
    """Index pairs ``(i, j)`` matching timestamps within ``tolerance``.

    Candidate pairs are taken greedily by increasing time difference; each
    stamp is used at most once. Pairs come back sorted by ``i``.
    """
    a = np.asarray(a_stamps, dtype=float)
    b = np.asarray(b_stamps, dtype=float)
    cands = []
    for i, s in enumerate(a):
        lo = np.searchsorted(b, s - tolerance, side="left")
        hi = np.searchsorted(b, s + tolerance, side="right")
        for j in range(lo, hi):
            diff = abs(b[j] - s)
            if diff <= tolerance:
                cands.append((diff, i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            pairs.append((i, j))
    return sorted(pairs)


def umeyama_align(estimated, reference, collinear_tol=1e-9):
    """Rigid transform ``(R, t)`` minimizing ``sum ||R p_est + t - p_ref||^2``, plus the residual vectors.

    Raises AlignmentDegenerateError for fewer than three pairs or for
    (near-)collinear point sets, where the rotation about the line is not
    determined.
    """
    P = np.asarray(estimated, dtype=float).reshape(-1, 3)
    Q = np.asarray(reference, dtype=float).reshape(-1, 3)
    if P.shape != Q.shape:
        raise InvalidArgumentError("point sets differ in shape")
    if len(P) < 3:
        raise AlignmentDegenerateError(f"alignment needs at least 3 pairs, got {len(P)}")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    for X, name in ((Pc, "estimated"), (Qc, "reference")):
        s = np.linalg.svd(X, compute_uv=False)
        if s[0] == 0 or s[1] <= collinear_tol * s[0]:
            raise AlignmentDegenerateError(f"{name} positions are collinear; alignment is degenerate")
    U, _, Vt = np.linalg.svd(Qc.T @ Pc)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    t = mq - R @ mp
    return (R, t), (P @ R.T + t) - Q


@dataclass
class AteResult:
    rmse: float
    errors: np.ndarray
    timestamps: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def per_axis_rmse(self):
        return np.sqrt(np.mean(self.errors**2, axis=0))

    def to_csv(self):
        """Per-pose aligned errors and a closing per-axis RMSE row."""
        rows = ["timestamp,err_x,err_y,err_z,err_norm"]
        for s, e in zip(self.timestamps, self.errors):
            rows.append(",".join("%.17g" % v for v in (s, *e, np.linalg.norm(e))))
        rows.append("rmse," + ",".join("%.17g" % v for v in (*self.per_axis_rmse, self.rmse)))
        return "\n".join(rows) + "\n"


def absolute_trajectory_error(estimated, reference, tolerance=ASSOCIATION_TOLERANCE):
    """Associate by timestamp, align rigidly and report translational errors."""
    pairs = associate(estimated.timestamps, reference.timestamps, tolerance)
    if len(pairs) < 3:
        raise AlignmentDegenerateError(f"only {len(pairs)} timestamp associations within {tolerance} s")
    ia, ib = np.array(pairs).T
    (R, t), res = umeyama_align(estimated.t[ia], reference.t[ib])
    rmse = float(np.sqrt(np.mean(np.sum(res**2, axis=1))))
    return AteResult(rmse, res, estimated.timestamps[ia], R, t)


def ate_rmse(estimated, reference, tolerance=ASSOCIATION_TOLERANCE):
    """Root-mean-square translational error after SE(3) alignment, in meters."""
    return absolute_trajectory_error(estimated, reference, tolerance).rmse
