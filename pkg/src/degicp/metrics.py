"""Trajectory error metrics and the degenerate-direction motion residual."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import RigidTransform, rotation_angle


class LengthMismatch(ValueError):
    pass


class TimestampMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    timestamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        ts = np.array(self.timestamps, dtype=float).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise LengthMismatch(f"{len(ts)} timestamps for {len(poses)} poses")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise TimestampMismatch("timestamps must be strictly increasing")
        ts.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    @classmethod
    def from_poses(cls, poses, dt: float = 1.0) -> "Trajectory":
        return cls(np.arange(len(poses)) * dt, tuple(poses))

    def transformed(self, T: RigidTransform) -> "Trajectory":
        return Trajectory(self.timestamps, tuple(T @ p for p in self.poses))

    def to_dict(self) -> dict:
        return {"timestamps": self.timestamps.tolist(), "poses": [p.to_dict() for p in self.poses]}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(d["timestamps"], tuple(RigidTransform.from_dict(p) for p in d["poses"]))


@dataclass(frozen=True)
class ErrorStats:
    mean: float
    stddev: float
    max: float
    series: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, values) -> "ErrorStats":
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size == 0:
            return cls(0.0, 0.0, 0.0, v)
        return cls(float(v.mean()), float(v.std()), float(v.max()), v)

    @property
    def empty(self) -> bool:
        return self.series.size == 0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stddev": self.stddev, "max": self.max,
                "count": int(self.series.size), "empty": self.empty}


def _check(est: Trajectory, gt: Trajectory) -> None:
    if len(est) != len(gt):
        raise LengthMismatch(f"estimate has {len(est)} poses, ground truth {len(gt)}")
    if not np.array_equal(est.timestamps, gt.timestamps):
        raise TimestampMismatch("estimate and ground-truth timestamps differ")


def _split(D: RigidTransform) -> tuple[float, float]:
    return float(np.linalg.norm(D.translation)), rotation_angle(D.rotation)


def ate(est: Trajectory, gt: Trajectory) -> tuple[ErrorStats, ErrorStats]:
    """Absolute trajectory error after aligning the first estimated pose onto the first ground-truth pose."""
    _check(est, gt)
    if len(est) == 0:
        return ErrorStats.of([]), ErrorStats.of([])
    align = gt.poses[0] @ est.poses[0].inverse()
    errs = [_split(g.inverse() @ (align @ e)) for e, g in zip(est.poses, gt.poses)]
    t, r = zip(*errs)
    return ErrorStats.of(t), ErrorStats.of(r)


def path_lengths(traj: Trajectory) -> np.ndarray:
    """Cumulative traveled distance at each pose."""
    if len(traj) == 0:
        return np.zeros(0)
    P = np.array([p.translation for p in traj.poses])
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(P, axis=0), axis=1))])


def rte(est: Trajectory, gt: Trajectory, delta: float) -> tuple[ErrorStats, ErrorStats]:
    """Relative error over segments of ground-truth path length ``delta``.

    For each ``i`` the partner ``j > i`` is the first pose whose traveled
    distance from ``i`` reaches ``delta``; segments running past the end of
    the trajectory are skipped, so a trajectory shorter than ``delta`` yields
    empty stats.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    _check(est, gt)
    s = path_lengths(gt)
    t_err, r_err = [], []
    for i in range(len(gt)):
        j = int(np.searchsorted(s, s[i] + delta, side="left"))
        j = max(j, i + 1)
        if j >= len(gt):
            break
        rel_gt = gt.poses[i].inverse() @ gt.poses[j]
        rel_est = est.poses[i].inverse() @ est.poses[j]
        t, r = _split(rel_gt.inverse() @ rel_est)
        t_err.append(t)
        r_err.append(r)
    return ErrorStats.of(t_err), ErrorStats.of(r_err)


def degenerate_motion(records_or_increments, v) -> np.ndarray:
    """Cumulative ``sum_k |v . x_k|`` over iterations."""
    v = np.asarray(v, dtype=float).reshape(6)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("v must be a unit vector")
    items = list(records_or_increments)
    if items and hasattr(items[0], "step"):
        items = [r.step for r in items]
    X = np.asarray(items, dtype=float).reshape(-1, 6)
    return np.cumsum(np.abs(X @ v))
