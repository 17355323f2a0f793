"""Timestamped pose sequences and the TUM / KITTI text formats.

TUM: ``timestamp tx ty tz qx qy qz qw`` per line, ``#`` lines are comments.
KITTI: 12 values per line, the row-major 3x4 matrix ``[R | t]``.
All numbers are written with 17 significant digits so that files round-trip
exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose


class TrajectoryParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass
class Trajectory:
    stamps: np.ndarray
    matrices: np.ndarray  # (N, 4, 4) camera-to-world
    quaternions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.matrices = np.asarray(self.matrices, dtype=float).reshape(-1, 4, 4)
        if len(self.stamps) != len(self.matrices):
            raise ValueError("stamps and poses differ in length")
        if len(self.stamps) > 1 and np.any(np.diff(self.stamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, stamps, poses) -> "Trajectory":
        mats = np.array([p.matrix() for p in poses]).reshape(-1, 4, 4)
        return cls(np.asarray(stamps, dtype=float), mats)

    def __len__(self):
        return len(self.stamps)

    def __iter__(self):
        return iter(zip(self.stamps, self.poses))

    @property
    def poses(self) -> list[Pose]:
        return [Pose.from_matrix(T) for T in self.matrices]

    @property
    def positions(self) -> np.ndarray:
        return self.matrices[:, :3, 3]

    def transformed(self, T: Pose) -> "Trajectory":
        """Left-multiply every pose by T (change of world frame)."""
        return Trajectory(self.stamps.copy(), T.matrix()[None] @ self.matrices)

    def subset(self, idx) -> "Trajectory":
        return Trajectory(self.stamps[idx], self.matrices[idx])

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.positions, axis=0), axis=1)))


def _fmt(x: float) -> str:
    return "%.17g" % (float(x) + 0.0)


def _canonical_quaternions(R) -> np.ndarray:
    q = Rotation.from_matrix(R).as_quat()  # x, y, z, w
    q = np.atleast_2d(q)
    q[q[:, 3] < 0] *= -1.0
    return q


def format_tum_line(stamp: float, T) -> str:
    T = np.asarray(T)
    if np.allclose(T[:3, :3], np.eye(3), atol=0, rtol=0):
        q = np.array([0.0, 0.0, 0.0, 1.0])
    else:
        q = _canonical_quaternions(T[:3, :3])[0]
    return " ".join(_fmt(v) for v in [stamp, *T[:3, 3], *q])


def format_kitti_line(T) -> str:
    return " ".join(_fmt(v) for v in np.asarray(T)[:3, :4].reshape(-1))


def write_tum(traj: Trajectory, path) -> None:
    lines = []
    for i, (t, T) in enumerate(zip(traj.stamps, traj.matrices)):
        if traj.quaternions is not None:
            vals = [t, *T[:3, 3], *traj.quaternions[i]]
            lines.append(" ".join(_fmt(v) for v in vals))
        else:
            lines.append(format_tum_line(t, T))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_tum(path) -> Trajectory:
    stamps, trans, quats = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        if len(parts) != 8:
            raise TrajectoryParseError(path, lineno, f"expected 8 values, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise TrajectoryParseError(path, lineno, str(exc)) from None
        stamps.append(vals[0])
        trans.append(vals[1:4])
        quats.append(vals[4:8])
    quats = np.array(quats, dtype=float).reshape(-1, 4)
    mats = np.tile(np.eye(4), (len(stamps), 1, 1))
    if len(stamps):
        norms = np.linalg.norm(quats, axis=1)
        if np.any(norms < 1e-12):
            bad = int(np.argmin(norms))
            raise TrajectoryParseError(path, bad + 1, "zero quaternion")
        mats[:, :3, :3] = Rotation.from_quat(quats).as_matrix()
        mats[:, :3, 3] = np.array(trans)
    return Trajectory(np.array(stamps), mats, quats)


def write_kitti(traj: Trajectory, path) -> None:
    Path(path).write_text("".join(format_kitti_line(T) + "\n" for T in traj.matrices))


def read_kitti(path, stamps=None) -> Trajectory:
    """Read a KITTI pose file.  Without ``stamps`` the line index is used."""
    mats = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) != 12:
            raise TrajectoryParseError(path, lineno, f"expected 12 values, got {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError as exc:
            raise TrajectoryParseError(path, lineno, str(exc)) from None
        T = np.eye(4)
        T[:3, :4] = vals.reshape(3, 4)
        mats.append(T)
    if stamps is None:
        stamps = np.arange(len(mats), dtype=float)
    return Trajectory(np.asarray(stamps, dtype=float), np.array(mats).reshape(-1, 4, 4))


def read_trajectory(path, fmt: str) -> Trajectory:
    if fmt == "tum":
        return read_tum(path)
    if fmt == "kitti":
        return read_kitti(path)
    raise ValueError(f"unknown trajectory format {fmt!r}")


def write_trajectory(traj: Trajectory, path, fmt: str) -> None:
    if fmt == "tum":
        write_tum(traj, path)
    elif fmt == "kitti":
        write_kitti(traj, path)
    else:
        raise ValueError(f"unknown trajectory format {fmt!r}")
