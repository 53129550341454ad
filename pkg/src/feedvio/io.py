"""IMU logs and trajectories on disk.

* EuRoC ASL ``imu.csv``: ``timestamp [ns], w_x, w_y, w_z [rad/s], a_x, a_y, a_z [m/s^2]``
* EuRoC ``state_groundtruth`` CSV: ``timestamp, p_xyz, q_wxyz, v_xyz, b_g xyz, b_a xyz``
  (only timestamp, position and quaternion are required; extra columns are ignored)
* TUM trajectory text: ``timestamp_s tx ty tz qx qy qz qw`` per line

Floats are written with ``repr`` so CSV round trips are bit-exact.  Timestamps
stay integer nanoseconds everywhere except in the TUM export.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preintegration import ImuSample

log = logging.getLogger(__name__)

IMU_HEADER = ("#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
              "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]")
GT_HEADER = ("#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],"
             "v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1],"
             "b_w_RS_S_x [rad s^-1],b_w_RS_S_y [rad s^-1],b_w_RS_S_z [rad s^-1],"
             "b_a_RS_S_x [m s^-2],b_a_RS_S_y [m s^-2],b_a_RS_S_z [m s^-2]")
QUAT_REPAIR_TOL = 1e-3


class DataError(ValueError):
    """Malformed or inconsistent input file."""


@dataclass
class ImuLog:
    samples: list
    path: str = ""
    rate_hz: float = 0.0


@dataclass
class Trajectory:
    """Timestamped poses; quaternions are ``(w, x, y, z)``, body to world.

    Optional per-pose velocity and bias columns ride along when known.
    """

    timestamps: np.ndarray  # int64 ns
    positions: np.ndarray  # (N, 3)
    quaternions: np.ndarray  # (N, 4)
    velocities: np.ndarray | None = None
    gyro_bias: np.ndarray | None = None
    accel_bias: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        n = self.timestamps.size
        self.positions = np.asarray(self.positions, dtype=float).reshape(n, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(n, 4)

    def __len__(self):
        return int(self.timestamps.size)

    def rotation_matrices(self) -> np.ndarray:
        w, x, y, z = self.quaternions.T
        R = np.empty((len(self), 3, 3))
        R[:, 0, 0] = 1 - 2 * (y * y + z * z)
        R[:, 0, 1] = 2 * (x * y - w * z)
        R[:, 0, 2] = 2 * (x * z + w * y)
        R[:, 1, 0] = 2 * (x * y + w * z)
        R[:, 1, 1] = 1 - 2 * (x * x + z * z)
        R[:, 1, 2] = 2 * (y * z - w * x)
        R[:, 2, 0] = 2 * (x * z - w * y)
        R[:, 2, 1] = 2 * (y * z + w * x)
        R[:, 2, 2] = 1 - 2 * (x * x + y * y)
        return R


# GroundTruthTrajectory and TrajectoryEstimate share one layout
GroundTruthTrajectory = Trajectory
TrajectoryEstimate = Trajectory


def _rows(path: Path):
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if row[0].lstrip().startswith("#") or not row[0].strip().lstrip("-").isdigit():
                if lineno == 1:
                    continue  # header
                raise DataError(f"{path}:{lineno}: bad timestamp {row[0]!r}")
            yield lineno, row


def load_euroc_imu(path) -> ImuLog:
    path = Path(path)
    samples, last = [], None
    for lineno, row in _rows(path):
        if len(row) < 7:
            raise DataError(f"{path}:{lineno}: expected 7 fields, got {len(row)}")
        try:
            ts = int(row[0])
            vals = [float(x) for x in row[1:7]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if not np.all(np.isfinite(vals)):
            raise DataError(f"{path}:{lineno}: non-finite reading")
        if last is not None and ts <= last:
            raise DataError(f"{path}:{lineno}: timestamp {ts} not after {last}")
        last = ts
        samples.append(ImuSample(ts, vals[0:3], vals[3:6]))
    if not samples:
        raise DataError(f"{path}: no IMU rows")
    rate = 0.0
    if len(samples) > 1:
        rate = (len(samples) - 1) / ((samples[-1].timestamp - samples[0].timestamp) * 1e-9)
        if not 50.0 <= rate <= 1000.0:
            log.warning("%s: IMU rate estimate %.1f Hz outside [50, 1000]", path, rate)
    return ImuLog(samples, str(path), rate)


def write_euroc_imu(samples, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(IMU_HEADER + "\n")
        for s in samples:
            vals = [*s.gyro.tolist(), *s.accel.tolist()]
            fh.write(f"{s.timestamp}," + ",".join(repr(v) for v in vals) + "\n")


def load_groundtruth(path) -> Trajectory:
    path = Path(path)
    ts, pos, quat, vel, bg, ba = [], [], [], [], [], []
    full = True
    for lineno, row in _rows(path):
        if len(row) < 8:
            raise DataError(f"{path}:{lineno}: expected at least 8 fields, got {len(row)}")
        try:
            t = int(row[0])
            vals = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        q = np.array(vals[3:7])
        n = np.linalg.norm(q)
        if abs(n - 1.0) > QUAT_REPAIR_TOL:
            raise DataError(f"{path}:{lineno}: quaternion norm {n:.6f} too far from 1")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        if ts and t <= ts[-1]:
            raise DataError(f"{path}:{lineno}: timestamp {t} not after {ts[-1]}")
        ts.append(t)
        pos.append(vals[0:3])
        quat.append(q)
        if len(vals) >= 16:
            vel.append(vals[7:10])
            bg.append(vals[10:13])
            ba.append(vals[13:16])
        else:
            full = False
    if not ts:
        raise DataError(f"{path}: no ground-truth rows")
    traj = Trajectory(np.array(ts, dtype=np.int64), np.array(pos), np.array(quat))
    if full:
        traj.velocities, traj.gyro_bias, traj.accel_bias = np.array(vel), np.array(bg), np.array(ba)
    return traj


def write_groundtruth(traj: Trajectory, path) -> None:
    n = len(traj)
    vel = traj.velocities if traj.velocities is not None else np.zeros((n, 3))
    bg = traj.gyro_bias if traj.gyro_bias is not None else np.zeros((n, 3))
    ba = traj.accel_bias if traj.accel_bias is not None else np.zeros((n, 3))
    with open(path, "w", newline="\n") as fh:
        fh.write(GT_HEADER + "\n")
        for i in range(n):
            vals = np.concatenate([traj.positions[i], traj.quaternions[i], vel[i], bg[i], ba[i]])
            fh.write(f"{int(traj.timestamps[i])}," + ",".join(repr(float(v)) for v in vals) + "\n")


def write_tum_trajectory(traj: Trajectory, path) -> None:
    """Nine significant digits per field, quaternion reordered to ``x y z w``."""
    with open(path, "w", newline="\n") as fh:
        for i in range(len(traj)):
            t = int(traj.timestamps[i])
            w, x, y, z = traj.quaternions[i]
            # seconds with full ns resolution so the timestamp survives the trip
            stamp = f"{t // 1_000_000_000}.{t % 1_000_000_000:09d}"
            vals = [*traj.positions[i], x, y, z, w]
            fh.write(stamp + " " + " ".join(f"{v:.9g}" for v in vals) + "\n")


def read_tum_trajectory(path) -> Trajectory:
    path = Path(path)
    ts, pos, quat = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                sec, _, frac = parts[0].partition(".")
                t = int(sec) * 1_000_000_000 + int((frac + "000000000")[:9])
                vals = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            ts.append(t)
            pos.append(vals[0:3])
            x, y, z, w = vals[3:7]
            q = np.array([w, x, y, z])
            quat.append(q / np.linalg.norm(q))
    if not ts:
        return Trajectory(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 4)))
    return Trajectory(np.array(ts, dtype=np.int64), np.array(pos), np.array(quat))
