"""Synthetic world: analytic trajectory, IMU synthesis, textured box scene and
a pinhole camera.

The camera frame coincides with the body frame (x right, y down, z forward).
The world frame has z up and gravity ``(0, 0, -g)``.  The scene is a box seen
from inside: a front wall plus optional side walls, floor and ceiling, each
carrying a band-limited sum of 2-D sinusoids as its intensity texture.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import load_config, save_config
from .io import Trajectory, load_euroc_imu, load_groundtruth, write_euroc_imu, write_groundtruth
from .lie import Rotation, exp_batch, right_jacobian_batch
from .preintegration import BiasState, ImuNoise, ImuSample

NS = 1_000_000_000

# body z (optical axis) along world +x, body y (image down) along world -z
FORWARD_LOOKING = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


# ------------------------------------------------------------ trajectory ---

@dataclass
class TrajectoryModel:
    """Sum-of-sinusoids motion.

    ``p(t) = p0 + sum_k A_k (sin(w_k t + phi_k) - sin(phi_k))`` per axis, and
    ``R(t) = R0 exp(theta(t))`` with ``theta`` built the same way, so that
    ``p(0) = p0`` and ``R(0) = R0``.  Arrays are (3, K).
    """

    pos_amp: np.ndarray
    pos_freq: np.ndarray  # Hz
    pos_phase: np.ndarray
    rot_amp: np.ndarray  # rad
    rot_freq: np.ndarray
    rot_phase: np.ndarray
    p0: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R0: np.ndarray = field(default_factory=lambda: FORWARD_LOOKING.copy())
    duration: float = 10.0
    frame_rate: float = 20.0
    imu_rate: float = 200.0

    @classmethod
    def stationary(cls, R0=None, **kw) -> "TrajectoryModel":
        z = np.zeros((3, 1))
        return cls(z, z + 1, z, z, z + 1, z, R0=np.eye(3) if R0 is None else np.asarray(R0), **kw)

    @classmethod
    def random(cls, seed: int, amplitude=0.4, frequency=0.25, rot_amplitude=0.08, rot_frequency=0.3,
               n_terms=3, **kw) -> "TrajectoryModel":
        rng = np.random.default_rng(seed)
        decay = 1.0 / np.arange(1, n_terms + 1)
        pos_amp = amplitude * rng.uniform(0.5, 1.0, (3, n_terms)) * decay
        pos_amp[0] *= 0.5  # less motion along the optical axis
        pos_freq = frequency * rng.uniform(0.6, 1.0, (3, n_terms)) * np.arange(1, n_terms + 1) ** 0.5
        rot_amp = rot_amplitude * rng.uniform(0.5, 1.0, (3, n_terms)) * decay
        rot_freq = rot_frequency * rng.uniform(0.6, 1.0, (3, n_terms)) * np.arange(1, n_terms + 1) ** 0.5
        return cls(pos_amp, pos_freq, rng.uniform(0, 2 * np.pi, (3, n_terms)),
                   rot_amp, rot_freq, rng.uniform(0, 2 * np.pi, (3, n_terms)), **kw)

    def __post_init__(self):
        for name in ("pos_amp", "pos_freq", "pos_phase", "rot_amp", "rot_freq", "rot_phase"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3, -1))
        self.p0 = np.asarray(self.p0, dtype=float).reshape(3)
        self.R0 = np.asarray(self.R0, dtype=float).reshape(3, 3)
        ratio = self.imu_rate / self.frame_rate
        if self.imu_rate < 2 * self.frame_rate or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("IMU rate must be an integer multiple (>= 2) of the frame rate")

    @staticmethod
    def _series(t, amp, freq, phase, order):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        w = 2 * np.pi * freq
        arg = w[None] * t[:, None, None] + phase[None]
        if order == 0:
            return np.sum(amp * (np.sin(arg) - np.sin(phase)[None]), axis=-1)
        if order == 1:
            return np.sum(amp * w * np.cos(arg), axis=-1)
        return np.sum(-amp * w * w * np.sin(arg), axis=-1)

    def position(self, t):
        return self.p0 + self._series(t, self.pos_amp, self.pos_freq, self.pos_phase, 0)

    def velocity(self, t):
        return self._series(t, self.pos_amp, self.pos_freq, self.pos_phase, 1)

    def acceleration(self, t):
        return self._series(t, self.pos_amp, self.pos_freq, self.pos_phase, 2)

    def rotvec(self, t):
        return self._series(t, self.rot_amp, self.rot_freq, self.rot_phase, 0)

    def rotation(self, t) -> np.ndarray:
        """Body-to-world rotation matrices, shape (N, 3, 3)."""
        return self.R0 @ exp_batch(self.rotvec(t))

    def angular_rate(self, t) -> np.ndarray:
        """Body-frame angular rate: ``Jr(theta) theta_dot``."""
        th = self.rotvec(t)
        dth = self._series(t, self.rot_amp, self.rot_freq, self.rot_phase, 1)
        return np.einsum("nij,nj->ni", right_jacobian_batch(th), dth)

    def frame_timestamps(self) -> np.ndarray:
        n = int(round(self.duration * self.frame_rate))
        return np.arange(n + 1, dtype=np.int64) * int(round(NS / self.frame_rate))

    def imu_timestamps(self) -> np.ndarray:
        n = int(round(self.duration * self.imu_rate))
        return np.arange(n + 1, dtype=np.int64) * int(round(NS / self.imu_rate))


# ------------------------------------------------------------------ bias ---

@dataclass
class BiasProcess:
    """``b(t) = fixed + random walk + coupling @ [body accel, body rate]``.

    Vectors and the coupling output are ordered ``(b_a, b_g)``; the walk std
    is per sqrt(second).
    """

    fixed_bias: BiasState = field(default_factory=BiasState)
    walk_std: np.ndarray = field(default_factory=lambda: np.zeros(6))
    motion_coupling: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))

    def __post_init__(self):
        self.walk_std = np.broadcast_to(np.asarray(self.walk_std, dtype=float), (6,)).copy()
        self.motion_coupling = np.asarray(self.motion_coupling, dtype=float).reshape(6, 6)


def synth_imu(traj: TrajectoryModel, bias: BiasProcess, noise: ImuNoise | None, gravity=(0.0, 0.0, -9.81),
              seed: int = 0):
    """IMU readings at the trajectory's IMU timestamps.

    Returns ``(samples, bias_trace)`` with ``bias_trace`` of shape (N, 6) in
    ``(b_a, b_g)`` order.  ``noise=None`` means noise-free.
    """
    rng = np.random.default_rng(seed)
    ts = traj.imu_timestamps()
    t = ts * 1e-9
    n = ts.size
    R = traj.rotation(t)
    a_w = traj.acceleration(t)
    g = np.asarray(gravity, dtype=float)
    specific = np.einsum("nji,nj->ni", R, a_w - g)
    omega = traj.angular_rate(t)
    a_body = np.einsum("nji,nj->ni", R, a_w)

    dt = 1.0 / traj.imu_rate
    steps = rng.standard_normal((n, 6)) * bias.walk_std * np.sqrt(dt)
    steps[0] = 0.0
    walk = np.cumsum(steps, axis=0)
    coupled = np.hstack([a_body, omega]) @ bias.motion_coupling.T
    trace = bias.fixed_bias.vector() + walk + coupled

    gyro = omega + trace[:, 3:6]
    accel = specific + trace[:, 0:3]
    if noise is not None:
        white = rng.standard_normal((n, 6))
        gyro = gyro + white[:, 0:3] * noise.gyro_density / np.sqrt(dt)
        accel = accel + white[:, 3:6] * noise.accel_density / np.sqrt(dt)
    samples = [ImuSample(int(ts[i]), gyro[i], accel[i]) for i in range(n)]
    return samples, trace


# ----------------------------------------------------------------- camera ---

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, pixels: np.ndarray) -> np.ndarray:
        """Camera-frame rays with unit z for pixels (N, 2)."""
        pixels = np.atleast_2d(pixels)
        return np.stack([(pixels[:, 0] - self.cx) / self.fx, (pixels[:, 1] - self.cy) / self.fy,
                         np.ones(len(pixels))], axis=1)

    def inside(self, pixels: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= margin) & (pixels[:, 0] <= self.width - 1 - margin)
                & (pixels[:, 1] >= margin) & (pixels[:, 1] <= self.height - 1 - margin))


MIN_DEPTH = 1e-6


def project_batch(intr: CameraIntrinsics, R: np.ndarray, p: np.ndarray, points_w: np.ndarray):
    """Project world points through a camera with body-to-world ``(R, p)``.

    Returns ``(pixels (N, 2), depth (N,), valid (N,))``; points with depth at
    or below 1e-6 are flagged invalid and their pixels are NaN.
    """
    X = (np.atleast_2d(points_w) - p) @ R
    z = X[:, 2]
    valid = z > MIN_DEPTH
    zs = np.where(valid, z, np.nan)
    pix = np.stack([intr.fx * X[:, 0] / zs + intr.cx, intr.fy * X[:, 1] / zs + intr.cy], axis=1)
    return pix, z, valid


def project(intr: CameraIntrinsics, pose, point_w):
    """Pixel and depth of one world point; raises ``ValueError`` behind the camera."""
    pix, z, valid = project_batch(intr, pose.rotation.matrix(), pose.translation, np.asarray(point_w, dtype=float))
    if not valid[0]:
        raise ValueError(f"point at depth {z[0]:.3g} is behind the camera")
    return pix[0], float(z[0])


# ------------------------------------------------------------------ scene ---

@dataclass
class TexturedPlane:
    """Plane ``normal . x = offset`` (normal pointing away from the viewer)
    with texture ``base + sum a_k sin(k_k . (e1.x, e2.x) + phi_k)``."""

    normal: np.ndarray
    offset: float
    amplitudes: np.ndarray
    wavevectors: np.ndarray  # (K, 2) rad/m
    phases: np.ndarray
    base: float = 128.0

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=float) / np.linalg.norm(self.normal)
        helper = np.array([0.0, 0.0, 1.0]) if abs(self.normal[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = np.cross(helper, self.normal)
        self.e1 = e1 / np.linalg.norm(e1)
        self.e2 = np.cross(self.normal, self.e1)
        self.amplitudes = np.asarray(self.amplitudes, dtype=float).reshape(-1)
        self.wavevectors = np.asarray(self.wavevectors, dtype=float).reshape(-1, 2)
        self.phases = np.asarray(self.phases, dtype=float).reshape(-1)

    def texture(self, X: np.ndarray):
        """Intensity and its gradient w.r.t. the 3-D point (restricted to the plane)."""
        uv = np.stack([X @ self.e1, X @ self.e2], axis=1)
        arg = uv @ self.wavevectors.T + self.phases
        val = self.base + np.sin(arg) @ self.amplitudes
        g_uv = (np.cos(arg) * self.amplitudes) @ self.wavevectors
        g_x = g_uv[:, :1] * self.e1 + g_uv[:, 1:] * self.e2
        return val, g_x


@dataclass
class IntensityField:
    planes: list

    @classmethod
    def box(cls, seed=0, front=5.0, half_width=3.5, floor=1.5, ceiling=2.0, walls=True, n_waves=6,
            min_wavelength=0.3, max_wavelength=1.2, contrast=90.0) -> "IntensityField":
        rng = np.random.default_rng(seed)
        geo = [((1.0, 0.0, 0.0), front)]
        if walls:
            geo += [((0.0, 1.0, 0.0), half_width), ((0.0, -1.0, 0.0), half_width),
                    ((0.0, 0.0, -1.0), floor), ((0.0, 0.0, 1.0), ceiling)]
        planes = []
        for n, c in geo:
            lam = rng.uniform(min_wavelength, max_wavelength, n_waves)
            ang = rng.uniform(0, np.pi, n_waves)
            kv = (2 * np.pi / lam)[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            amp = rng.uniform(0.5, 1.0, n_waves)
            amp *= contrast / amp.sum()
            planes.append(TexturedPlane(n, c, amp, kv, rng.uniform(0, 2 * np.pi, n_waves)))
        return cls(planes)

    @classmethod
    def constant(cls, value=128.0, front=5.0) -> "IntensityField":
        return cls([TexturedPlane((1.0, 0.0, 0.0), front, [0.0], [[1.0, 0.0]], [0.0], base=value)])

    def intersect(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest forward hit of rays ``origin + s * dirs``.

        Returns ``(s (N,), plane index (N,), hit (N,))``.
        """
        dirs = np.atleast_2d(dirs)
        best = np.full(len(dirs), np.inf)
        idx = np.full(len(dirs), -1)
        for k, pl in enumerate(self.planes):
            nd = dirs @ pl.normal
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (pl.offset - origin @ pl.normal) / nd
            ok = (nd > 1e-12) & (s > 0) & (s < best)
            best = np.where(ok, s, best)
            idx = np.where(ok, k, idx)
        return best, idx, idx >= 0

    def point_depths(self, intr: CameraIntrinsics, R: np.ndarray, p: np.ndarray, pixels: np.ndarray):
        """World points seen at ``pixels`` and their camera depths (NaN on a miss)."""
        dirs = intr.rays(pixels) @ R.T
        s, _, hit = self.intersect(p, dirs)
        s = np.where(hit, s, np.nan)
        return p + s[:, None] * dirs, s

    def evaluate(self, X: np.ndarray, idx: np.ndarray):
        val = np.full(len(X), np.nan)
        grad = np.full((len(X), 3), np.nan)
        for k, pl in enumerate(self.planes):
            m = idx == k
            if np.any(m):
                val[m], grad[m] = pl.texture(X[m])
        return val, grad


def sample_intensity_batch(field_: IntensityField, intr: CameraIntrinsics, R: np.ndarray, p: np.ndarray,
                           pixels: np.ndarray):
    """Rendered intensity at sub-pixel locations and its pixel gradient.

    Returns ``(intensity (N,), gradient (N, 2), hit (N,))``; misses get NaN.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    dirs = intr.rays(pixels) @ R.T
    s, idx, hit = field_.intersect(p, dirs)
    s = np.where(hit, s, np.nan)
    X = p + s[:, None] * dirs
    val, gX = field_.evaluate(X, idx)
    normals = np.array([pl.normal for pl in field_.planes])[np.maximum(idx, 0)]
    nd = np.einsum("ij,ij->i", normals, dirs)
    # dX/ddir = s (I - dir n^T / (n . dir)); ddir/dpixel = R[:, :2] / f
    gdir = s[:, None] * (gX - np.einsum("ij,ij->i", gX, dirs)[:, None] * normals / nd[:, None])
    grad = np.stack([gdir @ R[:, 0] / intr.fx, gdir @ R[:, 1] / intr.fy], axis=1)
    return val, grad, hit


def sample_intensity(field_: IntensityField, intr: CameraIntrinsics, pose, pixel):
    """Scalar form; raises ``ValueError`` when the ray misses the scene."""
    val, grad, hit = sample_intensity_batch(field_, intr, pose.rotation.matrix(), pose.translation,
                                            np.asarray(pixel, dtype=float))
    if not hit[0]:
        raise ValueError(f"ray through pixel {pixel} misses the scene")
    return float(val[0]), grad[0]


# --------------------------------------------------------------- sequence ---

@dataclass
class SceneConfig:
    """Everything needed to regenerate a synthetic sequence."""

    seed: int = 0
    duration: float = 10.0
    frame_rate: float = 20.0
    imu_rate: float = 200.0
    gravity: float = 9.81
    motion_amplitude: float = 0.4
    motion_frequency: float = 0.25
    rotation_amplitude: float = 0.08
    rotation_frequency: float = 0.3
    front_wall: float = 5.0
    half_width: float = 3.5
    floor: float = 1.5
    ceiling: float = 2.0
    box_walls: bool = True
    texture_contrast: float = 90.0
    fx: float = 320.0
    fy: float = 320.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    gyro_noise_density: float = 1.7e-4
    accel_noise_density: float = 2.0e-3
    accel_bias: tuple[float, ...] = (0.05, -0.03, 0.08)
    gyro_bias: tuple[float, ...] = (0.004, -0.002, 0.003)
    accel_bias_walk: float = 3e-3
    gyro_bias_walk: float = 2e-4
    accel_coupling: float = 0.0  # scale of the random motion-coupling matrix, accel rows
    gyro_coupling: float = 0.0

    def noise(self) -> ImuNoise | None:
        if self.gyro_noise_density == 0 and self.accel_noise_density == 0:
            return None
        return ImuNoise(self.gyro_noise_density, self.accel_noise_density)


@dataclass
class SyntheticSequence:
    config: SceneConfig
    trajectory: TrajectoryModel
    field: IntensityField
    intrinsics: CameraIntrinsics
    bias_process: BiasProcess
    imu: list
    bias_trace: np.ndarray
    groundtruth: Trajectory  # at IMU rate, with velocity and bias columns

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.config.gravity])

    def frame_timestamps(self) -> np.ndarray:
        return self.trajectory.frame_timestamps()


def coupling_matrix(seed: int, accel_scale: float, gyro_scale: float) -> np.ndarray:
    rng = np.random.default_rng(seed + 7919)
    C = rng.uniform(-1.0, 1.0, (6, 6))
    C[0:3] *= accel_scale
    C[3:6] *= gyro_scale
    return C


def build_world(cfg: SceneConfig):
    traj = TrajectoryModel.random(cfg.seed, cfg.motion_amplitude, cfg.motion_frequency, cfg.rotation_amplitude,
                                  cfg.rotation_frequency, duration=cfg.duration, frame_rate=cfg.frame_rate,
                                  imu_rate=cfg.imu_rate)
    field_ = IntensityField.box(cfg.seed, cfg.front_wall, cfg.half_width, cfg.floor, cfg.ceiling, cfg.box_walls,
                                contrast=cfg.texture_contrast)
    intr = CameraIntrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height)
    walk = np.array([cfg.accel_bias_walk] * 3 + [cfg.gyro_bias_walk] * 3)
    bias = BiasProcess(BiasState(cfg.accel_bias, cfg.gyro_bias), walk,
                       coupling_matrix(cfg.seed, cfg.accel_coupling, cfg.gyro_coupling))
    return traj, field_, intr, bias


def simulate(cfg: SceneConfig, trajectory: TrajectoryModel | None = None) -> SyntheticSequence:
    """Render IMU and ground truth for ``cfg``; ``trajectory`` overrides the
    seeded random motion (its rates and duration are used as given)."""
    traj, field_, intr, bias = build_world(cfg)
    if trajectory is not None:
        traj = trajectory
    g = np.array([0.0, 0.0, -cfg.gravity])
    samples, trace = synth_imu(traj, bias, cfg.noise(), g, seed=cfg.seed)
    ts = traj.imu_timestamps()
    t = ts * 1e-9
    R = traj.rotation(t)
    quats = np.array([Rotation.from_matrix(r).q for r in R])
    gt = Trajectory(ts, traj.position(t), quats, traj.velocity(t), trace[:, 3:6], trace[:, 0:3])
    return SyntheticSequence(cfg, traj, field_, intr, bias, samples, trace, gt)


def export_sequence(seq: SyntheticSequence, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_euroc_imu(seq.imu, out / "imu.csv")
    write_groundtruth(seq.groundtruth, out / "groundtruth.csv")
    save_config(seq.config, out / "scene.cfg")
    return out


def load_sequence(seq_dir) -> SyntheticSequence:
    """Rebuild a sequence from its directory; IMU and ground truth come from the
    CSV files, the scene geometry from ``scene.cfg``."""
    d = Path(seq_dir)
    cfg = load_config(SceneConfig, d / "scene.cfg")
    traj, field_, intr, bias = build_world(cfg)
    imu = load_euroc_imu(d / "imu.csv").samples
    gt = load_groundtruth(d / "groundtruth.csv")
    trace = np.hstack([gt.accel_bias, gt.gyro_bias]) if gt.accel_bias is not None else np.zeros((len(gt), 6))
    return SyntheticSequence(cfg, traj, field_, intr, bias, imu, trace, gt)

