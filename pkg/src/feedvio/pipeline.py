"""The tracking loop: map initialization, inertial initialization, per-frame
tracking, feedback to both predictors, keyframing and epoch replay.

Two regimes:

* ``online_learning``: feedback losses update the bias predictor every
  iteration and the correspondence corrector every ``visual_update_every``
  iterations; IMU factors only link the last ``imu_tail`` keyframes.
* ``deployment``: no parameter updates; IMU factors link every keyframe pair
  in the window and low-disparity older keyframes are linked back in as
  covisibility pairs.

An epoch replays the whole sequence from a fresh estimator; predictor
parameters and normalization statistics carry over.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import biasnet
from .config import dump_config, load_config, parse_config
from .evaluation import align
from .frontend import (
    LearnableCorrector,
    OracleNoisy,
    Pose,
    clamped_depth_columns,
    corrector_init,
    measurement_sensitivity,
    photometric_loss,
    sample_patches,
)
from .io import Trajectory, write_tum_trajectory
from .lie import Rotation, so3_exp, so3_log
from .params import ClippedSGD, ParamSet
from .preintegration import BiasState, ImuNoise, bias_correct, compose, integrate_batch
from .sim import SyntheticSequence
from .viba import (
    BiasFactor,
    FactorGraph,
    ImuFactor,
    KeyframeState,
    VisualFactors,
    build_normal_system,
    gauss_newton,
    preintegration_residual,
)

log = logging.getLogger(__name__)

MODES = ("online_learning", "deployment")


class DivergenceError(RuntimeError):
    pass


@dataclass
class SessionConfig:
    mode: str = "online_learning"
    seed: int = 0
    window_size: int = 10
    patches_per_frame: int = 96
    association_span: int = 13
    viba_iters: int = 2
    imu_loss_span: int = 2
    photo_loss_span: int = 4
    visual_update_every: int = 100
    bias_update_every: int = 1
    max_keyframe_gap: int = 3
    covisibility_cap: int = 8
    imu_tail: int = 4
    lr_visual: float = 1e-5
    lr_bias_ba: float = 1e-4
    lr_bias_viba: float = 1e-6
    epochs: int = 60
    visual_ba_epochs: int = 30
    init_frames: int = 8
    imu_init_first: int = 40
    imu_init_second: int = 80
    init_parallax_px: float = 15.0
    cull_disparity_px: float = 8.0
    init_iters: int = 40
    damping: float = 1e-6
    sigma_accel_bias: float = 1e-2
    sigma_gyro_bias: float = 1e-3
    gyro_noise_density: float = 1.7e-4
    accel_noise_density: float = 2.0e-3
    gravity: float = 9.81
    gravity_misfit: float = 0.1  # relative error of the unconstrained gravity estimate
    imu_init_span: float = 1.0  # longest keyframe span in the inertial alignment, seconds
    pixel_std: float = 1.0
    outlier_rate: float = 0.05
    outlier_std: float = 20.0
    matcher_offset: tuple[float, ...] = (0.0, 0.0)
    matcher_radial: float = 0.0
    corrector: bool = True
    corrector_output_scale: float = 1.0
    bias_predictor: str = "network"  # or random_walk
    clip_norm: float = 1.0  # 0 disables clipping
    divergence_factor: float = 100.0
    max_frames: int = 0  # 0 = whole sequence

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bias_predictor not in ("network", "random_walk"):
            raise ValueError(f"unknown bias predictor {self.bias_predictor!r}")
        if self.window_size < 2 or self.association_span < 1:
            raise ValueError("window needs at least two keyframes and one association")

    @property
    def sigma_b(self) -> np.ndarray:
        return np.array([self.sigma_accel_bias] * 3 + [self.sigma_gyro_bias] * 3)

    @property
    def imu_noise(self) -> ImuNoise:
        return ImuNoise(self.gyro_noise_density, self.accel_noise_density)


def load_session_config(path, **overrides) -> SessionConfig:
    return load_config(SessionConfig, path, **overrides)


def parse_session_config(text: str, **overrides) -> SessionConfig:
    return parse_config(SessionConfig, text, **overrides)


@dataclass
class Predictors:
    """Everything that persists across epochs."""

    bias_params: ParamSet
    bias_stats: biasnet.NormalizationStats
    corrector_params: ParamSet

    @classmethod
    def fresh(cls, seed: int = 0) -> "Predictors":
        return cls(biasnet.init_params(seed), biasnet.NormalizationStats(), corrector_init(seed))

    def copy(self) -> "Predictors":
        s = self.bias_stats
        stats = biasnet.NormalizationStats.from_dict(s.as_dict())
        return Predictors(ParamSet(dict(self.bias_params)), stats, ParamSet(dict(self.corrector_params)))


def fit_bias_stats(seq: SyntheticSequence, cfg: SessionConfig) -> biasnet.NormalizationStats:
    """Measurement statistics from the whole IMU log; bias statistics centred
    at zero with the bias-prior spread.  Frozen so replays are reproducible."""
    stats = biasnet.NormalizationStats(bias_mean=np.zeros(6), bias_std=cfg.sigma_b)
    stats.update_measurements(seq.imu)
    stats.freeze()
    return stats


# ------------------------------------------------------------ bookkeeping ---

@dataclass
class FrameRecord:
    frame_id: int
    timestamp: int
    position: np.ndarray
    rotation: np.ndarray
    failed: bool = False


@dataclass
class PredictionRecord:
    frame_id: int
    prediction: biasnet.BiasPrediction | None
    bias: BiasState
    prev_bias: BiasState | None = None
    samples: list | None = None


@dataclass
class SessionState:
    graph: FactorGraph
    phase: str = "map_init"  # map_init -> imu_init -> tracking, forward only
    imu_initialized: bool = False
    iteration: int = 0
    epoch: int = 0
    frames_tracked: int = 0
    diagnostics: list = field(default_factory=list)


@dataclass
class EpochResult:
    epoch: int
    trajectory: Trajectory
    ate: float
    l_imu: float
    l_visual: float
    failed_frames: int
    keyframe_ids: list
    imu_init: list
    residuals: dict = field(default_factory=dict)


def _disparity(graph: FactorGraph, host: int, target: int) -> float:
    vf = graph.visual
    m = (vf.host == host) & (vf.target == target)
    if not np.any(m):
        return np.inf
    px = graph.keyframe(host).patch_pixels[vf.slot[m]]
    return float(np.mean(np.linalg.norm(vf.meas[m] - px, axis=1)))


class Session:
    """One pass over a sequence.  ``learn`` enables parameter updates and
    ``use_imu`` puts IMU and bias factors into the window optimization."""

    def __init__(self, seq: SyntheticSequence, cfg: SessionConfig, predictors: Predictors, *, learn: bool,
                 use_imu: bool, lr_bias: float = 0.0, lr_visual: float = 0.0, epoch: int = 0):
        self.seq = seq
        self.cfg = cfg
        self.pred = predictors
        self.learn = learn and cfg.mode == "online_learning"
        self.use_imu = use_imu
        self.lr_bias = lr_bias
        self.lr_visual = lr_visual
        self.intr = seq.intrinsics
        self.state = SessionState(FactorGraph(self.intr, np.array([0.0, 0.0, -cfg.gravity])), epoch=epoch)
        base = OracleNoisy(cfg.pixel_std, cfg.outlier_rate, cfg.outlier_std, seed=cfg.seed * 7919 + 1,
                           offset=tuple(cfg.matcher_offset), radial=cfg.matcher_radial)
        self.provider = (LearnableCorrector(base, predictors.corrector_params, cfg.corrector_output_scale)
                         if cfg.corrector else base)
        self.base_provider = base
        self.sgd_bias = ClippedSGD(cfg.clip_norm or None)
        self.sgd_visual = ClippedSGD(cfg.clip_norm or None)

        self.frame_ts = seq.frame_timestamps()
        self.imu_ts = np.array([s.timestamp for s in seq.imu], dtype=np.int64)
        self.records: dict[int, FrameRecord] = {}
        self.history: dict[int, KeyframeState] = {}  # keyframes retired from the window
        self.chain: list[int] = []  # retained keyframe ids in order, for the inertial chain
        self.preds: dict[int, PredictionRecord] = {}
        self.edge_store: dict[int, tuple] = {}  # uid -> (features, base match)
        self.next_uid = 0
        self.init_buffer: list[int] = []
        self.imu_init_log: list[dict] = []
        self.l_imu: list[float] = []
        self.l_visual: list[float] = []
        self.cull_run = 0
        self.truth_cache: dict[int, Pose] = {}
        self.visual_enabled = True  # switching off leaves pure inertial propagation
        self.segments: dict[tuple, list] = {}
        self.culled: set = set()
        self.covis_counts: list[int] = []

    # ------------------------------------------------------------ helpers --

    @property
    def graph(self) -> FactorGraph:
        return self.state.graph

    def truth(self, frame: int) -> Pose:
        if frame not in self.truth_cache:
            t = self.frame_ts[frame] * 1e-9
            tr = self.seq.trajectory
            self.truth_cache[frame] = Pose(tr.rotation(t)[0], tr.position(t)[0])
        return self.truth_cache[frame]

    def segment(self, f0: int, f1: int) -> list:
        i0, i1 = np.searchsorted(self.imu_ts, [self.frame_ts[f0], self.frame_ts[f1]])
        if i1 >= len(self.imu_ts) or self.imu_ts[i0] != self.frame_ts[f0] or self.imu_ts[i1] != self.frame_ts[f1]:
            raise ValueError(f"IMU log does not cover frames {f0}..{f1}")
        return self.seq.imu[i0:i1 + 1]

    def _state_of(self, fid: int) -> KeyframeState:
        try:
            return self.graph.keyframe(fid)
        except KeyError:
            return self.history[fid]

    def _predict(self, host: int, target: int, centers: np.ndarray):
        return self.provider.predict(self.seq.field, self.intr, host, target, self.truth(host), self.truth(target),
                                     centers)

    def _add_edges(self, c):
        if len(c.slots) == 0:
            return
        uids = np.arange(self.next_uid, self.next_uid + len(c.slots))
        self.next_uid += len(c.slots)
        self.graph.visual.append(np.full(len(c.slots), c.host), c.slots, np.full(len(c.slots), c.target), c.meas,
                                 c.confidence**2, uids)
        if c.features is not None:
            for u, f, b in zip(uids, c.features, c.base):
                self.edge_store[int(u)] = (f, b)

    def _connect(self, new_id: int, targets):
        centers = self.graph.keyframe(new_id).patch_pixels
        for t in targets:
            self._add_edges(self._predict(new_id, t, centers))
            self._add_edges(self._predict(t, new_id, self.graph.keyframe(t).patch_pixels))

    def _median_inverse_depth(self) -> float:
        d = [kf.inverse_depths for kf in self.graph.keyframes if len(kf.inverse_depths)]
        return float(np.median(np.concatenate(d))) if d else 1.0

    def _record_all(self):
        for kf in self.graph.keyframes:
            rec = self.records.get(kf.frame_id)
            if rec is not None:
                rec.position = kf.position.copy()
                rec.rotation = kf.R

    # ------------------------------------------------------ map initialize --

    def initialize_map(self, frames: list) -> bool:
        """Visual-only bundle adjustment over ``init_frames`` frames starting
        from identity poses and unit inverse depths.  Returns False (and keeps
        waiting) when the parallax between the first and last frame is low."""
        if len(frames) != self.cfg.init_frames:
            raise ValueError(f"map initialization takes exactly {self.cfg.init_frames} frames")
        centers0, _ = sample_patches(frames[0], self.intr, self.cfg.seed, 1.0, self.cfg.patches_per_frame)
        c = self.base_provider.predict(self.seq.field, self.intr, frames[0], frames[-1], self.truth(frames[0]),
                                       self.truth(frames[-1]), centers0)
        parallax = float(np.mean(np.linalg.norm(c.meas - centers0[c.slots], axis=1))) if len(c.slots) else 0.0
        if parallax < self.cfg.init_parallax_px:
            self.state.diagnostics.append(f"map init: parallax {parallax:.2f} px below threshold, waiting")
            return False
        g = self.graph
        for i, f in enumerate(frames):
            centers, inv = sample_patches(f, self.intr, self.cfg.seed, 1.0, self.cfg.patches_per_frame)
            g.keyframes.append(KeyframeState(f, int(self.frame_ts[f]), np.zeros(3), Rotation.identity(),
                                             patch_pixels=centers, inverse_depths=inv, fixed=(i == 0)))
            self.records[f] = FrameRecord(f, int(self.frame_ts[f]), np.zeros(3), np.eye(3))
        for i, h in enumerate(frames):
            for t in frames:
                if t != h:
                    self._add_edges(self._predict(h, t, g.keyframe(h).patch_pixels))
        for a, b in zip(frames[:-1], frames[1:]):
            self._link(a, b)
        g.use_imu = g.use_bias = False
        for _ in range(self.cfg.init_iters):
            rep = gauss_newton(g, 1, damping=max(self.cfg.damping, 1e-4))
            self._normalize_scale()
            if rep.aborted or (rep.costs[-1] < 1e-20 or (rep.step_norms and rep.step_norms[-1] < 1e-12)):
                break
        self.chain = list(frames)
        self.state.phase = "imu_init"
        self._record_all()
        self.state.diagnostics.append(f"map initialized on frames {frames[0]}..{frames[-1]}")
        return True

    def _normalize_scale(self):
        """Hold the median inverse depth at 1 while the map has no metric scale."""
        med = self._median_inverse_depth()
        if not np.isfinite(med) or med <= 0:
            return
        p0 = self.graph.keyframes[0].position
        for kf in self.graph.keyframes:
            kf.position = p0 + (kf.position - p0) * med
            kf.inverse_depths = kf.inverse_depths / med

    # ------------------------------------------------------ inertial chain --

    def _link(self, a: int, b: int):
        self.segments[(a, b)] = self.segment(a, b)

    def _preint(self, a: int, b: int, bias: BiasState):
        return integrate_batch(self.segments[(a, b)], bias, self.cfg.imu_noise)

    def _rebuild_inertial_factors(self):
        g = self.graph
        ids = g.ids
        if self.cfg.mode == "online_learning":
            pairs = list(zip(ids[-self.cfg.imu_tail:][:-1], ids[-self.cfg.imu_tail:][1:]))
        else:
            free = {kf.frame_id for kf in g.keyframes if not kf.fixed}
            pairs = [(a, b) for a, b in zip(ids[:-1], ids[1:]) if b in free and (a, b) in self.segments]
        pairs = [p for p in pairs if p in self.segments]
        old = {(f.id_k, f.id_k1): f for f in g.imu}
        g.imu = []
        for a, b in pairs:
            ref = g.keyframe(a).bias
            f = old.get((a, b))
            if f is None or np.abs(f.preint.reference_bias.vector() - ref.vector()).max() > 1e-2:
                f = ImuFactor(a, b, self._preint(a, b, ref))
            g.imu.append(f)
        used = {fid for p in pairs for fid in p}
        g.bias = [BiasFactor(fid, self.preds[fid].bias, self.cfg.sigma_b) for fid in sorted(used)
                  if fid in self.preds and not g.keyframe(fid).fixed]

    # --------------------------------------------------- imu initialization --

    def initialize_imu(self) -> bool:
        """Linear least squares for per-keyframe velocities, metric scale,
        gravity and accelerometer bias, after a gyroscope-bias fit on the
        rotations.  Applies scale and a gravity-aligning rotation to every
        state on success."""
        ids = [f for f in self.chain if (f in self.history or f in self.graph.ids)]
        pairs = [(a, b) for a, b in zip(ids[:-1], ids[1:]) if (a, b) in self.segments]
        info = {"frame": self.state.frames_tracked, "ok": False}
        if len(pairs) < 4:
            self.imu_init_log.append(info)
            return False
        states = {f: self._state_of(f) for f in ids}
        bias = states[ids[0]].bias
        # a second pass re-integrates at the first estimate, removing the
        # linearization error of the bias correction
        for _ in range(2):
            est = self._inertial_least_squares(ids, pairs, states, bias)
            if est is None:
                break
            s, g_dir, vel, bias, gnorm, bias_std = est
        info.update(scale=float(est[0]) if est else float("nan"), gravity_norm=est[4] if est else float("nan"))
        if est is None or not np.isfinite(s) or s <= 0:
            self.imu_init_log.append(info)
            self.state.diagnostics.append(f"imu init rejected at {info['frame']} frames: {info}")
            return False

        R_align = _align_to_down(g_dir)
        p0 = states[ids[0]].position.copy()

        def transform(kf: KeyframeState, v=None):
            kf.position = R_align @ (s * (kf.position - p0))
            kf.orientation = Rotation.from_matrix(R_align @ kf.R)
            kf.velocity = R_align @ (v if v is not None else kf.velocity * s)
            kf.inverse_depths = kf.inverse_depths / s
            kf.bias = bias

        for kf in self.graph.keyframes:
            transform(kf, vel.get(kf.frame_id))
        for fid, kf in self.history.items():
            transform(kf, vel.get(fid))
        for rec in self.records.values():
            rec.position = R_align @ (s * (rec.position - p0))
            rec.rotation = R_align @ rec.rotation
        info.update(ok=True, gravity_dir=(R_align.T @ np.array([0, 0, -1.0])).tolist(),
                    accel_bias=bias.accel_bias.tolist(), gyro_bias=bias.gyro_bias.tolist(),
                    bias_std=bias_std.tolist())
        self.imu_init_log.append(info)
        self.state.imu_initialized = True
        self.state.phase = "tracking"
        self.state.diagnostics.append(f"imu init at {info['frame']} frames: scale {s:.6f}")
        for fid, rec in list(self.preds.items()):
            if rec.prediction is None:
                self.preds[fid] = replace(rec, bias=bias)
        return True

    def _inertial_least_squares(self, ids, pairs, states, ref: BiasState):
        """One pass of the inertial alignment at linearization bias ``ref``.

        Returns ``(scale, gravity direction in the current frame, velocities
        by frame id (already metric), bias, |g| of the free fit, bias std)``
        or None when the free gravity estimate misses the nominal magnitude.
        """
        pre = {p: self._preint(*p, ref) for p in pairs}
        # every keyframe span up to imu_init_span seconds: visual position
        # noise enters the position rows independently of the span length,
        # so long spans carry most of the information on gravity and bias
        spans = {}
        for i, (a, c) in enumerate(pairs):
            P = pre[(a, c)]
            P_end = c
            spans[(a, c)] = P
            for a2, c2 in pairs[i + 1:]:
                if a2 != P_end or P.dt_total + pre[(a2, c2)].dt_total > self.cfg.imu_init_span + 1e-9:
                    break
                P_end = c2
                P = compose(P, pre[(a2, c2)])
                spans[(a, c2)] = P

        # gyroscope bias from relative rotations
        dbg = np.zeros(3)
        for _ in range(4):
            H = np.zeros((3, 3))
            b = np.zeros(3)
            for (a, c), P in spans.items():
                gam = P.gamma * so3_exp(P.J_gamma_bg @ dbg)
                r = so3_log(Rotation.from_matrix(gam.matrix().T @ states[a].R.T @ states[c].R))
                J = P.J_gamma_bg
                H += J.T @ J
                b += J.T @ r
            dbg = dbg + np.linalg.solve(H + 1e-12 * np.eye(3), b)
        rot_res = [so3_log(Rotation.from_matrix((P.gamma * so3_exp(P.J_gamma_bg @ dbg)).matrix().T
                                                @ states[a].R.T @ states[c].R)) for (a, c), P in spans.items()]
        dof = max(3 * len(rot_res) - 3, 1)
        gyro_std = np.sqrt(np.diag(np.linalg.inv(H + 1e-12 * np.eye(3))) * np.sum(np.square(rot_res)) / dof)

        nv = 3 * len(ids)
        col = {f: 3 * i for i, f in enumerate(ids)}

        def solve(g_fixed):
            n = nv + 1 + 3 + (0 if g_fixed is not None else 3)
            rows, rhs = [], []
            for (a, c), P in spans.items():
                dt = P.dt_total
                Ra = states[a].R
                corr = P.bias_jacobian[:, 3:6] @ dbg
                A = np.zeros((6, n))
                # Ra^T (s dp - va dt - g dt^2 / 2) - J_alpha_ba dba = alpha
                A[0:3, col[a]:col[a] + 3] = -Ra.T * dt
                A[0:3, nv] = Ra.T @ (states[c].position - states[a].position)
                A[0:3, nv + 1:nv + 4] = -P.J_alpha_ba
                # Ra^T (vc - va - g dt) - J_beta_ba dba = beta
                A[3:6, col[a]:col[a] + 3] = -Ra.T
                A[3:6, col[c]:col[c] + 3] = Ra.T
                A[3:6, nv + 1:nv + 4] = -P.J_beta_ba
                y = np.concatenate([P.alpha + corr[0:3], P.beta + corr[3:6]])
                if g_fixed is None:
                    A[0:3, nv + 4:nv + 7] = -0.5 * Ra.T * dt * dt
                    A[3:6, nv + 4:nv + 7] = -Ra.T * dt
                else:
                    y = y + np.concatenate([0.5 * Ra.T @ g_fixed * dt * dt, Ra.T @ g_fixed * dt])
                rows.append(A)
                rhs.append(y)
            A = np.vstack(rows)
            y = np.concatenate(rhs)
            x, *_ = np.linalg.lstsq(A, y, rcond=None)
            # posterior spread of the estimate from the residual scatter
            res = y - A @ x
            s2 = float(res @ res) / max(len(y) - n, 1)
            cov = s2 * np.linalg.pinv(A.T @ A)
            return x, np.sqrt(np.clip(np.diag(cov), 0.0, None))

        x, _ = solve(None)
        g_est = x[nv + 4:nv + 7]
        gnorm = float(np.linalg.norm(g_est))
        if not np.isfinite(gnorm) or abs(gnorm - self.cfg.gravity) > self.cfg.gravity_misfit * self.cfg.gravity:
            return None
        g_dir = g_est / gnorm
        x, std = solve(g_dir * self.cfg.gravity)
        bias = BiasState(ref.accel_bias + x[nv + 1:nv + 4], ref.gyro_bias + dbg)
        vel = {f: x[col[f]:col[f] + 3] for f in ids}
        bias_std = np.concatenate([std[nv + 1:nv + 4], gyro_std])
        return float(x[nv]), g_dir, vel, bias, gnorm, bias_std

    # -------------------------------------------------------------- track --

    def _bias_prediction(self, prev: KeyframeState, samples) -> PredictionRecord:
        if self.cfg.bias_predictor == "random_walk":
            return PredictionRecord(-1, None, biasnet.random_walk_predict(prev.bias), prev.bias, samples)
        p = biasnet.predict(self.pred.bias_params, self.pred.bias_stats, prev.bias, samples)
        return PredictionRecord(-1, p, p.predicted_bias, prev.bias, samples)

    def track_frame(self, frame: int) -> bool:
        if self.state.phase == "map_init":
            raise RuntimeError("track_frame before map initialization")
        g = self.graph
        last = g.keyframes[-1]
        samples = self.segment(last.frame_id, frame)
        rec = self._bias_prediction(last, samples)
        rec.frame_id = frame
        self.preds[frame] = rec
        self.segments[(last.frame_id, frame)] = samples
        snap = g.snapshot()

        if self.state.imu_initialized:
            P = integrate_batch(samples, last.bias, self.cfg.imu_noise)
            alpha, beta, gamma = bias_correct(P, last.bias)
            dt = P.dt_total
            gv = g.gravity
            Ra = last.R
            pos = last.position + last.velocity * dt + 0.5 * gv * dt * dt + Ra @ alpha
            vel = last.velocity + gv * dt + Ra @ beta
            rot = Rotation.from_matrix(Ra @ gamma.matrix())
            bias = rec.bias if self.use_imu else last.bias
        else:
            prev = g.keyframes[-2]
            k = (frame - last.frame_id) / max(last.frame_id - prev.frame_id, 1)
            dR = prev.R.T @ last.R
            rot = last.orientation * so3_exp(k * so3_log(Rotation.from_matrix(dR)))
            pos = last.position + k * (last.position - prev.position)
            vel = last.velocity
            bias = last.bias
        centers, inv = sample_patches(frame, self.intr, self.cfg.seed, self._median_inverse_depth(),
                                      self.cfg.patches_per_frame)
        kf = KeyframeState(frame, int(self.frame_ts[frame]), pos, rot, vel, bias, centers, inv)
        g.keyframes.append(kf)
        self.chain.append(frame)
        self.records[frame] = FrameRecord(frame, int(self.frame_ts[frame]), pos.copy(), rot.matrix())

        targets = [k.frame_id for k in g.keyframes[:-1]][-self.cfg.association_span:]
        g.use_visual = self.visual_enabled
        if self.visual_enabled:
            self._connect(frame, targets)
            if self.cfg.mode == "deployment":
                self.build_covisibility(frame, targets)
        self._maintain_window()
        if self.visual_enabled:
            self._seed_new_keyframe(frame)
        g.use_imu = g.use_bias = self.state.imu_initialized and self.use_imu
        if g.use_imu:
            self._rebuild_inertial_factors()
        else:
            g.imu, g.bias = [], []

        rep = gauss_newton(g, self.cfg.viba_iters, damping=self.cfg.damping, keep_system=self.learn)
        self.last_report = rep
        failed = rep.aborted or not np.isfinite(rep.costs[-1])
        if failed:
            by_id = {k.frame_id: k for k in snap}
            for k in g.keyframes:
                if k.frame_id in by_id:
                    src = by_id[k.frame_id]
                    k.position, k.orientation, k.velocity = src.position, src.orientation, src.velocity
                    k.bias, k.inverse_depths = src.bias, src.inverse_depths
            self.records[frame].failed = True
            self.state.diagnostics.append(f"frame {frame}: solve failed, previous states kept")
        self.state.frames_tracked += 1
        self._record_all()
        return not failed

    def _seed_new_keyframe(self, frame: int, iters: int = 3):
        """Refine the motion-model guess before the joint solve: align the new
        pose to the existing patches, then fit the new patches' depths."""
        g = self.graph
        vf = g.visual
        new = g.keyframe(frame)
        for free_pose, mask in ((True, vf.target == frame), (False, vf.host == frame)):
            if not np.any(mask):
                continue
            sub = VisualFactors(vf.host[mask], vf.slot[mask], vf.target[mask], vf.meas[mask], vf.weight[mask],
                                vf.uid[mask])
            kfs = []
            for kf in g.keyframes:
                if kf.frame_id != frame and not (np.any(sub.host == kf.frame_id) or np.any(sub.target == kf.frame_id)):
                    continue
                c = kf.copy()
                c.fixed = not (free_pose and kf.frame_id == frame)
                c.depths_fixed = free_pose or kf.frame_id != frame
                kfs.append(c)
            tmp = FactorGraph(g.intrinsics, g.gravity, kfs, sub, use_imu=False, use_bias=False)
            gauss_newton(tmp, iters, damping=1e-4)
            out = tmp.keyframe(frame)
            if free_pose:
                new.position, new.orientation = out.position, out.orientation
            else:
                new.inverse_depths = out.inverse_depths

    def _maintain_window(self):
        g = self.graph
        keep_n = self.cfg.association_span + 1
        ids = g.ids
        recent = set(ids[-keep_n:])
        free = set(ids[-self.cfg.window_size:])
        for kf in g.keyframes:
            kf.fixed = kf.frame_id not in free
            kf.depths_fixed = kf.fixed
        if len(ids) > 1 and ids[0] not in free:
            pass
        vf = g.visual
        both_fixed = ~np.isin(vf.host, list(free)) & ~np.isin(vf.target, list(free))
        if np.any(both_fixed):
            vf.keep(~both_fixed)
        linked = set(vf.host.tolist()) | set(vf.target.tolist())
        for kf in list(g.keyframes):
            if kf.frame_id in recent:
                continue
            if kf.frame_id in self.history or kf.frame_id not in linked:
                self.history[kf.frame_id] = kf.copy()
                g.remove_keyframe(kf.frame_id)
        live = set(vf.uid.tolist())
        if len(self.edge_store) > 2 * len(live) + 1000:
            self.edge_store = {u: v for u, v in self.edge_store.items() if u in live}

    # ------------------------------------------------------- covisibility --

    def build_covisibility(self, new_id: int, associated) -> int:
        """Link retired keyframes whose disparity to ``new_id`` is below the
        median disparity of the associated keyframes.  Deployment mode only."""
        if self.cfg.mode != "deployment":
            raise RuntimeError("covisibility factors are a deployment-mode feature")
        centers = self.graph.keyframe(new_id).patch_pixels
        disp = []
        for t in associated:
            c = self.base_provider.predict(self.seq.field, self.intr, new_id, t, self.truth(new_id), self.truth(t),
                                           centers)
            if len(c.slots):
                disp.append(np.mean(np.linalg.norm(c.meas - centers[c.slots], axis=1)))
        if not disp:
            self.covis_counts.append(0)
            return 0
        med = float(np.median(disp))
        cands = []
        in_graph = set(self.graph.ids)
        for fid, kf in self.history.items():
            if fid in in_graph or fid in self.culled:
                continue
            c = self.base_provider.predict(self.seq.field, self.intr, new_id, fid, self.truth(new_id),
                                           self.truth(fid), centers)
            if len(c.slots) < max(8, len(centers) // 4):
                continue
            d = float(np.mean(np.linalg.norm(c.meas - centers[c.slots], axis=1)))
            if d < med:
                cands.append((d, fid))
        cands.sort()
        added = 0
        for _, fid in cands[:self.cfg.covisibility_cap]:
            kf = self.history[fid].copy()
            kf.fixed = kf.depths_fixed = True
            pos = int(np.searchsorted(self.graph.ids, fid))
            self.graph.keyframes.insert(pos, kf)
            self._connect(new_id, [fid])
            added += 1
        if added:
            self.state.diagnostics.append(f"frame {new_id}: {added} covisibility pairs")
        self.covis_counts.append(added)
        return added

    @property
    def covis_pairs(self) -> int:
        return int(sum(self.covis_counts))

    # ------------------------------------------------------------ culling --

    def keyframe_cull(self) -> int | None:
        """Drop keyframe ``t-4`` when keyframes ``t-5`` and ``t-3`` see each
        other with low disparity and the resulting gap stays within
        ``max_keyframe_gap`` frames.  Returns the removed id."""
        g = self.graph
        chain = [f for f in self.chain if f in set(g.ids)]
        if len(chain) < 6:
            return None
        a, c, b = chain[-6], chain[-5], chain[-4]
        if g.keyframe(c).fixed or b - a > self.cfg.max_keyframe_gap:
            self.cull_run = 0
            return None
        if self.cfg.mode == "deployment" and self.cull_run >= 2:
            self.cull_run = 0
            return None
        if _disparity(g, a, b) >= self.cfg.cull_disparity_px:
            self.cull_run = 0
            return None
        g.remove_keyframe(c)
        self.chain.remove(c)
        self.culled.add(c)
        self.segments[(a, b)] = self.segments.pop((a, c))[:-1] + self.segments.pop((c, b))
        self.cull_run += 1
        return c

    # ----------------------------------------------------------- feedback --

    def imu_loss(self, biases: dict | None = None):
        """``|r_p|^2 + |r_v|^2 + |r_theta|^2`` over the last ``imu_loss_span``
        keyframe intervals with preintegration corrected to the predicted bias.

        Returns ``(loss, [(prediction record, d loss / d bias)])``.  ``biases``
        maps frame ids to bias values that replace the recorded predictions.  Without
        inertial factors in the window the velocities are not estimated, so
        they are solved for in closed form (the loss is linear in them) and
        the gradient is taken at that optimum.
        """
        g = self.graph
        ids = [f for f in g.ids if f in self.chain]
        span = self.cfg.imu_loss_span
        if len(ids) < span + 1:
            return 0.0, []
        pairs = list(zip(ids[-span - 1:-1], ids[-span:]))
        terms = []
        for a, b in pairs:
            rec = self.preds.get(b)
            if rec is None:
                return 0.0, []
            P = self._preint(a, b, g.keyframe(a).bias)
            terms.append((a, b, P, rec))
        states = {f: g.keyframe(f).copy() for f in ids[-span - 1:]}
        if not (g.use_imu and self.use_imu):
            self._fit_velocities(states, terms, biases)
        loss = 0.0
        out = []
        for a, b, P, rec in terms:
            sa = states[a].copy()
            sa.bias = rec.bias if biases is None or b not in biases else biases[b]
            r, Jk, _ = preintegration_residual(sa, states[b], P, g.gravity)
            loss += float(r @ r)
            out.append((rec, 2.0 * Jk[:, 9:15].T @ r))
        return loss, out

    def _fit_velocities(self, states: dict, terms, biases=None):
        order = list(states)
        n = 3 * len(order)
        rows, rhs = [], []
        for a, b, P, rec in terms:
            sa = states[a].copy()
            sa.bias = rec.bias if biases is None or b not in biases else biases[b]
            r, Jk, Jk1 = preintegration_residual(sa, states[b], P, self.graph.gravity)
            A = np.zeros((9, n))
            A[:, 3 * order.index(a):3 * order.index(a) + 3] = Jk[:, 6:9]
            A[:, 3 * order.index(b):3 * order.index(b) + 3] = Jk1[:, 6:9]
            rows.append(A)
            rhs.append(-r)
        dv, *_ = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)
        for i, f in enumerate(order):
            states[f].velocity = states[f].velocity + dv[3 * i:3 * i + 3]

    def feedback_step(self):
        """IMU loss every ``bias_update_every`` iterations, photometric loss
        every ``visual_update_every`` iterations.  Both act on predictor
        parameters only; the window states are never modified."""
        it = self.state.iteration
        if self.state.imu_initialized and it % self.cfg.bias_update_every == 0:
            loss, grads = self.imu_loss()
            if grads:
                self.l_imu.append(loss)
                if self.learn and self.cfg.bias_predictor == "network":
                    total = self.pred.bias_params.zeros_like()
                    for rec, gb in grads:
                        if rec.prediction is not None:
                            pg, _ = biasnet.backward(self.pred.bias_params, rec.prediction, gb)
                            total = total + pg
                    if np.isfinite(loss):
                        self.pred.bias_params = self.sgd_bias.step(self.pred.bias_params, total, self.lr_bias)
                    else:
                        self.state.diagnostics.append(f"iteration {it}: non-finite IMU loss, update skipped")
        if (it % self.cfg.visual_update_every == 0 and self.cfg.corrector
                and getattr(self, "last_report", None) is not None and self.last_report.system is not None):
            self._visual_feedback()

    def _visual_feedback(self):
        g = self.graph
        system = self.last_report.system
        hosts = g.ids[-self.cfg.photo_loss_span:]
        truth = {f: self.truth(f) for f in g.ids}
        res = photometric_loss(self.seq.field, g, truth, hosts, system=system)
        self.l_visual.append(res.loss / max(res.used, 1))
        if not self.learn:
            return
        if not np.isfinite(res.loss):
            self.state.diagnostics.append(f"iteration {self.state.iteration}: non-finite photometric loss")
            return
        sens = measurement_sensitivity(system, res.grad_m, res.grad_d, self.last_report.damping,
                                       clamped=clamped_depth_columns(g, system))
        uids = g.visual.uid
        have = np.array([int(u) in self.edge_store for u in uids], dtype=bool)
        if not np.any(have):
            return
        feats = np.array([self.edge_store[int(u)][0] for u in uids[have]])
        grad = self.provider.backward(self.pred.corrector_params, feats, sens[have])
        self.pred.corrector_params = self.sgd_visual.step(self.pred.corrector_params, grad, self.lr_visual)
        self.provider.params = self.pred.corrector_params

    # ---------------------------------------------------------------- run --

    def run(self) -> EpochResult:
        n_frames = len(self.frame_ts)
        if self.cfg.max_frames:
            n_frames = min(n_frames, self.cfg.max_frames)
        triggers = [self.cfg.imu_init_first, self.cfg.imu_init_second]
        for frame in range(n_frames):
            if self.state.phase == "map_init":
                self.init_buffer.append(frame)
                if len(self.init_buffer) == self.cfg.init_frames:
                    if not self.initialize_map(self.init_buffer):
                        self.init_buffer.pop(0)
                    else:
                        self.state.frames_tracked = len(self.init_buffer)
                continue
            self.track_frame(frame)
            self.state.iteration += 1
            self.iteration_hook()
            self.feedback_step()
            self.keyframe_cull()
            n = self.state.frames_tracked
            if n in triggers or (not self.state.imu_initialized and n > triggers[-1]
                                 and n % self.cfg.imu_init_first == 0):
                if self.initialize_imu() and self.use_imu:
                    self.graph.use_imu = self.graph.use_bias = True
                    self._rebuild_inertial_factors()
                    gauss_newton(self.graph, 2, damping=self.cfg.damping)
                    self._record_all()
        return self._result()

    def iteration_hook(self):
        """Called after every tracked frame; subclasses and tests attach here."""

    def trajectory(self) -> Trajectory:
        frames = sorted(self.records)
        if not frames:
            return Trajectory(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 4)))
        ts = [self.records[f].timestamp for f in frames]
        pos = [self.records[f].position for f in frames]
        quat = [Rotation.from_matrix(self.records[f].rotation).q for f in frames]
        return Trajectory(np.array(ts, dtype=np.int64), np.array(pos), np.array(quat))

    def reference(self, traj: Trajectory) -> Trajectory:
        t = traj.timestamps * 1e-9
        tr = self.seq.trajectory
        quat = [Rotation.from_matrix(R).q for R in tr.rotation(t)]
        return Trajectory(traj.timestamps, tr.position(t), np.array(quat).reshape(-1, 4))

    def _result(self) -> EpochResult:
        traj = self.trajectory()
        ate_val = float("nan")
        if len(traj) >= 3:
            try:
                ate_val = align(traj, self.reference(traj), "sim3").rmse_ate
            except ValueError as exc:
                self.state.diagnostics.append(f"alignment failed: {exc}")
        failed = sum(r.failed for r in self.records.values())
        return EpochResult(self.state.epoch, traj, ate_val, float(np.mean(self.l_imu)) if self.l_imu else 0.0,
                           float(np.mean(self.l_visual)) if self.l_visual else 0.0, failed, list(self.chain),
                           list(self.imu_init_log))


def _align_to_down(g_dir: np.ndarray) -> np.ndarray:
    """Rotation taking the unit vector ``g_dir`` onto ``(0, 0, -1)``."""
    down = np.array([0.0, 0.0, -1.0])
    v = np.cross(g_dir, down)
    s = np.linalg.norm(v)
    c = float(g_dir @ down)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    return so3_exp(v / s * np.arctan2(s, c)).matrix()


# ------------------------------------------------------------ entry points --

def run_sequence(seq: SyntheticSequence, cfg: SessionConfig, predictors: Predictors | None = None, *,
                 learn: bool = False, use_imu: bool = True, lr_bias: float = 0.0, lr_visual: float = 0.0,
                 epoch: int = 0, session_cls=Session) -> tuple[EpochResult, Session]:
    predictors = predictors or Predictors.fresh(cfg.seed)
    if not predictors.bias_stats.frozen:
        predictors.bias_stats = fit_bias_stats(seq, cfg)
    s = session_cls(seq, cfg, predictors, learn=learn, use_imu=use_imu, lr_bias=lr_bias, lr_visual=lr_visual,
                    epoch=epoch)
    return s.run(), s


@dataclass
class AdaptResult:
    predictors: Predictors
    epochs: list
    aborted: bool = False
    reason: str = ""


def run_online_learning(seq: SyntheticSequence, cfg: SessionConfig, predictors: Predictors | None = None,
                        on_epoch=None) -> AdaptResult:
    """Replay ``seq`` for ``cfg.epochs`` epochs.  The first
    ``visual_ba_epochs`` optimize visual factors only with the larger bias
    learning rate; the rest run full visual-inertial optimization."""
    if cfg.mode != "online_learning":
        cfg = replace(cfg, mode="online_learning")
    predictors = predictors or Predictors.fresh(cfg.seed)
    if not predictors.bias_stats.frozen:
        predictors.bias_stats = fit_bias_stats(seq, cfg)
    results = []
    for epoch in range(cfg.epochs):
        visual_only = epoch < cfg.visual_ba_epochs
        lr_b = cfg.lr_bias_ba if visual_only else cfg.lr_bias_viba
        res, _ = run_sequence(seq, cfg, predictors, learn=True, use_imu=not visual_only, lr_bias=lr_b,
                              lr_visual=cfg.lr_visual, epoch=epoch)
        results.append(res)
        log.info("epoch %d: ATE %.4f m, L_imu %.4g, L_visual %.4g", epoch, res.ate, res.l_imu, res.l_visual)
        if on_epoch is not None:
            on_epoch(res)
        first = results[0].ate
        if np.isfinite(first) and first > 0 and (not np.isfinite(res.ate) or res.ate > cfg.divergence_factor * first):
            return AdaptResult(predictors, results, True, f"epoch {epoch}: ATE {res.ate:.4g} diverged")
    return AdaptResult(predictors, results)


# --------------------------------------------------------------- outputs --

def write_metrics(results, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("epoch,ate,l_imu,l_visual,failed_frames\n")
        for r in results:
            fh.write(f"{r.epoch},{r.ate!r},{r.l_imu!r},{r.l_visual!r},{r.failed_frames}\n")


def write_run_outputs(out_dir, cfg: SessionConfig, result: EpochResult, session: Session | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "session.cfg").write_text(dump_config(cfg))
    write_tum_trajectory(result.trajectory, out / "trajectory.txt")
    write_metrics([result], out / "metrics.csv")
    if session is not None:
        (out / "diagnostics.log").write_text("\n".join(session.state.diagnostics) + "\n")
    return out


def save_predictors(pred: Predictors, out_dir) -> None:
    from .params import save_params
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(pred.bias_params, out / "bias_predictor.npz")
    save_params(pred.corrector_params, out / "corrector.npz")
    s = pred.bias_stats.as_dict()
    lines = [f"{k} = {','.join(repr(float(x)) for x in v)}" if isinstance(v, list) else f"{k} = {v}"
             for k, v in s.items()]
    (out / "bias_stats.txt").write_text("\n".join(lines) + "\n")


def load_predictors(in_dir, hidden: int = biasnet.HIDDEN) -> Predictors:
    from .frontend import HIDDEN as CH, N_FEATURES
    from .params import load_params
    d = Path(in_dir)
    bias = load_params(d / "bias_predictor.npz", biasnet.param_shapes(hidden))
    corr = load_params(d / "corrector.npz", {"w1": (CH, N_FEATURES), "b1": (CH,), "w2": (2, CH), "b2": (2,)})
    raw = {}
    for line in (d / "bias_stats.txt").read_text().splitlines():
        if "=" in line:
            k, v = (x.strip() for x in line.split("=", 1))
            raw[k] = v
    stats = biasnet.NormalizationStats.from_dict({
        "meas_mean": [float(x) for x in raw["meas_mean"].split(",")],
        "meas_std": [float(x) for x in raw["meas_std"].split(",")],
        "bias_mean": [float(x) for x in raw["bias_mean"].split(",")],
        "bias_std": [float(x) for x in raw["bias_std"].split(",")],
        "frozen": raw.get("frozen", "True") == "True"})
    return Predictors(bias, stats, corr)
