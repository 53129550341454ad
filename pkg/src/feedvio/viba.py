"""Sliding-window visual-inertial bundle adjustment.

State per keyframe: position ``p`` (world), orientation ``R`` (body to world),
velocity ``v`` (world), bias ``(b_a, b_g)`` and the inverse depths of the
patches it hosts.  Increments are ``p += dp``, ``R <- R exp(dtheta)``,
``v += dv``, ``b += db``, ``d += dd`` with the motion block of each free
keyframe ordered ``(dp, dtheta, dv, db_a, db_g)``.

Residual families:

* reprojection: ``r = p_hat - pi(T_t^-1 T_s X_s(d))``, 2 rows, weight ``confidence^2``
* preintegration between consecutive keyframes, 9 rows, weight ``Sigma_I^-1``
* bias prior ``b_k - b_hat_k`` with per-channel ``1 / sigma_b^2``

Gravity is the acceleration vector ``g`` (``(0, 0, -9.81)`` in a z-up world),
so the velocity residual reads ``R_k^T (v_{k+1} - v_k - g dt) - beta``.

Factor dump format (``dump_factors``), one factor per line, space separated::

    visual <host_id> <slot> <target_id> <r_u> <r_v> <weight> <cost>
    imu <id_k> <id_k1> <r_0> ... <r_8> <cost>
    bias <id> <r_0> ... <r_5> <cost>

A deactivated visual factor (point behind the target camera) prints ``nan``
residuals and zero cost.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .lie import Rotation, skew, skew_batch, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv
from .preintegration import BiasState, Preintegration, bias_correct
from .sim import CameraIntrinsics

log = logging.getLogger(__name__)

MOTION_DIM = 15
MIN_INV_DEPTH = 1e-4
MIN_TARGET_DEPTH = 1e-3
DEFAULT_SIGMA_B = np.array([1e-2] * 3 + [1e-3] * 3)


@dataclass
class KeyframeState:
    frame_id: int
    timestamp: int
    position: np.ndarray
    orientation: Rotation
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bias: BiasState = field(default_factory=BiasState)
    patch_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    inverse_depths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    fixed: bool = False
    depths_fixed: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=float).reshape(3)
        self.patch_pixels = np.asarray(self.patch_pixels, dtype=float).reshape(-1, 2)
        self.inverse_depths = np.asarray(self.inverse_depths, dtype=float).reshape(-1)
        if not isinstance(self.orientation, Rotation):
            self.orientation = Rotation.from_matrix(np.asarray(self.orientation))

    @property
    def R(self) -> np.ndarray:
        return self.orientation.matrix()

    def copy(self) -> "KeyframeState":
        return KeyframeState(self.frame_id, self.timestamp, self.position.copy(), self.orientation,
                             self.velocity.copy(), self.bias, self.patch_pixels.copy(), self.inverse_depths.copy(),
                             self.fixed, self.depths_fixed)


@dataclass
class VisualFactors:
    """Struct of arrays, one row per (patch, target keyframe) correspondence."""

    host: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    slot: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    meas: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))
    uid: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return int(self.host.size)

    def append(self, host, slot, target, meas, weight, uid):
        self.host = np.concatenate([self.host, np.asarray(host, dtype=int).reshape(-1)])
        self.slot = np.concatenate([self.slot, np.asarray(slot, dtype=int).reshape(-1)])
        self.target = np.concatenate([self.target, np.asarray(target, dtype=int).reshape(-1)])
        self.meas = np.concatenate([self.meas, np.asarray(meas, dtype=float).reshape(-1, 2)])
        self.weight = np.concatenate([self.weight, np.asarray(weight, dtype=float).reshape(-1)])
        self.uid = np.concatenate([self.uid, np.asarray(uid, dtype=int).reshape(-1)])

    def keep(self, mask):
        for name in ("host", "slot", "target", "meas", "weight", "uid"):
            setattr(self, name, getattr(self, name)[mask])


@dataclass
class ImuFactor:
    id_k: int
    id_k1: int
    preint: Preintegration


@dataclass
class BiasFactor:
    frame_id: int
    predicted: BiasState
    sigma: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA_B.copy())


@dataclass
class FactorGraph:
    intrinsics: CameraIntrinsics
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    keyframes: list = field(default_factory=list)
    visual: VisualFactors = field(default_factory=VisualFactors)
    imu: list = field(default_factory=list)
    bias: list = field(default_factory=list)
    use_visual: bool = True
    use_imu: bool = True
    use_bias: bool = True
    depth_clamps: int = 0

    def index_of(self, frame_id: int) -> int:
        for i, kf in enumerate(self.keyframes):
            if kf.frame_id == frame_id:
                return i
        raise KeyError(frame_id)

    def keyframe(self, frame_id: int) -> KeyframeState:
        return self.keyframes[self.index_of(frame_id)]

    @property
    def ids(self) -> list:
        return [kf.frame_id for kf in self.keyframes]

    def remove_keyframe(self, frame_id: int):
        """Drop a keyframe, every visual factor touching it and its bias prior.

        IMU factors into and out of the keyframe are dropped too; callers that
        keep inertial continuity re-link the neighbours themselves.
        """
        self.keyframes = [kf for kf in self.keyframes if kf.frame_id != frame_id]
        self.visual.keep((self.visual.host != frame_id) & (self.visual.target != frame_id))
        self.imu = [f for f in self.imu if f.id_k != frame_id and f.id_k1 != frame_id]
        self.bias = [f for f in self.bias if f.frame_id != frame_id]

    def snapshot(self):
        return [kf.copy() for kf in self.keyframes]

    def restore(self, snap):
        by_id = {kf.frame_id: kf for kf in snap}
        self.keyframes = [by_id[kf.frame_id].copy() for kf in self.keyframes]


# ------------------------------------------------------------- residuals ---

def _proj_jac(intr: CameraIntrinsics, X: np.ndarray) -> np.ndarray:
    """d pixel / d X_camera for a stack of points, (N, 2, 3)."""
    z = X[:, 2]
    J = np.zeros((len(X), 2, 3))
    J[:, 0, 0] = intr.fx / z
    J[:, 0, 2] = -intr.fx * X[:, 0] / z**2
    J[:, 1, 1] = intr.fy / z
    J[:, 1, 2] = -intr.fy * X[:, 1] / z**2
    return J


def reprojection_batch(intr: CameraIntrinsics, R_s, p_s, R_t, p_t, pixels, inv_depth, meas, jacobians=True):
    """Stacked reprojection residuals.

    Returns ``(r (N, 2), valid (N,), J_s (N, 2, 6), J_t (N, 2, 6), J_d (N, 2))``;
    pose Jacobian columns are ``(dp, dtheta)``.
    """
    rays = intr.rays(pixels)
    Xs = rays / inv_depth[:, None]
    RtT = np.swapaxes(R_t, 1, 2)
    Rrel = RtT @ R_s
    Xt = (Rrel @ Xs[:, :, None])[:, :, 0] + (RtT @ (p_s - p_t)[:, :, None])[:, :, 0]
    valid = Xt[:, 2] > MIN_TARGET_DEPTH
    z = np.where(valid, Xt[:, 2], 1.0)
    u = Xt[:, 0] / z
    v = Xt[:, 1] / z
    pred = np.stack([intr.fx * u + intr.cx, intr.fy * v + intr.cy], axis=1)
    r = np.where(valid[:, None], meas - pred, 0.0)
    if not jacobians:
        return r, valid
    ax = np.where(valid, -intr.fx / z, 0.0)
    ay = np.where(valid, -intr.fy / z, 0.0)

    def rows(M):
        # (d residual / d X_t) @ M without forming the projection Jacobian
        return np.stack([ax[:, None] * (M[:, 0] - u[:, None] * M[:, 2]),
                         ay[:, None] * (M[:, 1] - v[:, None] * M[:, 2])], axis=1)

    n = len(r)
    P = np.zeros((n, 2, 3))
    P[:, 0, 0] = ax
    P[:, 0, 2] = -ax * u
    P[:, 1, 1] = ay
    P[:, 1, 2] = -ay * v
    Q = rows(Rrel)
    J_s = np.empty((n, 2, 6))
    J_t = np.empty((n, 2, 6))
    J_s[:, :, 0:3] = rows(RtT)
    J_t[:, :, 0:3] = -J_s[:, :, 0:3]
    # row^T [X]_x = (row x X)^T
    J_s[:, :, 3:6] = -np.cross(Q, Xs[:, None, :])
    J_t[:, :, 3:6] = np.cross(P, Xt[:, None, :])
    J_d = -np.einsum("nij,nj->ni", Q, Xs) / inv_depth[:, None]
    return r, valid, J_s, J_t, J_d


def reprojection_residual(state_s: KeyframeState, state_t: KeyframeState, slot: int, meas, intr: CameraIntrinsics):
    """Single-factor form: ``(r, J_pose_s, J_pose_t, J_depth)`` or ``None`` when
    the point falls behind the target camera."""
    r, valid, J_s, J_t, J_d = reprojection_batch(
        intr, state_s.R[None], state_s.position[None], state_t.R[None], state_t.position[None],
        state_s.patch_pixels[slot][None], state_s.inverse_depths[slot:slot + 1], np.asarray(meas, float)[None])
    if not valid[0]:
        return None
    return r[0], J_s[0], J_t[0], J_d[0]


def preintegration_residual(state_k: KeyframeState, state_k1: KeyframeState, preint: Preintegration, gravity):
    """9-vector ``(r_p, r_v, r_theta)`` with Jacobians (9, 15) w.r.t. each state."""
    g = np.asarray(gravity, dtype=float)
    dt = preint.dt_total
    Rk = state_k.R
    Rk1 = state_k1.R
    alpha, beta, gamma = bias_correct(preint, state_k.bias)
    u_p = Rk.T @ (state_k1.position - state_k.position - state_k.velocity * dt - 0.5 * g * dt * dt)
    u_v = Rk.T @ (state_k1.velocity - state_k.velocity - g * dt)
    Gc = gamma.matrix()
    E = Gc.T @ Rk.T @ Rk1
    r_t = so3_log(Rotation.from_matrix(E))
    r = np.concatenate([u_p - alpha, u_v - beta, r_t])

    Jinv = so3_right_jacobian_inv(r_t)
    phi = preint.J_gamma_bg @ (state_k.bias.gyro_bias - preint.reference_bias.gyro_bias)
    Jk = np.zeros((9, 15))
    Jk1 = np.zeros((9, 15))
    Jk[0:3, 0:3] = -Rk.T
    Jk[0:3, 3:6] = skew(u_p)
    Jk[0:3, 6:9] = -Rk.T * dt
    Jk[0:3, 9:12] = -preint.J_alpha_ba
    Jk[0:3, 12:15] = -preint.J_alpha_bg
    Jk[3:6, 3:6] = skew(u_v)
    Jk[3:6, 6:9] = -Rk.T
    Jk[3:6, 9:12] = -preint.J_beta_ba
    Jk[3:6, 12:15] = -preint.J_beta_bg
    Jk[6:9, 3:6] = -Jinv @ Rk1.T @ Rk
    Jk[6:9, 12:15] = -Jinv @ E.T @ so3_right_jacobian(phi) @ preint.J_gamma_bg
    Jk1[0:3, 0:3] = Rk.T
    Jk1[3:6, 6:9] = Rk.T
    Jk1[6:9, 3:6] = Jinv
    return r, Jk, Jk1


def bias_residual(state: KeyframeState, predicted: BiasState, sigma=DEFAULT_SIGMA_B):
    """``(r, whitened r, J)``; the cost contribution is ``|whitened r|^2``."""
    r = state.bias.vector() - predicted.vector()
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (6,))
    return r, r / sigma, np.hstack([np.zeros((6, 9)), np.eye(6)])


def imu_information(preint: Preintegration) -> np.ndarray:
    cov = preint.covariance
    # a noise-free covariance would make the factor infinitely stiff
    floor = 1e-12 * max(np.trace(cov) / 9.0, 1e-18)
    return np.linalg.inv(cov + floor * np.eye(9))


# --------------------------------------------------------- normal system ---

@dataclass
class NormalSystem:
    """``[[A, B], [B^T, diag(C)]] [dm; dd] = [b_m; b_d]``.

    ``motion_keyframes`` lists the free keyframe ids in column order; depth
    column ``j`` belongs to ``depth_patches[j] = (host_id, slot)``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    b_m: np.ndarray
    b_d: np.ndarray
    cost: float
    motion_keyframes: list
    depth_patches: list
    edge_cols: dict = field(default_factory=dict)  # per-edge Jacobians and column maps

    @property
    def n_motion(self):
        return self.A.shape[0]

    @property
    def n_depth(self):
        return self.C.shape[0]

    def dense(self):
        H = np.block([[self.A, self.B], [self.B.T, np.diag(self.C)]])
        return H, np.concatenate([self.b_m, self.b_d])


def _layout(graph: FactorGraph):
    motion_col = {}
    for kf in graph.keyframes:
        if not kf.fixed:
            motion_col[kf.frame_id] = MOTION_DIM * len(motion_col)
    depth_start, depth_patches, n = {}, [], 0
    for kf in graph.keyframes:
        if not kf.depths_fixed:
            depth_start[kf.frame_id] = n
            depth_patches.extend((kf.frame_id, s) for s in range(len(kf.inverse_depths)))
            n += len(kf.inverse_depths)
    return motion_col, depth_start, depth_patches


def _lookup(graph: FactorGraph):
    """Positions of frame ids in the keyframe list and patch offsets."""
    ids = np.array(graph.ids, dtype=int)
    order = np.argsort(ids)
    counts = np.array([len(kf.inverse_depths) for kf in graph.keyframes], dtype=int)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]) if len(counts) else np.zeros(0, int)
    return ids[order], order, offsets


def _positions(sorted_ids, order, query):
    idx = np.searchsorted(sorted_ids, query)
    idx = np.clip(idx, 0, max(len(sorted_ids) - 1, 0))
    if len(query) and not np.all(sorted_ids[idx] == query):
        raise KeyError("visual factor references a keyframe that is not in the graph")
    return order[idx]


def _visual_arrays(graph: FactorGraph):
    vf = graph.visual
    sorted_ids, order, offsets = _lookup(graph)
    hs = _positions(sorted_ids, order, vf.host)
    ts = _positions(sorted_ids, order, vf.target)
    R = np.array([kf.R for kf in graph.keyframes]).reshape(-1, 3, 3)
    P = np.array([kf.position for kf in graph.keyframes]).reshape(-1, 3)
    px = np.concatenate([kf.patch_pixels for kf in graph.keyframes]) if graph.keyframes else np.zeros((0, 2))
    d = np.concatenate([kf.inverse_depths for kf in graph.keyframes]) if graph.keyframes else np.zeros(0)
    g = offsets[hs] + vf.slot
    return R[hs], P[hs], R[ts], P[ts], px[g], d[g]


def _cost_terms(graph: FactorGraph):
    """Residual-only evaluation: returns (visual cost, imu cost, bias cost)."""
    cv = ci = cb = 0.0
    if graph.use_visual and len(graph.visual):
        r, valid = reprojection_batch(graph.intrinsics, *_visual_arrays(graph), graph.visual.meas, jacobians=False)
        cv = float(np.sum(graph.visual.weight[valid] * np.sum(r[valid] ** 2, axis=1)))
    if graph.use_imu:
        for f in graph.imu:
            r, _, _ = preintegration_residual(graph.keyframe(f.id_k), graph.keyframe(f.id_k1), f.preint, graph.gravity)
            ci += float(r @ imu_information(f.preint) @ r)
    if graph.use_bias:
        for f in graph.bias:
            _, rw, _ = bias_residual(graph.keyframe(f.frame_id), f.predicted, f.sigma)
            cb += float(rw @ rw)
    return cv, ci, cb


def total_cost(graph: FactorGraph) -> float:
    return float(sum(_cost_terms(graph)))


def build_normal_system(graph: FactorGraph) -> NormalSystem:
    """Accumulate ``J^T W J`` and ``-J^T W r`` over every active factor."""
    motion_col, depth_start, depth_patches = _layout(graph)
    nm = MOTION_DIM * len(motion_col)
    nd = len(depth_patches)
    if len(motion_col) < 1 and nd == 0:
        raise ValueError("no free states in the factor graph")
    A = np.zeros((nm, nm))
    B = np.zeros((nm, nd))
    C = np.zeros(nd)
    b_m = np.zeros(nm)
    b_d = np.zeros(nd)
    cost = 0.0
    n_active = 0
    edge = {}

    vf = graph.visual
    if graph.use_visual and len(vf):
        r, valid, J_s, J_t, J_d = reprojection_batch(graph.intrinsics, *_visual_arrays(graph), vf.meas)
        w = np.where(valid, vf.weight, 0.0)
        n_active += int(valid.sum())
        cost += float(np.sum(w * np.sum(r**2, axis=1)))
        sorted_ids, order, _ = _lookup(graph)
        mcol = np.array([motion_col.get(kf.frame_id, -1) for kf in graph.keyframes], dtype=int)
        dcol = np.array([depth_start.get(kf.frame_id, -1) for kf in graph.keyframes], dtype=int)
        hs = _positions(sorted_ids, order, vf.host)
        cs = mcol[hs]
        ct = mcol[_positions(sorted_ids, order, vf.target)]
        cd = np.where(dcol[hs] >= 0, dcol[hs] + vf.slot, -1)
        edge = dict(r=r, valid=valid, w=w, J_s=J_s, J_t=J_t, J_d=J_d, col_s=cs, col_t=ct, col_d=cd)

        # both pose blocks of an edge side by side; fixed keyframes get weight 0
        Jm = np.concatenate([J_s, J_t], axis=2)
        cm = np.concatenate([cs[:, None] + np.arange(6), ct[:, None] + np.arange(6)], axis=1)
        live = np.concatenate([np.repeat((cs >= 0)[:, None], 6, 1), np.repeat((ct >= 0)[:, None], 6, 1)], axis=1)
        cm = np.where(live, cm, 0)
        wJm = w[:, None, None] * Jm * live[:, None, :]
        if nm:
            b_m += np.bincount(cm.ravel(), weights=-(wJm[:, 0] * r[:, :1] + wJm[:, 1] * r[:, 1:]).ravel(),
                               minlength=nm)
        # edges of one keyframe pair share their columns: one dense product per pair
        key = hs * len(graph.keyframes) + _positions(sorted_ids, order, vf.target)
        perm = np.argsort(key, kind="stable")
        cuts = np.flatnonzero(np.diff(key[perm])) + 1
        for grp in (np.split(perm, cuts) if nm else []):
            e = grp[0]
            keep = live[e]
            if not keep.any():
                continue
            H = wJm[grp].reshape(-1, 12).T @ Jm[grp].reshape(-1, 12)
            c = cm[e, keep]
            A[np.ix_(c, c)] += H[np.ix_(keep, keep)]
        md = cd >= 0
        if np.any(md):
            if nm:
                vals = wJm[md, 0] * J_d[md, :1] + wJm[md, 1] * J_d[md, 1:]
                rows = cm[md] * nd + cd[md, None]
                B += np.bincount(rows.ravel(), weights=vals.ravel(), minlength=nm * nd).reshape(nm, nd)
            wJd = w[:, None] * J_d
            C += np.bincount(cd[md], weights=np.sum(wJd[md] * J_d[md], axis=1), minlength=nd)
            b_d += np.bincount(cd[md], weights=-np.sum(wJd[md] * r[md], axis=1), minlength=nd)

    if graph.use_imu:
        for f in graph.imu:
            r, Jk, Jk1 = preintegration_residual(graph.keyframe(f.id_k), graph.keyframe(f.id_k1), f.preint, graph.gravity)
            W = imu_information(f.preint)
            cost += float(r @ W @ r)
            n_active += 1
            blocks = [(motion_col.get(f.id_k, -1), Jk), (motion_col.get(f.id_k1, -1), Jk1)]
            for ca, Ja in blocks:
                if ca < 0:
                    continue
                b_m[ca:ca + 15] -= Ja.T @ W @ r
                for cb, Jb in blocks:
                    if cb >= 0:
                        A[ca:ca + 15, cb:cb + 15] += Ja.T @ W @ Jb

    if graph.use_bias:
        for f in graph.bias:
            _, rw, J = bias_residual(graph.keyframe(f.frame_id), f.predicted, f.sigma)
            cost += float(rw @ rw)
            n_active += 1
            c = motion_col.get(f.frame_id, -1)
            if c < 0:
                continue
            Jw = J / np.broadcast_to(np.asarray(f.sigma, dtype=float), (6,))[:, None]
            A[c:c + 15, c:c + 15] += Jw.T @ Jw
            b_m[c:c + 15] -= Jw.T @ rw

    if n_active == 0:
        raise ValueError("no active factors in the factor graph")
    A = 0.5 * (A + A.T)
    return NormalSystem(A, B, C, b_m, b_d, cost, list(motion_col), depth_patches, edge)


class SolveError(RuntimeError):
    pass


def schur_solve(system: NormalSystem, damping: float = 1e-6, rhs_m=None, rhs_d=None, max_escalations: int = 5):
    """Eliminate the diagonal depth block, factor the reduced motion system and
    back-substitute.  Returns ``(dm, dd, damping_used)``.

    ``damping`` is added to both diagonals and escalated x10 (up to five
    times) while the reduced system fails to factor.  Alternative right-hand
    sides can be passed for adjoint solves.
    """
    b_m = system.b_m if rhs_m is None else rhs_m
    b_d = system.b_d if rhs_d is None else rhs_d
    lam = damping
    for _ in range(max_escalations + 1):
        Cinv = 1.0 / (system.C + lam)
        BC = system.B * Cinv
        S = system.A + lam * np.eye(system.n_motion) - BC @ system.B.T
        rhs = b_m - BC @ b_d
        try:
            if system.n_motion:
                fac = cho_factor(0.5 * (S + S.T))
                dm = cho_solve(fac, rhs)
            else:
                dm = np.zeros(0)
            if np.all(np.isfinite(dm)):
                dd = Cinv * (b_d - system.B.T @ dm)
                return dm, dd, lam
        except LinAlgError:
            pass
        lam *= 10.0
    raise SolveError(f"reduced system not positive definite after damping {lam / 10:.1e}")


def apply_increment(graph: FactorGraph, system: NormalSystem, dm: np.ndarray, dd: np.ndarray) -> int:
    """Retract every free state; returns how many inverse depths were clamped."""
    for i, fid in enumerate(system.motion_keyframes):
        kf = graph.keyframe(fid)
        d = dm[MOTION_DIM * i:MOTION_DIM * (i + 1)]
        kf.position = kf.position + d[0:3]
        kf.orientation = kf.orientation * so3_exp(d[3:6])
        kf.velocity = kf.velocity + d[6:9]
        kf.bias = BiasState(kf.bias.accel_bias + d[9:12], kf.bias.gyro_bias + d[12:15])
    clamps = 0
    if len(dd):
        kfs = {}
        for j, (fid, slot) in enumerate(system.depth_patches):
            kfs.setdefault(fid, []).append((slot, j))
        for fid, items in kfs.items():
            kf = graph.keyframe(fid)
            slots = np.array([s for s, _ in items])
            cols = np.array([j for _, j in items])
            new = kf.inverse_depths[slots] + dd[cols]
            low = new < MIN_INV_DEPTH
            clamps += int(low.sum())
            kf.inverse_depths = kf.inverse_depths.copy()
            kf.inverse_depths[slots] = np.where(low, MIN_INV_DEPTH, new)
    graph.depth_clamps += clamps
    return clamps


@dataclass
class GNReport:
    costs: list = field(default_factory=list)  # cost before each iteration, then final
    step_norms: list = field(default_factory=list)
    rejected: int = 0
    aborted: bool = False
    clamps: int = 0
    system: NormalSystem | None = None  # system at the final iterate (for adjoint solves)
    damping: float = 1e-6


def gauss_newton(graph: FactorGraph, n_iters: int = 2, damping: float = 1e-6, keep_system: bool = False) -> GNReport:
    """Damped Gauss-Newton on the window.

    A step that more than doubles the cost is undone and retried once with
    ten times the damping.  With ``keep_system`` the normal system at the
    final iterate is rebuilt and returned for adjoint solves.
    """
    rep = GNReport(damping=damping)
    for _ in range(n_iters):
        try:
            system = build_normal_system(graph)
        except ValueError as exc:
            log.warning("gauss-newton skipped: %s", exc)
            rep.aborted = True
            break
        rep.costs.append(system.cost)
        lam = damping
        accepted = False
        for attempt in range(2):
            try:
                dm, dd, lam_used = schur_solve(system, lam)
            except SolveError as exc:
                log.warning("solve aborted: %s", exc)
                rep.aborted = True
                break
            snap = graph.snapshot()
            clamps0 = graph.depth_clamps
            rep.clamps += apply_increment(graph, system, dm, dd)
            new_cost = total_cost(graph)
            if new_cost > 2.0 * system.cost and system.cost > 1e-12 and attempt == 0:
                graph.restore(snap)
                rep.clamps -= graph.depth_clamps - clamps0
                graph.depth_clamps = clamps0
                rep.rejected += 1
                lam = lam_used * 10.0
                continue
            rep.step_norms.append(float(np.sqrt(dm @ dm + dd @ dd)))
            accepted = True
            break
        if not accepted:
            break
    rep.costs.append(total_cost(graph))
    if keep_system and not rep.aborted:
        rep.system = build_normal_system(graph)
    return rep


def dump_factors(graph: FactorGraph, path) -> None:
    lines = []
    vf = graph.visual
    if len(vf):
        r, valid = reprojection_batch(graph.intrinsics, *_visual_arrays(graph), vf.meas, jacobians=False)
        for e in range(len(vf)):
            ru, rv = (r[e] if valid[e] else (np.nan, np.nan))
            cost = float(vf.weight[e] * (ru * ru + rv * rv)) if valid[e] else 0.0
            lines.append(f"visual {vf.host[e]} {vf.slot[e]} {vf.target[e]} {ru:.9g} {rv:.9g} {vf.weight[e]:.9g} {cost:.9g}")
    for f in graph.imu:
        r, _, _ = preintegration_residual(graph.keyframe(f.id_k), graph.keyframe(f.id_k1), f.preint, graph.gravity)
        cost = float(r @ imu_information(f.preint) @ r)
        lines.append(f"imu {f.id_k} {f.id_k1} " + " ".join(f"{x:.9g}" for x in r) + f" {cost:.9g}")
    for f in graph.bias:
        r, rw, _ = bias_residual(graph.keyframe(f.frame_id), f.predicted, f.sigma)
        lines.append(f"bias {f.frame_id} " + " ".join(f"{x:.9g}" for x in r) + f" {float(rw @ rw):.9g}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
