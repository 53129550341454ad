"""Patch sampling, correspondence providers and the photometric feedback loss.

A patch is a 3x3 pixel grid around a center, sharing one inverse depth.  The
geometric factor uses the center; the photometric loss uses all nine pixels.

Providers turn (patch, target keyframe) pairs into matched pixels with a
confidence in (0, 1].  ``OracleNoisy`` projects the true scene point through
the true target pose and corrupts it; ``LearnableCorrector`` adds a small
perceptron's update on top of a base provider's match.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .lie import so3_right_jacobian
from .params import ParamSet
from .sim import CameraIntrinsics, IntensityField, project_batch, sample_intensity_batch
from .viba import MIN_INV_DEPTH, MOTION_DIM, FactorGraph, NormalSystem, reprojection_batch, schur_solve, _visual_arrays

log = logging.getLogger(__name__)

PATCHES_PER_FRAME = 96
PATCH_MARGIN = 8.0
PATCH_OFFSETS = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=float)


@dataclass
class PatchTrack:
    frame_id: int
    center: np.ndarray
    inverse_depth: float
    offsets: np.ndarray = field(default_factory=lambda: PATCH_OFFSETS.copy())
    alive: bool = True


def sample_patches(frame_id: int, intr: CameraIntrinsics, seed: int, init_inverse_depth: float,
                   count: int = PATCHES_PER_FRAME, margin: float = PATCH_MARGIN):
    """Uniform random patch centers at least ``margin`` px from every border.

    Returns ``(centers (count, 2), inverse_depths (count,))``; the depth is a
    shared initial guess supplied by the caller.
    """
    rng = np.random.default_rng([seed, frame_id, 0x9A7C4])
    u = rng.uniform(margin, intr.width - 1 - margin, count)
    v = rng.uniform(margin, intr.height - 1 - margin, count)
    return np.stack([u, v], axis=1), np.full(count, float(init_inverse_depth))


def patch_tracks(frame_id: int, centers: np.ndarray, inv_depths: np.ndarray) -> list:
    return [PatchTrack(frame_id, c.copy(), float(d)) for c, d in zip(centers, inv_depths)]


# -------------------------------------------------------------- providers ---

@dataclass
class Pose:
    """Ground-truth camera pose (body to world)."""

    R: np.ndarray
    p: np.ndarray


@dataclass
class Correspondences:
    host: int
    target: int
    slots: np.ndarray  # patch indices with a prediction
    meas: np.ndarray  # (M, 2)
    confidence: np.ndarray  # (M,)
    outlier: np.ndarray  # (M,) bool, simulator bookkeeping only
    attempted: int = 0
    features: np.ndarray | None = None  # corrector inputs, kept for backprop
    base: np.ndarray | None = None  # base provider matches before correction

    @property
    def omitted(self) -> int:
        return self.attempted - len(self.slots)


@dataclass
class OracleNoisy:
    """True projection plus Gaussian pixel noise; with probability
    ``outlier_rate`` the noise std is ``outlier_std`` instead.

    ``offset`` (px) and ``radial`` (dimensionless, applied as
    ``radial * r^2 * (p - c)`` with ``r`` the normalized image radius) model a
    systematic matcher error, e.g. a domain gap.  Noise draws are keyed by
    ``(seed, host, target)`` so results do not depend on query order.
    """

    pixel_std: float = 0.0
    outlier_rate: float = 0.0
    outlier_std: float = 20.0
    seed: int = 0
    offset: tuple = (0.0, 0.0)
    radial: float = 0.0

    def systematic(self, intr: CameraIntrinsics, pix: np.ndarray) -> np.ndarray:
        c = np.array([intr.cx, intr.cy])
        x = (pix - c) / np.array([intr.fx, intr.fy])
        r2 = np.sum(x * x, axis=1, keepdims=True)
        return np.asarray(self.offset, dtype=float) + self.radial * r2 * (pix - c)

    def predict(self, field_: IntensityField, intr: CameraIntrinsics, host: int, target: int, pose_s: Pose,
                pose_t: Pose, centers: np.ndarray) -> Correspondences:
        n = len(centers)
        Xw, _ = field_.point_depths(intr, pose_s.R, pose_s.p, centers)
        hit = np.all(np.isfinite(Xw), axis=1)
        pix, _, valid = project_batch(intr, pose_t.R, pose_t.p, np.where(hit[:, None], Xw, 0.0))
        valid &= hit
        valid[valid] &= intr.inside(pix[valid])
        rng = np.random.default_rng([self.seed, host, target])
        outlier = rng.random(n) < self.outlier_rate
        std = np.where(outlier, self.outlier_std, self.pixel_std)
        noise = rng.standard_normal((n, 2)) * std[:, None]
        slots = np.nonzero(valid)[0]
        meas = pix[slots] + noise[slots]
        if self.offset != (0.0, 0.0) or self.radial != 0.0:
            meas = meas + self.systematic(intr, pix[slots])
        conf = 1.0 / (1.0 + std[slots])
        return Correspondences(host, target, slots, meas, conf, outlier[slots], n)


N_FEATURES = 11
HIDDEN = 16


def corrector_init(seed: int = 0, hidden: int = HIDDEN, scale: float = 0.1) -> ParamSet:
    """Random first layer, zero output layer: the cold start adds no update
    but still receives gradient."""
    rng = np.random.default_rng(seed)
    return ParamSet({"w1": rng.normal(scale=scale, size=(hidden, N_FEATURES)), "b1": np.zeros(hidden),
                     "w2": np.zeros((2, hidden)), "b2": np.zeros(2)})


@dataclass
class LearnableCorrector:
    """``match = base match + output_scale * (w2 tanh(w1 f + b1) + b2)``.

    Features ``f``: normalized target-image coordinates of the base match and
    the nine intensity differences between the target image around the match
    and the source patch, divided by ``intensity_scale``.
    """

    base: OracleNoisy
    params: ParamSet = field(default_factory=corrector_init)
    output_scale: float = 1.0
    intensity_scale: float = 100.0

    def features(self, field_, intr, pose_s: Pose, pose_t: Pose, centers, matches) -> np.ndarray:
        n = len(matches)
        src = (centers[:, None, :] + PATCH_OFFSETS[None]).reshape(-1, 2)
        tgt = (matches[:, None, :] + PATCH_OFFSETS[None]).reshape(-1, 2)
        i_s, _, hit_s = sample_intensity_batch(field_, intr, pose_s.R, pose_s.p, src)
        i_t, _, hit_t = sample_intensity_batch(field_, intr, pose_t.R, pose_t.p, tgt)
        diff = np.where(hit_s & hit_t, i_t - i_s, 0.0).reshape(n, 9) / self.intensity_scale
        xy = (matches - [intr.cx, intr.cy]) / [intr.fx, intr.fy]
        return np.hstack([xy, diff])

    def update(self, params: ParamSet, feats: np.ndarray):
        h = np.tanh(feats @ params["w1"].T + params["b1"])
        return self.output_scale * (h @ params["w2"].T + params["b2"]), h

    def predict(self, field_, intr, host, target, pose_s, pose_t, centers, params: ParamSet | None = None):
        params = self.params if params is None else params
        c = self.base.predict(field_, intr, host, target, pose_s, pose_t, centers)
        feats = self.features(field_, intr, pose_s, pose_t, centers[c.slots], c.meas)
        upd, _ = self.update(params, feats)
        c.base = c.meas
        c.meas = c.meas + upd
        c.features = feats
        return c

    def backward(self, params: ParamSet, feats: np.ndarray, grad_meas: np.ndarray) -> ParamSet:
        """Parameter gradient of ``sum(grad_meas * match)``."""
        h = np.tanh(feats @ params["w1"].T + params["b1"])
        go = self.output_scale * grad_meas
        gh = (go @ params["w2"]) * (1.0 - h * h)
        return ParamSet({"w1": gh.T @ feats, "b1": gh.sum(0), "w2": go.T @ h, "b2": go.sum(0)})


def predict_correspondences(provider, field_, intr, truth: dict, centers_by_host: dict, pairs) -> list:
    """Query ``provider`` for every ``(host, target)`` pair.

    ``truth`` maps frame ids to ground-truth ``Pose``; ``centers_by_host`` maps
    host ids to their patch centers.  Pairs with no surviving prediction are
    still returned so callers can count omissions.
    """
    out = []
    for host, target in pairs:
        out.append(provider.predict(field_, intr, host, target, truth[host], truth[target], centers_by_host[host]))
    return out


# ------------------------------------------------------- photometric loss ---

@dataclass
class PhotometricResult:
    loss: float
    grad_m: np.ndarray  # w.r.t. free motion columns of the normal system
    grad_d: np.ndarray  # w.r.t. free depth columns
    used: int  # pixel terms summed
    excluded: int  # pixel terms dropped (outside the target image or missed the scene)
    diff: np.ndarray | None = None  # signed intensity differences per pixel term
    mask: np.ndarray | None = None  # terms included in the loss


def photometric_loss(field_: IntensityField, graph: FactorGraph, truth: dict, hosts, system: NormalSystem | None = None,
                     edges: np.ndarray | None = None) -> PhotometricResult:
    """``sum |I_t(p*) - I_s(p)|`` over the nine pixels of every patch hosted on
    ``hosts`` and every keyframe it is associated with.

    ``p*`` reprojects the source pixel with the estimated poses and inverse
    depth; images are rendered at the true poses.  When ``system`` is given the
    gradient w.r.t. its free columns is returned as well.
    """
    intr = graph.intrinsics
    vf = graph.visual
    sel = np.isin(vf.host, list(hosts)) if edges is None else edges
    idx = np.nonzero(sel)[0]
    nm = system.n_motion if system is not None else 0
    nd = system.n_depth if system is not None else 0
    if idx.size == 0:
        return PhotometricResult(0.0, np.zeros(nm), np.zeros(nd), 0, 0)
    R_s, p_s, R_t, p_t, px, d = (a[idx] for a in _visual_arrays(graph))
    k = len(idx)
    rep = lambda a: np.repeat(a, 9, axis=0)
    src = (px[:, None, :] + PATCH_OFFSETS[None]).reshape(-1, 2)
    r, valid, J_s, J_t, J_d = reprojection_batch(intr, rep(R_s), rep(p_s), rep(R_t), rep(p_t), src, rep(d),
                                                 np.zeros((9 * k, 2)))
    p_star = -r  # residual against a zero measurement is -pi
    hosts_e = np.repeat(vf.host[idx], 9)
    targets_e = np.repeat(vf.target[idx], 9)
    i_s = np.empty(9 * k)
    i_t = np.empty(9 * k)
    g_t = np.zeros((9 * k, 2))
    ok = valid & intr.inside(np.where(valid[:, None], p_star, -1.0))
    for fid in np.unique(np.concatenate([hosts_e, targets_e])):
        m = hosts_e == fid
        if np.any(m):
            i_s[m], _, hit = sample_intensity_batch(field_, intr, truth[fid].R, truth[fid].p, src[m])
            ok[m] &= hit
        m = (targets_e == fid) & ok
        if np.any(m):
            i_t[m], g_t[m], hit = sample_intensity_batch(field_, intr, truth[fid].R, truth[fid].p, p_star[m])
            ok[np.nonzero(m)[0][~hit]] = False
    diff = np.where(ok, i_t - i_s, 0.0)
    loss = float(np.sum(np.abs(diff)))
    grad_m = np.zeros(nm)
    grad_d = np.zeros(nd)
    if system is not None and np.any(ok):
        # d p*/d x = -J (residual Jacobian against a fixed measurement)
        gp = -(np.sign(diff) * ok)[:, None] * g_t
        cols = system.edge_cols
        cs, ct, cd = (np.repeat(cols[c][idx], 9) for c in ("col_s", "col_t", "col_d"))
        off = np.arange(6)
        for c, J in ((cs, J_s), (ct, J_t)):
            m = ok & (c >= 0)
            grad_m += np.bincount((c[m, None] + off).ravel(), weights=np.einsum("ni,nij->nj", gp[m], J[m]).ravel(),
                                  minlength=nm)
        m = ok & (cd >= 0)
        grad_d += np.bincount(cd[m], weights=np.einsum("ni,ni->n", gp[m], J_d[m]), minlength=nd)
    return PhotometricResult(loss, grad_m, grad_d, int(ok.sum()), int((~ok).sum()), diff, ok)


def measurement_sensitivity(system: NormalSystem, grad_m: np.ndarray, grad_d: np.ndarray, damping: float = 1e-6,
                            step_m: np.ndarray | None = None, clamped: np.ndarray | None = None):
    """Adjoint of one Gauss-Newton step: d loss / d measurement for every
    visual edge, shape (E, 2).

    With ``dx = H^-1 (-J^T W r)`` and ``r = meas - pi``,
    ``d loss / d meas_e = -w_e J_e H^-1 grad``.  ``grad`` is taken at the
    stepped states; when the step ``step_m`` that produced them is given, the
    rotation blocks are mapped back through ``R exp(dtheta)`` by the right
    Jacobian so the result is exact for finite steps.  Depth columns flagged
    in ``clamped`` sat on the positivity floor and pass no gradient.
    """
    if clamped is not None and len(grad_d):
        grad_d = np.where(clamped, 0.0, grad_d)
    if step_m is not None and len(grad_m):
        grad_m = grad_m.copy()
        for i in range(len(grad_m) // MOTION_DIM):
            sl = slice(MOTION_DIM * i + 3, MOTION_DIM * i + 6)
            grad_m[sl] = so3_right_jacobian(step_m[sl]).T @ grad_m[sl]
    lam_m, lam_d, _ = schur_solve(system, damping, rhs_m=grad_m, rhs_d=grad_d)
    e = system.edge_cols
    if not e:
        return np.zeros((0, 2))
    Jl = np.zeros((len(e["w"]), 2))
    off = np.arange(6)
    for c, J in ((e["col_s"], e["J_s"]), (e["col_t"], e["J_t"])):
        m = c >= 0
        Jl[m] += np.einsum("nij,nj->ni", J[m], lam_m[c[m, None] + off])
    m = e["col_d"] >= 0
    Jl[m] += e["J_d"][m] * lam_d[e["col_d"][m], None]
    return -e["w"][:, None] * Jl


def clamped_depth_columns(graph: FactorGraph, system: NormalSystem) -> np.ndarray:
    """Depth columns of ``system`` whose value sits on the positivity floor."""
    out = np.zeros(system.n_depth, dtype=bool)
    for j, (fid, slot) in enumerate(system.depth_patches):
        out[j] = graph.keyframe(fid).inverse_depths[slot] <= MIN_INV_DEPTH
    return out
