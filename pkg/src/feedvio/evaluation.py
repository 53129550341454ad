"""Trajectory alignment and absolute trajectory error.

Alignment uses positions only (closed-form Umeyama).  ``sim3`` also estimates
a scale; ``se3`` keeps it at 1.  Estimates are matched to the reference by
nearest timestamp within ``max_dt_ns``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import Trajectory

ASSOC_TOL_NS = 10_000_000


@dataclass
class AlignmentResult:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    rmse_ate: float
    errors: np.ndarray  # per matched pose, meters
    matched: np.ndarray  # (M, 2) indices into (estimate, reference)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def as_text(self) -> str:
        lines = [f"rmse_ate = {self.rmse_ate!r}", f"scale = {self.scale!r}",
                 "rotation = " + ",".join(repr(float(v)) for v in self.rotation.ravel()),
                 "translation = " + ",".join(repr(float(v)) for v in self.translation),
                 f"matched = {len(self.matched)}",
                 f"max_error = {float(self.errors.max()) if self.errors.size else 0.0!r}"]
        return "\n".join(lines) + "\n"


def associate(est_ts: np.ndarray, ref_ts: np.ndarray, max_dt_ns: int = ASSOC_TOL_NS) -> np.ndarray:
    """Index pairs ``(i_est, j_ref)`` of nearest reference stamps within tolerance."""
    est_ts = np.asarray(est_ts, dtype=np.int64)
    ref_ts = np.asarray(ref_ts, dtype=np.int64)
    if ref_ts.size == 0 or est_ts.size == 0:
        return np.zeros((0, 2), dtype=int)
    j = np.clip(np.searchsorted(ref_ts, est_ts), 1, len(ref_ts) - 1) if len(ref_ts) > 1 else np.zeros(len(est_ts), int)
    if len(ref_ts) > 1:
        left = np.abs(est_ts - ref_ts[j - 1]) <= np.abs(est_ts - ref_ts[j])
        j = np.where(left, j - 1, j)
    ok = np.abs(est_ts - ref_ts[j]) <= max_dt_ns
    return np.stack([np.nonzero(ok)[0], j[ok]], axis=1)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """``(R, t, s)`` minimizing ``sum |dst - (s R src + t)|^2``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3:
        raise ValueError("alignment needs at least 3 matched positions")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    spread = np.linalg.svd(xs, compute_uv=False)
    if var_s < 1e-18 or spread[1] < 1e-9 * max(spread[0], 1e-300):
        raise ValueError("degenerate point set (coincident or collinear positions)")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = float(np.trace(np.diag(S) @ D) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return R, t, s


def align(estimate: Trajectory, reference: Trajectory, mode: str = "sim3",
          max_dt_ns: int = ASSOC_TOL_NS) -> AlignmentResult:
    if mode not in ("se3", "sim3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    pairs = associate(estimate.timestamps, reference.timestamps, max_dt_ns)
    src = estimate.positions[pairs[:, 0]]
    dst = reference.positions[pairs[:, 1]]
    R, t, s = umeyama(src, dst, mode == "sim3")
    err = np.linalg.norm(dst - (s * src @ R.T + t), axis=1)
    return AlignmentResult(R, t, s, float(np.sqrt(np.mean(err**2))), err, pairs)


def ate(estimate: Trajectory, reference: Trajectory, mode: str = "sim3") -> float:
    return align(estimate, reference, mode).rmse_ate


def emit_plot_data(trajectories: dict, path) -> list:
    """Write ``<path>.csv`` (label, index, x, y, z rows) and a top-down
    ``<path>.svg`` with one polyline per trajectory.

    ``trajectories`` maps labels to (N, 3) position arrays, already aligned.
    Returns the files written.  Empty input writes only the CSV header.
    """
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".csv", ".svg") else base
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    with open(csv_path, "w", newline="\n") as fh:
        fh.write("label,index,x,y,z\n")
        for label, pts in trajectories.items():
            for i, p in enumerate(np.asarray(pts, dtype=float).reshape(-1, 3)):
                fh.write(f"{label},{i},{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
    written = [csv_path]
    tracks = {k: np.asarray(v, dtype=float).reshape(-1, 3) for k, v in trajectories.items() if len(v)}
    if not tracks:
        if svg_path.exists():
            svg_path.unlink()
        return written
    allp = np.vstack(list(tracks.values()))
    lo, hi = allp[:, :2].min(0), allp[:, :2].max(0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    size, pad = 600.0, 20.0
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 2 * pad:.0f}" height="{size + 2 * pad:.0f}">']
    for k, (label, pts) in enumerate(tracks.items()):
        xy = (pts[:, :2] - lo) / span * size
        coords = " ".join(f"{pad + x:.2f},{pad + size - y:.2f}" for x, y in xy)
        parts.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" stroke-width="1.5" '
                     f'points="{coords}"><title>{label}</title></polyline>')
    parts.append("</svg>")
    svg_path.write_text("\n".join(parts) + "\n")
    written.append(svg_path)
    return written


def read_plot_csv(path) -> dict:
    out: dict = {}
    with open(path) as fh:
        next(fh)
        for line in fh:
            label, _, x, y, z = line.rstrip("\n").rsplit(",", 4)
            out.setdefault(label, []).append([float(x), float(y), float(z)])
    return {k: np.array(v) for k, v in out.items()}
