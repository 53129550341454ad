import numpy as np
import pytest

from feedvio.lie import Rotation, so3_exp
from feedvio.preintegration import BiasState, ImuNoise, ImuSample, bias_correct, integrate_batch
from feedvio.sim import CameraIntrinsics
from feedvio.viba import (
    BiasFactor,
    FactorGraph,
    KeyframeState,
    SolveError,
    apply_increment,
    bias_residual,
    build_normal_system,
    dump_factors,
    gauss_newton,
    preintegration_residual,
    reprojection_residual,
    schur_solve,
    total_cost,
)
from feedvio.biasnet import random_walk_predict

from _util import central_diff, rel_err
from _windows import make_window

K = CameraIntrinsics()
G = np.array([0.0, 0.0, -9.81])


def _retract(kf, d):
    """Copy of ``kf`` moved by a 15-vector in the solver's tangent layout."""
    out = kf.copy()
    out.position = kf.position + d[0:3]
    out.orientation = kf.orientation * so3_exp(d[3:6])
    out.velocity = kf.velocity + d[6:9]
    out.bias = BiasState(kf.bias.accel_bias + d[9:12], kf.bias.gyro_bias + d[12:15])
    return out


def _random_kf(rng, fid, n_patches=0):
    return KeyframeState(fid, fid * 50_000_000, rng.normal(scale=0.3, size=3), so3_exp(rng.normal(scale=0.3, size=3)),
                         rng.normal(size=3), BiasState(rng.normal(scale=0.05, size=3), rng.normal(scale=0.01, size=3)),
                         rng.uniform(100, 500, (n_patches, 2)), rng.uniform(0.2, 1.0, n_patches))


# ------------------------------------------------------------ reprojection ---

def test_reprojection_zero_at_ground_truth():
    graph, _, _ = make_window(0, n_kf=3, n_patches=8, imu=False, bias=False)
    vf = graph.visual
    for e in range(len(vf)):
        out = reprojection_residual(graph.keyframe(vf.host[e]), graph.keyframe(vf.target[e]), vf.slot[e], vf.meas[e], K)
        assert np.abs(out[0]).max() < 1e-6


def test_reprojection_target_x_translation():
    d, delta = 0.5, 0.03
    host = KeyframeState(0, 0, np.zeros(3), Rotation.identity(), patch_pixels=[[K.cx, K.cy]], inverse_depths=[d])
    tgt = KeyframeState(1, 1, [delta, 0, 0], Rotation.identity())
    r, *_ = reprojection_residual(host, tgt, 0, [K.cx, K.cy], K)
    assert r[0] == pytest.approx(K.fx * delta * d, rel=1e-12)
    assert r[1] == pytest.approx(0.0, abs=1e-12)


def test_reprojection_behind_camera_deactivates():
    host = KeyframeState(0, 0, np.zeros(3), Rotation.identity(), patch_pixels=[[K.cx, K.cy]], inverse_depths=[0.5])
    tgt = KeyframeState(1, 1, [0, 0, 5.0], Rotation.identity())
    assert reprojection_residual(host, tgt, 0, [0, 0], K) is None


@pytest.mark.parametrize("seed", range(20))
def test_reprojection_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    host = KeyframeState(0, 0, rng.normal(scale=0.1, size=3), so3_exp(rng.normal(scale=0.1, size=3)),
                         patch_pixels=[[rng.uniform(50, 590), rng.uniform(50, 430)]],
                         inverse_depths=[rng.uniform(0.2, 1.0)])
    tgt = KeyframeState(1, 1, rng.normal(scale=0.1, size=3), so3_exp(rng.normal(scale=0.1, size=3)))
    meas = rng.uniform(0, 640, 2)
    r, Js, Jt, Jd = reprojection_residual(host, tgt, 0, meas, K)

    def f_s(x):
        return reprojection_residual(_retract(host, np.r_[x, np.zeros(9)]), tgt, 0, meas, K)[0]

    def f_t(x):
        return reprojection_residual(host, _retract(tgt, np.r_[x, np.zeros(9)]), 0, meas, K)[0]

    def f_d(x):
        h = host.copy()
        h.inverse_depths = host.inverse_depths + x
        return reprojection_residual(h, tgt, 0, meas, K)[0]

    h = 1e-6
    assert rel_err(Js, central_diff(f_s, np.zeros(6), h)) < 1e-5
    assert rel_err(Jt, central_diff(f_t, np.zeros(6), h)) < 1e-5
    assert rel_err(Jd, central_diff(f_d, np.zeros(1), h)[:, 0]) < 1e-5


# --------------------------------------------------------- preintegration ---

def _segment(rng, n=11, dt=0.005):
    w = rng.normal(scale=0.5, size=3)
    a = rng.normal(scale=1.0, size=3) + [0, 0, 9.81]
    return [ImuSample(i * int(dt * 1e9), w + rng.normal(scale=0.05, size=3), a + rng.normal(scale=0.2, size=3))
            for i in range(n)]


def test_preintegration_residual_zero_at_ground_truth():
    graph, _, _ = make_window(1, n_kf=6, n_patches=4, exact_imu=False)
    for f in graph.imu:
        r, _, _ = preintegration_residual(graph.keyframe(f.id_k), graph.keyframe(f.id_k1), f.preint, graph.gravity)
        assert np.abs(r).max() < 1e-6


def test_preintegration_residual_linear_in_next_position():
    rng = np.random.default_rng(3)
    p = integrate_batch(_segment(rng), BiasState(), ImuNoise())
    k, k1 = _random_kf(rng, 0), _random_kf(rng, 1)
    delta = np.array([0.1, -0.2, 0.05])
    r0, _, _ = preintegration_residual(k, k1, p, G)
    k1.position = k1.position + delta
    r1, _, _ = preintegration_residual(k, k1, p, G)
    np.testing.assert_allclose(r1[0:3] - r0[0:3], k.R.T @ delta, atol=1e-12)
    np.testing.assert_array_equal(r1[3:9], r0[3:9])


@pytest.mark.parametrize("seed", range(20))
def test_preintegration_residual_jacobians_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    p = integrate_batch(_segment(rng), BiasState(rng.normal(scale=0.02, size=3), rng.normal(scale=0.002, size=3)),
                        ImuNoise())
    k, k1 = _random_kf(rng, 0), _random_kf(rng, 1)
    _, Jk, Jk1 = preintegration_residual(k, k1, p, G)
    h = 1e-6
    fd_k = central_diff(lambda x: preintegration_residual(_retract(k, x), k1, p, G)[0], np.zeros(15), h)
    fd_k1 = central_diff(lambda x: preintegration_residual(k, _retract(k1, x), p, G)[0], np.zeros(15), h)
    assert rel_err(np.hstack([Jk, Jk1]), np.hstack([fd_k, fd_k1])) < 1e-5


# ------------------------------------------------------------------- bias ---

def test_bias_residual_examples():
    kf = KeyframeState(0, 0, np.zeros(3), Rotation.identity(), bias=BiasState([0.1, 0, 0], [0, 0, 0.01]))
    r, rw, J = bias_residual(kf, kf.bias)
    assert np.all(r == 0)
    kf.bias = BiasState([1.0, 0, 0], [0, 0, 0])
    r, rw, _ = bias_residual(kf, BiasState(), sigma=0.1)
    assert float(rw @ rw) == pytest.approx(100.0)


def test_random_walk_prior_reduces_to_classic_factor():
    rng = np.random.default_rng(4)
    prev = BiasState(rng.normal(size=3), rng.normal(size=3))
    kf = _random_kf(rng, 1)
    r, _, J = bias_residual(kf, random_walk_predict(prev))
    np.testing.assert_array_equal(r, kf.bias.vector() - prev.vector())
    np.testing.assert_array_equal(J[:, 9:], np.eye(6))


# ---------------------------------------------------------- normal system ---

def test_single_visual_factor_matches_dense_outer_product():
    rng = np.random.default_rng(5)
    host = KeyframeState(0, 0, np.zeros(3), Rotation.identity(), patch_pixels=[[300.0, 200.0]], inverse_depths=[0.4])
    tgt = KeyframeState(1, 1, rng.normal(scale=0.1, size=3), so3_exp(rng.normal(scale=0.05, size=3)))
    graph = FactorGraph(K, keyframes=[host, tgt], use_imu=False, use_bias=False)
    meas = [310.0, 190.0]
    graph.visual.append([0], [0], [1], [meas], [0.49], [0])
    sys_ = build_normal_system(graph)
    r, Js, Jt, Jd = reprojection_residual(host, tgt, 0, meas, K)
    # columns: host pose (6) + 9 zeros, target pose (6) + 9 zeros, depth
    J = np.zeros((2, 31))
    J[:, 0:6] = Js
    J[:, 15:21] = Jt
    J[:, 30] = Jd
    H, b = sys_.dense()
    np.testing.assert_allclose(H, 0.49 * J.T @ J, atol=1e-9)
    np.testing.assert_allclose(b, -0.49 * J.T @ r, atol=1e-9)
    assert sys_.cost == pytest.approx(0.49 * r @ r)


def test_window_hessian_symmetric_and_zero_gradient_at_truth():
    graph, _, _ = make_window(2)
    sys_ = build_normal_system(graph)
    H, b = sys_.dense()
    assert np.abs(H - H.T).max() < 1e-10
    assert sys_.cost < 1e-10
    # gradient scale relative to the Hessian magnitude
    assert np.abs(b).max() < 1e-6 * np.abs(H).max()


def test_no_active_factors_is_an_error():
    graph = FactorGraph(K, keyframes=[_random_kf(np.random.default_rng(0), 0), _random_kf(np.random.default_rng(1), 1)])
    with pytest.raises(ValueError):
        build_normal_system(graph)


# ------------------------------------------------------------------ schur ---

def _dense_solve(sys_, lam):
    H, b = sys_.dense()
    return np.linalg.solve(H + lam * np.eye(len(b)), b)


def test_schur_single_depth_single_pose():
    host = KeyframeState(0, 0, np.zeros(3), Rotation.identity(), patch_pixels=[[300.0, 200.0]], inverse_depths=[0.4],
                         fixed=True)
    tgt = KeyframeState(1, 1, [0.1, 0.0, 0.02], so3_exp([0.01, 0.02, 0.0]))
    graph = FactorGraph(K, keyframes=[host, tgt], use_imu=False)
    graph.visual.append([0], [0], [1], [[330.0, 205.0]], [1.0], [0])
    graph.bias = [BiasFactor(1, BiasState())]
    sys_ = build_normal_system(graph)
    assert sys_.n_motion == 15 and sys_.n_depth == 1
    # two residual rows for seven unknowns: damping keeps the comparison well posed
    dm, dd, lam = schur_solve(sys_, 1.0)
    np.testing.assert_allclose(np.r_[dm, dd], _dense_solve(sys_, lam), rtol=0, atol=1e-9)


def test_schur_zero_gradient_zero_increment():
    graph, _, _ = make_window(3, n_kf=4, n_patches=10)
    sys_ = build_normal_system(graph)
    dm, dd, _ = schur_solve(sys_, 1e-6, rhs_m=np.zeros(sys_.n_motion), rhs_d=np.zeros(sys_.n_depth))
    assert np.all(dm == 0) and np.all(dd == 0)


@pytest.mark.parametrize("seed", range(5))
def test_schur_matches_dense_on_full_window(seed):
    graph, _, _ = make_window(seed)
    rng = np.random.default_rng(seed)
    # move off the optimum so the right-hand side is not trivially small
    for kf in graph.keyframes[1:]:
        kf.position = kf.position + rng.normal(scale=0.01, size=3)
        kf.orientation = kf.orientation * so3_exp(rng.normal(scale=0.005, size=3))
    sys_ = build_normal_system(graph)
    assert sys_.n_motion == 135 and sys_.n_depth == 960
    dm, dd, lam = schur_solve(sys_, 1e-6)
    ref = _dense_solve(sys_, lam)
    x = np.r_[dm, dd]
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) < 1e-8


def test_schur_gives_up_after_escalation():
    graph, _, _ = make_window(0, n_kf=3, n_patches=5)
    sys_ = build_normal_system(graph)
    sys_.A = -1e9 * np.eye(sys_.n_motion)
    with pytest.raises(SolveError):
        schur_solve(sys_, 1e-6)


# ----------------------------------------------------------- gauss-newton ---

def test_gauss_newton_fixed_point_at_ground_truth():
    graph, _, _ = make_window(4)
    rep = gauss_newton(graph)
    assert len(rep.step_norms) == 2
    assert max(rep.step_norms) < 1e-8
    assert max(rep.costs) < 1e-10


def _perturb(graph, rng, scale):
    for kf in graph.keyframes[1:]:
        kf.position = kf.position + rng.normal(scale=scale, size=3)
        kf.orientation = kf.orientation * so3_exp(rng.normal(scale=scale, size=3))
        kf.velocity = kf.velocity + rng.normal(scale=scale, size=3)


def _state_error(graph, ref):
    worst = 0.0
    for kf, r in zip(graph.keyframes, ref):
        dR = (r.orientation.inverse() * kf.orientation).matrix()
        ang = np.arccos(np.clip((np.trace(dR) - 1) / 2, -1, 1))
        worst = max(worst, np.abs(kf.position - r.position).max(), ang, np.abs(kf.velocity - r.velocity).max(),
                    np.abs(kf.bias.vector() - r.bias.vector()).max(),
                    np.abs(kf.inverse_depths - r.inverse_depths).max())
    return worst


@pytest.mark.parametrize("seed", range(3))
def test_gauss_newton_reconverges_from_perturbation(seed):
    graph, _, _ = make_window(seed)
    ref = graph.snapshot()
    _perturb(graph, np.random.default_rng(seed), 1e-3)
    assert _state_error(graph, ref) > 1e-4
    rep = gauss_newton(graph, n_iters=5)
    assert _state_error(graph, ref) < 1e-6
    assert all(b <= a * (1 + 1e-9) + 1e-12 for a, b in zip(rep.costs, rep.costs[1:]))


def test_gauss_newton_default_two_iterations():
    graph, _, _ = make_window(0, n_kf=3, n_patches=10)
    assert len(gauss_newton(graph).costs) == 3


def test_visual_only_bundle_adjustment():
    graph, _, _ = make_window(5, imu=False, bias=False)
    ref = graph.snapshot()
    # visual-only is scale-free, so keep a second pose fixed as well
    graph.keyframes[1].fixed = True
    for kf in graph.keyframes:
        kf.depths_fixed = False
    rng = np.random.default_rng(0)
    for kf in graph.keyframes[2:]:
        kf.position = kf.position + rng.normal(scale=1e-3, size=3)
        kf.orientation = kf.orientation * so3_exp(rng.normal(scale=1e-3, size=3))
    gauss_newton(graph, n_iters=5)
    for kf, r in zip(graph.keyframes, ref):
        assert np.abs(kf.position - r.position).max() < 1e-6
    # velocities and biases have no factors and must not move
    for kf, r in zip(graph.keyframes, ref):
        np.testing.assert_array_equal(kf.velocity, r.velocity)


def test_inertial_only_dead_reckoning_consistency():
    graph, _, _ = make_window(6, n_kf=5, n_patches=4)
    graph.use_visual = False
    graph.use_bias = False
    for kf in graph.keyframes[1:]:
        kf.position = kf.position + 0.01
        kf.velocity = kf.velocity - 0.02
    gauss_newton(graph, n_iters=5)
    # every state now follows from its predecessor by bias-corrected dead reckoning
    g = graph.gravity
    for f in graph.imu:
        k, k1 = graph.keyframe(f.id_k), graph.keyframe(f.id_k1)
        alpha, beta, gamma = bias_correct(f.preint, k.bias)
        dt = f.preint.dt_total
        np.testing.assert_allclose(k1.position, k.position + k.velocity * dt + 0.5 * g * dt * dt + k.R @ alpha,
                                   atol=1e-8)
        np.testing.assert_allclose(k1.velocity, k.velocity + g * dt + k.R @ beta, atol=1e-8)
        np.testing.assert_allclose(k1.R, k.R @ gamma.matrix(), atol=1e-8)


def test_cost_doubling_step_is_rejected(monkeypatch):
    import feedvio.viba as viba
    graph, _, _ = make_window(0, n_kf=3, n_patches=10)
    _perturb(graph, np.random.default_rng(1), 1e-2)
    real = viba.schur_solve
    calls = []

    def wild(system, damping=1e-6, **kw):
        dm, dd, lam = real(system, damping, **kw)
        calls.append(damping)
        return (dm * 50, dd * 50, lam) if len(calls) == 1 else (dm, dd, lam)

    monkeypatch.setattr(viba, "schur_solve", wild)
    before = total_cost(graph)
    rep = viba.gauss_newton(graph, n_iters=1)
    assert rep.rejected == 1
    assert calls[1] == pytest.approx(10 * calls[0])
    assert rep.costs[-1] < before


def test_depth_clamp_is_counted():
    graph, _, _ = make_window(0, n_kf=2, n_patches=3, imu=False, bias=False)
    sys_ = build_normal_system(graph)
    dd = np.full(sys_.n_depth, -10.0)
    clamps = apply_increment(graph, sys_, np.zeros(sys_.n_motion), dd)
    assert clamps == sys_.n_depth
    assert all(np.all(kf.inverse_depths == 1e-4) for kf in graph.keyframes)


def test_factor_dump_format(tmp_path):
    graph, _, _ = make_window(0, n_kf=3, n_patches=2)
    path = tmp_path / "factors.txt"
    dump_factors(graph, path)
    lines = path.read_text().splitlines()
    kinds = [ln.split()[0] for ln in lines]
    assert kinds.count("visual") == len(graph.visual)
    assert kinds.count("imu") == 2 and kinds.count("bias") == 3
    for ln in lines:
        parts = ln.split()
        n = {"visual": 8, "imu": 13, "bias": 9}[parts[0]]
        assert len(parts) == n
        float(parts[-1])
