import numpy as np
import pytest

from feedvio import biasnet
from feedvio.config import dump_config
from feedvio.evaluation import align
from feedvio.frontend import OracleNoisy
from feedvio.io import Trajectory
from feedvio.lie import Rotation, so3_log
from feedvio.pipeline import (
    EpochResult,
    Predictors,
    Session,
    SessionConfig,
    fit_bias_stats,
    load_predictors,
    parse_session_config,
    run_online_learning,
    run_sequence,
    save_predictors,
)
from feedvio.preintegration import BiasState, bias_correct, integrate_batch
from feedvio.sim import SceneConfig, TrajectoryModel, simulate
from feedvio.viba import KeyframeState

from _util import rel_err

_CACHE = {}

# oracle correspondences, no learned parts in the loop
CLEAN = dict(pixel_std=0.0, outlier_rate=0.0, corrector=False, bias_predictor="random_walk")


def clean_sequence(seed=0, duration=4.5, imu_rate=200.0, **kw):
    key = ("clean", seed, duration, imu_rate, tuple(sorted(kw.items())))
    if key not in _CACHE:
        _CACHE[key] = simulate(SceneConfig(seed=seed, duration=duration, imu_rate=imu_rate, gyro_noise_density=0,
                                           accel_noise_density=0, accel_bias_walk=0, gyro_bias_walk=0, **kw))
    return _CACHE[key]


def session(seq, learn=False, use_imu=True, cls=Session, **cfg):
    cfg = SessionConfig(**cfg)
    pred = Predictors.fresh(cfg.seed)
    pred.bias_stats = fit_bias_stats(seq, cfg)
    return cls(seq, cfg, pred, learn=learn, use_imu=use_imu)


def _slice(traj, n):
    return Trajectory(traj.timestamps[:n], traj.positions[:n], traj.quaternions[:n])


def _truth_bias(seq, ts):
    i = np.searchsorted(seq.groundtruth.timestamps, ts)
    return seq.bias_trace[i]


# ---------------------------------------------------------------- config ---

def test_session_defaults():
    c = SessionConfig()
    assert (c.window_size, c.patches_per_frame, c.association_span, c.viba_iters) == (10, 96, 13, 2)
    assert (c.imu_loss_span, c.photo_loss_span, c.visual_update_every, c.bias_update_every) == (2, 4, 100, 1)
    assert (c.max_keyframe_gap, c.covisibility_cap, c.imu_tail) == (3, 8, 4)
    assert (c.lr_visual, c.lr_bias_ba, c.lr_bias_viba) == (1e-5, 1e-4, 1e-6)
    assert (c.epochs, c.visual_ba_epochs, c.init_frames) == (60, 30, 8)
    assert (c.imu_init_first, c.imu_init_second) == (40, 80)


def test_session_config_round_trip_and_validation():
    c = SessionConfig(mode="deployment", seed=4, matcher_offset=(0.5, -1.0), lr_visual=3e-5)
    assert parse_session_config(dump_config(c)) == c
    with pytest.raises(ValueError):
        SessionConfig(mode="training")
    with pytest.raises(ValueError):
        SessionConfig(bias_predictor="kalman")


def test_predictors_save_load_round_trip(tmp_path):
    seq = clean_sequence()
    pred = Predictors.fresh(3)
    pred.bias_stats = fit_bias_stats(seq, SessionConfig())
    save_predictors(pred, tmp_path)
    back = load_predictors(tmp_path)
    for a, b in ((pred.bias_params, back.bias_params), (pred.corrector_params, back.corrector_params)):
        assert set(a) == set(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    assert back.bias_stats.as_dict() == pred.bias_stats.as_dict()


# -------------------------------------------------------- map initialize ---

def test_map_init_recovers_poses_up_to_similarity():
    seq = clean_sequence()
    s = session(seq, **CLEAN)
    assert s.initialize_map(list(range(8)))
    assert s.state.phase == "imu_init"
    traj = s.trajectory()
    assert len(traj) == 8
    res = align(traj, s.reference(traj), "sim3")
    assert res.rmse_ate < 1e-6
    assert np.allclose(s.graph.keyframes[0].position, 0) and s.graph.keyframes[0].fixed


def test_map_init_takes_exactly_eight_frames():
    s = session(clean_sequence(), **CLEAN)
    for n in (7, 9):
        with pytest.raises(ValueError):
            s.initialize_map(list(range(n)))


def test_map_init_rejects_static_camera():
    cfg = SceneConfig(seed=0, duration=1.0, gyro_noise_density=0, accel_noise_density=0)
    seq = simulate(cfg, TrajectoryModel.stationary(R0=np.array([[0, 0, 1.0], [-1, 0, 0], [0, -1, 0]]), duration=1.0))
    s = session(seq, **CLEAN)
    assert not s.initialize_map(list(range(8)))
    assert s.state.phase == "map_init" and not s.graph.keyframes
    assert "parallax" in s.state.diagnostics[-1]


def test_tracking_before_map_init_is_an_error():
    s = session(clean_sequence(), **CLEAN)
    with pytest.raises(RuntimeError):
        s.track_frame(8)


# -------------------------------------------------------- imu initialize ---

def _run_to(seq, frames, **cfg):
    key = ("run", id(seq), frames, tuple(sorted(cfg.items())))
    if key not in _CACHE:
        res, s = run_sequence(seq, SessionConfig(max_frames=frames, **cfg))
        _CACHE[key] = (res, s)
    return _CACHE[key]


def test_imu_init_noise_free_recovers_scale_gravity_and_bias():
    # 2 kHz keeps the midpoint-integration error below the bias tolerance
    seq = clean_sequence(imu_rate=2000.0)
    res, s = _run_to(seq, 40, **CLEAN)
    log = s.imu_init_log[-1]
    assert log["ok"] and log["frame"] == 40
    traj = res.trajectory
    sim3 = align(traj, s.reference(traj), "sim3")
    assert abs(sim3.scale - 1.0) < 1e-4
    # the remaining world rotation may only be a yaw: gravity is aligned
    R = align(traj, s.reference(traj), "se3").rotation
    assert np.degrees(np.arccos(np.clip(R[2, 2], -1, 1))) < 0.01
    tb = _truth_bias(seq, s.graph.keyframes[-1].timestamp)
    assert np.abs(np.array(log["accel_bias"]) - tb[:3]).max() < 1e-6
    assert np.abs(np.array(log["gyro_bias"]) - tb[3:]).max() < 1e-6


def test_imu_init_on_metric_input_returns_unit_scale():
    seq = clean_sequence(imu_rate=2000.0)
    _, s = _run_to(seq, 40, **CLEAN)
    assert s.state.imu_initialized
    before = {kf.frame_id: kf.position.copy() for kf in s.graph.keyframes}
    assert s.initialize_imu()
    assert abs(s.imu_init_log[-1]["scale"] - 1.0) < 1e-4
    for kf in s.graph.keyframes:
        assert np.allclose(kf.position, before[kf.frame_id], atol=1e-3)


def test_imu_init_needs_enough_keyframes():
    s = session(clean_sequence(), **CLEAN)
    s.initialize_map(list(range(8)))
    s.chain = s.chain[:3]
    assert not s.initialize_imu()
    assert not s.state.imu_initialized and s.state.phase == "imu_init"


def test_imu_init_triggers_at_40_and_80():
    seq = clean_sequence(duration=4.5, imu_rate=1000.0)
    res, s = _run_to(seq, 85, **CLEAN)
    assert [e["frame"] for e in s.imu_init_log] == [40, 80]
    assert all(e["ok"] for e in s.imu_init_log)
    assert s.state.phase == "tracking"


# ---------------------------------------------------------------- track ---

def test_tracking_noise_free_pose_error():
    # 1 kHz keeps the midpoint-integration error well below the tolerance
    seq = clean_sequence(duration=4.5, imu_rate=1000.0)
    res, s = _run_to(seq, 85, **CLEAN)
    traj = res.trajectory
    ref = s.reference(traj)
    a = align(traj, ref, "se3")
    err = np.linalg.norm(a.apply(traj.positions) - ref.positions, axis=1)
    assert err.max() < 1e-5
    est_R = a.rotation @ traj.rotation_matrices()
    ang = [np.linalg.norm(so3_log(Rotation.from_matrix(x.T @ y))) for x, y in zip(est_R, ref.rotation_matrices())]
    assert max(ang) < 1e-5
    assert res.failed_frames == 0


def test_imu_only_propagation_matches_dead_reckoning():
    from feedvio.viba import gauss_newton

    seq = clean_sequence(imu_rate=2000.0)
    s = session(seq, **CLEAN)
    s.initialize_map(list(range(8)))
    s.state.frames_tracked = 8
    for f in range(8, 40):
        s.track_frame(f)
        s.state.frames_tracked += 1
    assert s.initialize_imu()
    s._rebuild_inertial_factors()
    s.visual_enabled = False
    s.graph.use_visual = False
    s.graph.use_imu = s.graph.use_bias = True
    gauss_newton(s.graph, 10)
    last = s.graph.keyframes[-1].copy()
    for f in range(40, 52):
        s.track_frame(f)
        P = integrate_batch(s.segment(last.frame_id, f), last.bias, s.cfg.imu_noise)
        alpha, beta, gamma = bias_correct(P, last.bias)
        dt = P.dt_total
        g = s.graph.gravity
        p = last.position + last.velocity * dt + 0.5 * g * dt * dt + last.R @ alpha
        R = last.R @ gamma.matrix()
        kf = s.graph.keyframe(f)
        assert np.abs(kf.position - p).max() < 1e-9
        assert np.abs(kf.R - R).max() < 1e-9
        assert not s.records[f].failed
    assert not s.graph.use_visual


def test_association_span_and_window_cardinality():
    seq = clean_sequence()
    spans = []

    class Probe(Session):
        def iteration_hook(self):
            g = self.graph
            assert sum(not kf.fixed for kf in g.keyframes) <= self.cfg.window_size
            new = g.keyframes[-1].frame_id
            spans.append(len(set(g.visual.target[g.visual.host == new].tolist())))

    s = session(seq, cls=Probe, **dict(CLEAN, max_frames=30))
    s.run()
    assert max(spans) == 13


def test_failed_solve_keeps_previous_states(monkeypatch):
    import feedvio.pipeline as pl

    seq = clean_sequence()
    s = session(seq, **CLEAN)
    s.initialize_map(list(range(8)))
    s.chain = list(range(8))
    before = {kf.frame_id: kf.position.copy() for kf in s.graph.keyframes}
    real = pl.gauss_newton

    def failing(graph, n_iters=2, damping=1e-6, keep_system=False):
        rep = real(graph, n_iters, damping, keep_system)
        for kf in graph.keyframes:
            kf.position = kf.position + 1.0
        rep.aborted = True
        return rep

    monkeypatch.setattr(pl, "gauss_newton", failing)
    assert not s.track_frame(8)
    assert s.records[8].failed
    for fid, p in before.items():
        assert np.array_equal(s.graph.keyframe(fid).position, p)


# ------------------------------------------------------------- feedback ---

@pytest.fixture(scope="module")
def feedback_session():
    """Noise-free session right after the first inertial initialization,
    with network bias predictions recorded for every frame."""
    seq = clean_sequence(duration=2.5, imu_rate=1000.0)
    # visual-only window: the untrained predictions cannot bias the states
    s = session(seq, use_imu=False, **dict(CLEAN, bias_predictor="network", max_frames=46))
    s.run()
    assert s.state.imu_initialized
    return s


def _loss_of_params(s, params):
    biases = {}
    for fid, rec in s.preds.items():
        if rec.prediction is not None:
            biases[fid] = biasnet.replay(params, rec.prediction.tape)
    return s.imu_loss(biases)[0]


def _param_grad(s, params):
    _, grads = s.imu_loss()
    total = params.zeros_like()
    for rec, gb in grads:
        pg, _ = biasnet.backward(params, rec.prediction, gb)
        total = total + pg
    return total


@pytest.mark.parametrize("use_imu", [True, False])
def test_imu_loss_parameter_gradient_matches_finite_differences(feedback_session, use_imu):
    s = feedback_session
    s.graph.use_imu = s.graph.use_bias = use_imu
    s.use_imu = use_imu
    try:
        params = s.pred.bias_params
        grad = _param_grad(s, params)
        rng = np.random.default_rng(int(use_imu))
        h = 1e-6
        for name in params:
            shape = params[name].shape
            picks = rng.choice(int(np.prod(shape)), min(5, int(np.prod(shape))), replace=False)
            fd, an = [], []
            for i in picks:
                ix = np.unravel_index(i, shape)
                vals = []
                for sgn in (1, -1):
                    a = params[name].copy()
                    a[ix] += sgn * h
                    vals.append(_loss_of_params(s, params.replace(**{name: a})))
                fd.append((vals[0] - vals[1]) / (2 * h))
                an.append(grad[name][ix])
            if np.max(np.abs(fd)) > 1e-9:
                assert rel_err(an, fd) < 1e-4, name
    finally:
        s.graph.use_imu = s.graph.use_bias = False
        s.use_imu = False


def test_imu_loss_vanishes_at_true_bias(feedback_session):
    s = feedback_session
    tb = BiasState(s.seq.config.accel_bias, s.seq.config.gyro_bias)
    ids = s.graph.ids[-3:]
    loss, grads = s.imu_loss({f: tb for f in ids})
    assert loss < 1e-9
    assert len(grads) == 2
    for _, g in grads:
        assert np.abs(g).max() < 1e-3


def test_feedback_updates_only_predictors(feedback_session):
    s = feedback_session
    states = [kf.copy() for kf in s.graph.keyframes]
    before = s.pred.bias_params.flat().copy()
    s.learn, s.lr_bias = True, 1e-3
    s.state.iteration = 1
    try:
        s.feedback_step()
    finally:
        s.learn, s.lr_bias = False, 0.0
    assert not np.array_equal(before, s.pred.bias_params.flat())
    for a, b in zip(states, s.graph.keyframes):
        assert np.array_equal(a.position, b.position) and np.array_equal(a.bias.vector(), b.bias.vector())


def test_non_finite_imu_loss_skips_update(feedback_session, monkeypatch):
    s = feedback_session
    before = s.pred.bias_params.flat().copy()
    monkeypatch.setattr(s, "imu_loss", lambda biases=None: (np.nan, [(r, np.full(6, np.nan))
                                                                     for r in list(s.preds.values())[-1:]]))
    s.learn, s.lr_bias = True, 1e-3
    try:
        s.feedback_step()
    finally:
        s.learn, s.lr_bias = False, 0.0
    assert np.array_equal(before, s.pred.bias_params.flat())
    assert "non-finite" in s.state.diagnostics[-1]


def test_visual_update_cadence():
    seq = clean_sequence()
    calls = []

    class Probe(Session):
        def _visual_feedback(self):
            calls.append(self.state.iteration)

    s = session(seq, cls=Probe, learn=True, **dict(CLEAN, corrector=True, max_frames=30, visual_update_every=10))
    s.run()
    assert calls == [10, 20]


# ------------------------------------------------------------- keyframes ---

def _synthetic_chain_session(mode, disparity):
    """Session whose graph holds hand-made keyframes with fixed-disparity
    correspondences, for exercising the culling rule in isolation."""
    s = session(clean_sequence(), **dict(CLEAN, mode=mode))
    s.state.phase = "tracking"
    rng = np.random.default_rng(0)
    px = rng.uniform(50, 400, (10, 2))

    def add(fid):
        s.graph.keyframes.append(KeyframeState(fid, fid, np.zeros(3), Rotation.identity(), patch_pixels=px,
                                               inverse_depths=np.ones(10)))
        if s.chain:
            s.segments[(s.chain[-1], fid)] = [fid - 1, fid]
        s.chain.append(fid)
        for other in s.graph.ids[:-1]:
            for h, t in ((fid, other), (other, fid)):
                s.graph.visual.append(np.full(10, h), np.arange(10), np.full(10, t), px + disparity, np.ones(10),
                                      np.arange(10))

    return s, add


def test_cull_static_hover_binds_gap_cap():
    s, add = _synthetic_chain_session("online_learning", 0.0)
    for f in range(40):
        add(f)
        s.keyframe_cull()
    kept = s.chain
    gaps = np.diff(kept)
    assert gaps.max() == 3
    assert len(kept) < 30


def test_cull_fast_pan_keeps_everything():
    s, add = _synthetic_chain_session("online_learning", 50.0)
    for f in range(30):
        add(f)
        assert s.keyframe_cull() is None
    assert s.chain == list(range(30))


def test_cull_deployment_keeps_keyframe_after_two_removals():
    s, add = _synthetic_chain_session("deployment", 0.0)
    removed = []
    for f in range(40):
        add(f)
        removed.append(s.keyframe_cull() is not None)
    # never three removals in a row
    assert not any(all(removed[i:i + 3]) for i in range(len(removed) - 2))
    assert np.diff(s.chain).max() <= 3


def test_cull_segments_are_merged():
    s, add = _synthetic_chain_session("online_learning", 0.0)
    for f in range(6):
        add(f)
    assert s.keyframe_cull() == 1
    assert s.segments[(0, 2)] == [0, 1, 2]
    assert (0, 1) not in s.segments and (1, 2) not in s.segments


def test_gap_invariant_over_full_run():
    seq = clean_sequence(seed=1, duration=4.5)
    res, s = _run_to(seq, 0, **CLEAN)
    kept = res.keyframe_ids
    assert np.diff(kept).max() <= 3
    assert kept == sorted(kept)


# ---------------------------------------------------------- covisibility ---

def _loop_sequence():
    # period 2 s along x with a matching yaw swing: the camera revisits
    # every earlier viewpoint once per period
    z = np.zeros((3, 1))
    traj = TrajectoryModel(pos_amp=np.array([[0.6], [0.2], [0.0]]), pos_freq=z + 0.5, pos_phase=z,
                           rot_amp=np.array([[0.0], [0.15], [0.0]]), rot_freq=z + 0.5, rot_phase=z,
                           duration=3.5)
    cfg = SceneConfig(seed=0, duration=3.5, gyro_noise_density=0, accel_noise_density=0, accel_bias_walk=0,
                      gyro_bias_walk=0)
    return simulate(cfg, traj)


def test_covisibility_on_revisit_and_cap():
    seq = _loop_sequence()
    res, s = run_sequence(seq, SessionConfig(mode="deployment", **CLEAN))
    assert s.covis_pairs >= 1
    assert max(s.covis_counts) <= 8
    assert res.failed_frames == 0


def test_covisibility_isolated_keyframe_adds_nothing():
    s = session(clean_sequence(), **dict(CLEAN, mode="deployment"))
    s.initialize_map(list(range(8)))
    assert s.build_covisibility(7, [6, 5]) == 0


def test_online_mode_never_builds_covisibility():
    s = session(clean_sequence(), **CLEAN)
    s.initialize_map(list(range(8)))
    with pytest.raises(RuntimeError):
        s.build_covisibility(7, [6])


# ------------------------------------------------------- mode discipline ---

def _short(mode="online_learning", **kw):
    return SessionConfig(mode=mode, max_frames=50, patches_per_frame=32, seed=2, **kw)


def test_deployment_never_updates_parameters():
    seq = clean_sequence(duration=2.5)
    pred = Predictors.fresh(0)
    before = pred.copy()
    run_sequence(seq, _short("deployment"), pred, learn=True, lr_bias=1e-2, lr_visual=1e-2)
    for a, b in ((before.bias_params, pred.bias_params), (before.corrector_params, pred.corrector_params)):
        for k in a:
            assert np.array_equal(a[k], b[k])


def test_online_mode_updates_parameters():
    seq = clean_sequence(duration=2.5)
    pred = Predictors.fresh(0)
    before = pred.bias_params.flat().copy()
    run_sequence(seq, _short(), pred, learn=True, lr_bias=1e-3)
    assert not np.array_equal(before, pred.bias_params.flat())


def test_zero_learning_rate_feedback_leaves_tracking_bit_identical():
    seq = simulate(SceneConfig(seed=3, duration=2.5))
    a, _ = run_sequence(seq, _short(), learn=False)
    b, _ = run_sequence(seq, _short(), learn=True, lr_bias=0.0, lr_visual=0.0)
    assert a.trajectory.positions.tobytes() == b.trajectory.positions.tobytes()
    assert a.trajectory.quaternions.tobytes() == b.trajectory.quaternions.tobytes()


def test_zero_learning_rate_epochs_repeat_metrics():
    seq = simulate(SceneConfig(seed=3, duration=2.5))
    cfg = _short(epochs=2, visual_ba_epochs=1, lr_visual=0.0, lr_bias_ba=0.0, lr_bias_viba=0.0)
    out = run_online_learning(seq, cfg)
    assert len(out.epochs) == 2 and not out.aborted
    # the phase switch changes the estimator, so compare a replay of the same phase
    again = run_online_learning(seq, cfg, out.predictors)
    for x, y in zip(out.epochs, again.epochs):
        assert (x.ate, x.l_imu, x.l_visual) == (y.ate, y.l_imu, y.l_visual)


def test_divergence_aborts(monkeypatch):
    import feedvio.pipeline as pl

    ates = iter([0.1, 0.2, 50.0, 0.1])

    def fake(seq, cfg, predictors=None, **kw):
        return EpochResult(kw["epoch"], None, next(ates), 0.0, 0.0, 0, [], []), None

    monkeypatch.setattr(pl, "run_sequence", fake)
    out = run_online_learning(clean_sequence(), SessionConfig(epochs=4))
    assert out.aborted and len(out.epochs) == 3
    assert "diverged" in out.reason


def test_phase_only_moves_forward():
    seq = clean_sequence()
    seen = []

    class Probe(Session):
        def iteration_hook(self):
            seen.append(self.state.phase)

    session(seq, cls=Probe, **dict(CLEAN, max_frames=45)).run()
    order = {"map_init": 0, "imu_init": 1, "tracking": 2}
    ranks = [order[p] for p in seen]
    assert ranks == sorted(ranks) and ranks[-1] == 2


def test_matcher_noise_is_seeded_per_session():
    seq = simulate(SceneConfig(seed=3, duration=2.5))
    a, _ = run_sequence(seq, _short(pixel_std=1.0))
    b, _ = run_sequence(seq, _short(pixel_std=1.0))
    assert a.trajectory.positions.tobytes() == b.trajectory.positions.tobytes()
    assert isinstance(OracleNoisy(), OracleNoisy)
