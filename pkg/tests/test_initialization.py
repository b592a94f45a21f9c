import numpy as np
import pytest

from vislam.evaluation import umeyama
from vislam.geometry import Pose, Rotation
from vislam.imu import BiasState, ImuNoiseModel, ImuSample, PreintegratedDelta, preintegrate
from vislam.initialization import (
    InitConfig,
    align_gravity,
    apply_initialization,
    init_inertial_only,
    init_joint,
    init_vision,
    run_full_initialization,
)
from vislam.residuals import GravityModel, PoseState
from vislam.solver import FrameGraph, total_energy

from windows import build_window, perturb_graph


def _vision_energy(graph):
    vis = FrameGraph(keyframes=graph.keyframes, vision_edges=graph.vision_edges,
                     inertial_edges=[], gravity=graph.gravity,
                     intrinsics=graph.intrinsics, T_cb=graph.T_cb)
    return total_energy(vis)


def _rescale_graph(graph, k):
    """Scale the window's positions by k (and compensate disparities)."""
    for kf in graph.keyframes:
        st = kf.state
        kf.state = PoseState(Pose(st.pose.rotation, k * st.pose.translation),
                             k * st.velocity, st.bias.copy(), st.timestamp)
        kf.disparities = kf.disparities / k


class TestInitConfig:
    def test_vision_count_lower_bound(self):
        with pytest.raises(ValueError):
            InitConfig(n_vis_init=1, n_iner_init=5)

    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            InitConfig(n_vis_init=10, n_iner_init=5)


class TestInitVision:
    def test_recovers_geometry_up_to_similarity(self):
        rng = np.random.default_rng(0)
        graph, truth = build_window(rng, n_kf=8)
        perturb_graph(graph, rng, rot_deg=1.5, trans_m=0.04)
        for kf in graph.keyframes:
            kf.disparities = kf.disparities * rng.uniform(0.97, 1.03, len(kf.disparities))
        report = init_vision(graph)
        assert report.final_cost < report.initial_cost
        est = np.stack([kf.state.pose.translation for kf in graph.keyframes])
        gt = np.stack([t.pose.translation for t in truth])
        S = umeyama(est, gt, with_scale=True)
        aligned = np.stack([S.apply(p) for p in est])
        assert np.max(np.linalg.norm(aligned - gt, axis=1)) < 1e-6

    def test_empty_window_rejected(self):
        graph = FrameGraph(keyframes=[], vision_edges=[], inertial_edges=[],
                           gravity=GravityModel(),
                           intrinsics=build_window(np.random.default_rng(1))[0].intrinsics)
        with pytest.raises(ValueError, match="empty"):
            init_vision(graph)

    def test_depth_rescale_preserves_vision_energy(self):
        rng = np.random.default_rng(2)
        graph, _ = build_window(rng, n_kf=5)
        perturb_graph(graph, rng, rot_deg=0.5, trans_m=0.02)
        before = _vision_energy(graph)
        _rescale_graph(graph, 3.7)
        after = _vision_energy(graph)
        assert abs(after - before) <= 1e-10 * max(before, 1.0)


def _stationary_fixture(accel_body, n_kf=4, dt=0.25, rate=200.0):
    """Keyframe states at rest plus deltas preintegrated from constant
    measurements."""
    states = []
    deltas = []
    for k in range(n_kf):
        states.append(PoseState(Pose(Rotation.identity(), np.zeros(3)),
                                np.zeros(3), BiasState(), k * dt))
    n_samp = int(dt * rate) + 1
    for k in range(n_kf - 1):
        ts = k * dt + np.arange(n_samp) / rate
        samples = [ImuSample(t, np.zeros(3), np.asarray(accel_body, dtype=float))
                   for t in ts]
        deltas.append(preintegrate(samples, BiasState(), ImuNoiseModel()))
    return states, deltas


class TestAlignGravity:
    def test_stationary_level_rig_gives_identity(self):
        states, deltas = _stationary_fixture([0.0, 0.0, -9.81])
        g = align_gravity(states, deltas)
        assert np.linalg.norm(g.R_wg.log()) < 1e-6
        assert g.magnitude == 9.81

    def test_pitched_rig_direction_recovered(self):
        rng = np.random.default_rng(3)
        tilt = Rotation.exp([np.deg2rad(10.0), 0.0, 0.0])
        gravity = GravityModel(tilt)
        graph, truth = build_window(rng, n_kf=6, gravity=gravity)
        deltas = [d for _, _, d in graph.inertial_edges]
        est = align_gravity(truth, deltas)
        g_true = gravity.vector()
        g_est = est.vector()
        cosang = g_true @ g_est / (np.linalg.norm(g_true) * np.linalg.norm(g_est))
        assert np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))) < 0.1

    def test_estimate_has_no_yaw_component(self):
        rng = np.random.default_rng(4)
        gravity = GravityModel(Rotation.exp([0.15, -0.1, 0.0]))
        graph, truth = build_window(rng, n_kf=5, gravity=gravity)
        deltas = [d for _, _, d in graph.inertial_edges]
        est = align_gravity(truth, deltas)
        assert abs(est.R_wg.log()[2]) < 1e-12

    def test_energy_invariant_under_yaw_about_gravity(self):
        rng = np.random.default_rng(5)
        graph, _ = build_window(rng, n_kf=5)
        base = total_energy(graph)
        yaw = Rotation.exp([0.0, 0.0, 0.8])
        for kf in graph.keyframes:
            st = kf.state
            kf.state = PoseState(Pose(yaw * st.pose.rotation,
                                      yaw.apply(st.pose.translation)),
                                 yaw.apply(st.velocity), st.bias.copy(),
                                 st.timestamp)
        rotated = total_energy(graph)
        assert abs(rotated - base) <= 1e-10 * max(base, 1.0)

    def test_unobservable_direction_rejected(self):
        states = [PoseState(Pose(Rotation.identity(), np.zeros(3)), np.zeros(3),
                            BiasState(), 0.25 * k) for k in range(3)]
        null_delta = PreintegratedDelta(
            dt_total=0.25, delta_R=Rotation.identity(), delta_p=np.zeros(3),
            delta_v=np.zeros(3), J_rot=np.eye(3), J_pos=np.zeros((3, 6)),
            J_vel=np.zeros((3, 6)), covariance=np.eye(15),
            bias_lin_point=BiasState())
        with pytest.raises(ValueError, match="unobservable"):
            align_gravity(states, [null_delta, null_delta])


class TestInertialOnly:
    def test_recovers_doubled_scale(self):
        rng = np.random.default_rng(6)
        graph, _ = build_window(rng, n_kf=8)
        _rescale_graph(graph, 0.5)
        result = init_inertial_only(graph)
        assert abs(result.scale() - 2.0) < 0.02

    def test_recovers_injected_gyro_bias(self):
        rng = np.random.default_rng(7)
        true_bias = BiasState([0.01, -0.02, 0.005], [0.03, -0.01, 0.02])
        graph, _ = build_window(rng, n_kf=8, bias=true_bias, bias_hat=BiasState())
        result = init_inertial_only(graph)
        err = np.linalg.norm(result.bias.gyro_bias - true_bias.gyro_bias)
        assert err < 0.05 * np.linalg.norm(true_bias.gyro_bias)

    def test_metric_input_gives_zero_log_scale(self):
        rng = np.random.default_rng(8)
        graph, _ = build_window(rng, n_kf=8)
        result = init_inertial_only(graph)
        assert abs(result.log_scale) < 1e-4

    def test_scale_equivariance(self):
        rng = np.random.default_rng(9)
        graph_a, _ = build_window(rng, n_kf=6)
        rng = np.random.default_rng(9)
        graph_b, _ = build_window(rng, n_kf=6)
        k = 1.7
        _rescale_graph(graph_b, k)
        s_a = init_inertial_only(graph_a).log_scale
        s_b = init_inertial_only(graph_b).log_scale
        assert abs((s_b - s_a) - (-np.log(k))) < 1e-6

    def test_too_few_keyframes_rejected(self):
        rng = np.random.default_rng(10)
        graph, _ = build_window(rng, n_kf=3)
        graph.keyframes = graph.keyframes[:1]
        graph.vision_edges = []
        graph.inertial_edges = []
        with pytest.raises(ValueError):
            init_inertial_only(graph)


class TestJointAndPipeline:
    def test_joint_energy_not_above_stage2(self):
        rng = np.random.default_rng(11)
        graph, _ = build_window(rng, n_kf=8)
        _rescale_graph(graph, 0.6)
        result = init_inertial_only(graph)
        apply_initialization(graph, result)
        stage2_energy = total_energy(graph)
        init_joint(graph)
        assert total_energy(graph) <= stage2_energy + 1e-12

    def test_already_optimal_converges_immediately(self):
        rng = np.random.default_rng(12)
        graph, _ = build_window(rng, n_kf=6)
        report = init_joint(graph)
        assert report.iterations <= 2

    def test_full_pipeline_recovers_gravity_scale_and_bias(self):
        rng = np.random.default_rng(13)
        true_bias = BiasState([0.008, -0.012, 0.004], [0.02, 0.01, -0.015])
        gravity = GravityModel(Rotation.exp([0.06, -0.09, 0.0]))
        graph, truth = build_window(rng, n_kf=10, gravity=gravity,
                                    bias=true_bias, bias_hat=BiasState())
        _rescale_graph(graph, 0.5)
        perturb_graph(graph, rng, rot_deg=0.3, trans_m=0.01, vel=0.01)
        result = run_full_initialization(graph)

        g_true = gravity.vector()
        g_est = graph.gravity.vector()
        cosang = g_true @ g_est / (np.linalg.norm(g_true) * np.linalg.norm(g_est))
        assert np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))) < 0.5
        assert abs(result.scale() - 2.0) < 0.02
        err = np.linalg.norm(result.bias.gyro_bias - true_bias.gyro_bias)
        assert err < 0.05 * np.linalg.norm(true_bias.gyro_bias)
        assert set(result.reports) == {"vision", "inertial", "joint"}

    def test_pipeline_with_pixel_noise_stays_within_tolerance(self):
        rng = np.random.default_rng(14)
        graph, _ = build_window(rng, n_kf=10, n_px=40, vision_weight=1.0 / 0.25 ** 2)
        for edge in graph.vision_edges:
            edge.targets = edge.targets + 0.25 * rng.standard_normal(edge.targets.shape)
        _rescale_graph(graph, 0.5)
        result = run_full_initialization(graph)
        g_est = graph.gravity.vector()
        g_true = GravityModel().vector()
        cosang = g_true @ g_est / (np.linalg.norm(g_true) * np.linalg.norm(g_est))
        assert np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))) < 0.5
        assert abs(result.scale() - 2.0) < 0.02
