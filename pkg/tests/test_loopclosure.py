"""Loop gating, Sim(3) reprojection, two-view alignment, pose-graph solve."""

import math

import numpy as np
import pytest

from vislam.frontend import (
    apply_correction,
    eviction_edge,
    flow_magnitude,
    window_snapshot,
)
from vislam.geometry import Pose, Rotation, SimTransform
from vislam.imu import BiasState, ImuNoiseModel, ImuSample, preintegrate
from vislam.initialization import InitConfig
from vislam.loopclosure import (
    CorrectionEntry,
    KeyframeSummary,
    LoopCorrection,
    LoopEdge,
    LoopPolicy,
    LoopWorker,
    PoseGraph,
    PoseGraphNode,
    align_loop_pair,
    detect_loops,
    sim3_vision_residual,
    solve_pgba,
    total_pg_energy,
)
from vislam.residuals import (
    GravityModel,
    Intrinsics,
    PoseState,
    RelativePoseEdge,
    VisionEdge,
)
from vislam.solver import FrameGraph, Keyframe, SolveOptions
from vislam.synth import SyntheticProvider, TrajectoryModel, make_dataset

MODEL = TrajectoryModel(family="figure8", amplitude=1.5, period=12.0,
                        duration=12.0, yaw_policy="tangent")

CHAIN_INFO = np.diag([4e4] * 3 + [1e4] * 3 + [100.0])


def summary(kid, yaw=0.0, flows=None, **kw):
    pose = Pose(Rotation.exp(np.array([0.0, 0.0, yaw])), np.zeros(3))
    return KeyframeSummary(kid=kid, frame_index=kid, pose=pose,
                           flows=flows or {}, **kw)


@pytest.fixture(scope="module")
def synth():
    ds = make_dataset(MODEL, sigma_px=0.0)
    prov = SyntheticProvider(ds, stride=40)
    return ds, prov, prov.grid_pixels(), prov.intrinsics()


class TestLoopPolicy:
    def test_defaults(self):
        p = LoopPolicy()
        assert (p.min_gap, p.flow_gate, p.ang_gate_deg) == (55, 22.0, 120.0)

    @pytest.mark.parametrize("kw", [
        {"min_gap": 0}, {"min_gap": -3},
        {"flow_gate": 0.0}, {"flow_gate": -1.0},
        {"ang_gate_deg": 0.0}, {"ang_gate_deg": -10.0},
    ])
    def test_rejects_nonpositive_gates(self, kw):
        with pytest.raises(ValueError):
            LoopPolicy(**kw)


class TestDetectLoops:
    def test_small_gap_excluded_regardless_of_flow(self):
        new = summary(10, flows={0: 0.001})
        assert detect_loops(new, [summary(0)]) == []

    def test_large_flow_excluded(self):
        new = summary(100, flows={0: 30.0})
        assert detect_loops(new, [summary(0)]) == []

    def test_gap_100_flow_10_ang_60_accepted(self):
        new = summary(100, yaw=math.radians(60.0), flows={0: 10.0})
        assert detect_loops(new, [summary(0)]) == [(0, 100)]

    def test_gap_boundary_is_inclusive(self):
        new = summary(55, flows={0: 1.0, 1: 1.0})
        assert detect_loops(new, [summary(0), summary(1)]) == [(0, 55)]

    def test_flow_gate_is_strict(self):
        new = summary(100, flows={0: 22.0, 1: 21.999})
        assert detect_loops(new, [summary(0), summary(1)]) == [(1, 100)]

    def test_orientation_gate_brackets(self):
        # the exact 120.0 boundary is not representable through the
        # quaternion round trip, so bracket it tightly from both sides
        hist = [summary(0, yaw=math.radians(120.05)),
                summary(1, yaw=math.radians(119.95))]
        new = summary(100, flows={0: 1.0, 1: 1.0})
        assert detect_loops(new, hist) == [(1, 100)]

    def test_missing_flow_counts_as_infinite(self):
        new = summary(100, flows={})
        assert detect_loops(new, [summary(0)]) == []

    def test_candidates_ordered_by_ascending_flow(self):
        hist = [summary(k) for k in range(4)]
        new = summary(100, flows={0: 9.0, 1: 2.0, 2: 5.0, 3: 2.0})
        assert detect_loops(new, hist) == [(1, 100), (3, 100), (2, 100), (0, 100)]

    @pytest.mark.parametrize("mutate", ["gap", "flow", "ang"])
    def test_each_gate_individually_necessary(self, mutate):
        # base pair passes all three gates; flipping any single gate
        # flips candidacy
        old_kid, yaw, flow = 0, math.radians(30.0), 5.0
        if mutate == "gap":
            old_kid = 50
        elif mutate == "flow":
            flow = 25.0
        else:
            yaw = math.radians(150.0)
        new = summary(100, yaw=yaw, flows={old_kid: flow})
        assert detect_loops(new, [summary(old_kid)]) == []
        good = summary(100, yaw=math.radians(30.0), flows={0: 5.0})
        assert detect_loops(good, [summary(0)]) == [(0, 100)]


def unit_rel(i, j, meas=None, info=None):
    meas = meas if meas is not None else SimTransform.identity()
    info = info if info is not None else np.eye(7)
    return RelativePoseEdge(i, j, meas, info)


class TestLoopEdgeValidation:
    def test_requires_increasing_endpoints(self):
        with pytest.raises(ValueError, match="i < j"):
            LoopEdge(5, 5, unit_rel(5, 5))

    def test_relative_endpoints_must_match(self):
        with pytest.raises(ValueError, match="relative"):
            LoopEdge(0, 60, unit_rel(0, 59))

    def test_vision_endpoints_must_match(self):
        pix = np.zeros((2, 2))
        vis = VisionEdge(1, 60, pix, pix, np.ones((2, 2)))
        with pytest.raises(ValueError, match="vision"):
            LoopEdge(0, 60, unit_rel(0, 60), vis)


def int_state(t):
    return SimTransform(Rotation.identity(), np.array(t, dtype=float), 1.0)


def chain_from(states, info=None):
    info = CHAIN_INFO if info is None else info
    return [RelativePoseEdge(k, k + 1, states[k + 1] * states[k].inverse(), info)
            for k in range(len(states) - 1)]


class TestPoseGraphValidation:
    def make_nodes(self, n):
        return [PoseGraphNode(k, int_state([k, 0, 0])) for k in range(n)]

    def test_duplicate_kids_rejected(self):
        nodes = self.make_nodes(2) + [PoseGraphNode(1, int_state([9, 0, 0]))]
        with pytest.raises(ValueError, match="duplicate"):
            PoseGraph(nodes, [], [])

    def test_chain_must_cover_consecutive_pairs(self):
        nodes = self.make_nodes(3)
        chain = [unit_rel(0, 2)]
        with pytest.raises(ValueError, match="consecutive"):
            PoseGraph(nodes, chain, [])

    def test_loop_endpoints_must_exist(self):
        nodes = self.make_nodes(2)
        loop = LoopEdge(0, 99, unit_rel(0, 99))
        with pytest.raises(ValueError, match="unknown"):
            PoseGraph(nodes, chain_from([n.state for n in nodes]), [loop],
                      min_loop_gap=5)

    def test_loop_gap_gate_enforced(self):
        nodes = self.make_nodes(10)
        loop = LoopEdge(0, 9, unit_rel(0, 9))
        with pytest.raises(ValueError, match="gap"):
            PoseGraph(nodes, chain_from([n.state for n in nodes]), [loop],
                      min_loop_gap=55)

    def test_vision_loop_needs_intrinsics_and_snapshot(self):
        nodes = self.make_nodes(10)
        pix = np.array([[10.0, 10.0], [20.0, 20.0]])
        vis = VisionEdge(0, 9, pix, pix, np.ones((2, 2)))
        loop = LoopEdge(0, 9, unit_rel(0, 9), vis)
        chain = chain_from([n.state for n in nodes])
        with pytest.raises(ValueError, match="intrinsics"):
            PoseGraph(nodes, chain, [loop], min_loop_gap=5)
        k = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0,
                       width=100, height=100)
        with pytest.raises(ValueError, match="snapshot"):
            PoseGraph(nodes, chain, [loop], intrinsics=k, min_loop_gap=5)
        nodes[0].pixels = pix
        nodes[0].disparities = np.array([0.5])    # wrong length
        with pytest.raises(ValueError, match="align"):
            PoseGraph(nodes, chain, [loop], intrinsics=k, min_loop_gap=5)

    def test_lookup_by_kid(self):
        nodes = self.make_nodes(3)
        g = PoseGraph(nodes, chain_from([n.state for n in nodes]), [])
        assert g.node(2).kid == 2
        assert g.index_of(0) == 0


def rand_state(rng, scale=1.0):
    return SimTransform(Rotation.exp(rng.normal(0, 0.1, 3)),
                        rng.normal(0, 0.3, 3), scale)


def make_edge(rng, n=6):
    pix = np.stack([rng.uniform(100, 540, n), rng.uniform(80, 400, n)], axis=1)
    tgt = pix + rng.normal(0, 2.0, (n, 2))
    w = np.full((n, 2), 1.7)
    w[2] = 0.4
    return VisionEdge(1, 9, pix, tgt, w)


PINHOLE = Intrinsics(fx=320.0, fy=320.0, cx=320.0, cy=240.0,
                     width=640, height=480)
OFFSET_EXTRINSIC = Pose(Rotation.exp(np.array([0.02, -0.03, 0.05])),
                        np.array([0.05, -0.02, 0.01]))


class TestSim3VisionResidual:
    def test_zero_at_true_geometry(self, synth):
        ds, prov, grid, k = synth
        edge = prov.edge(0, 4)
        vis = VisionEdge(0, 1, edge.pixels, edge.targets, edge.weights)
        d = 1.0 / prov.depth_hint(0, grid)
        out = sim3_vision_residual(vis, SimTransform.from_pose(ds.frame_pose(0)),
                                   SimTransform.from_pose(ds.frame_pose(4)), d, k)
        assert out.behind_camera == 0
        assert np.max(np.abs(out.residual)) < 1e-9

    def test_global_gauge_invariance(self):
        rng = np.random.default_rng(7)
        edge = make_edge(rng)
        d = rng.uniform(0.2, 0.9, 6)
        S_i, S_j = rand_state(rng, 1.2), rand_state(rng, 0.8)
        G = SimTransform(Rotation.exp(np.array([0.3, -0.2, 0.9])),
                         np.array([2.0, -1.0, 0.5]), 1.7)
        r0 = sim3_vision_residual(edge, S_i, S_j, d, PINHOLE,
                                  OFFSET_EXTRINSIC).residual
        r1 = sim3_vision_residual(edge, G * S_i, G * S_j, d, PINHOLE,
                                  OFFSET_EXTRINSIC).residual
        assert np.max(np.abs(r0 - r1)) < 1e-9

    @pytest.mark.parametrize("tcb", [None, OFFSET_EXTRINSIC],
                             ids=["identity_extrinsic", "offset_extrinsic"])
    def test_state_jacobians_match_finite_differences(self, tcb):
        rng = np.random.default_rng(3)
        edge = make_edge(rng)
        d = rng.uniform(0.2, 0.9, 6)
        S_i, S_j = rand_state(rng, 1.1), rand_state(rng, 0.93)
        out = sim3_vision_residual(edge, S_i, S_j, d, PINHOLE, tcb)
        assert out.valid.all()
        h = 1e-6
        for which, J in (("i", out.J_i), ("j", out.J_j)):
            for c in range(7):
                e = np.zeros(7)
                e[c] = h
                if which == "i":
                    rp = sim3_vision_residual(edge, S_i.retract(e), S_j, d,
                                              PINHOLE, tcb).residual
                    rm = sim3_vision_residual(edge, S_i.retract(-e), S_j, d,
                                              PINHOLE, tcb).residual
                else:
                    rp = sim3_vision_residual(edge, S_i, S_j.retract(e), d,
                                              PINHOLE, tcb).residual
                    rm = sim3_vision_residual(edge, S_i, S_j.retract(-e), d,
                                              PINHOLE, tcb).residual
                fd = (rp - rm) / (2 * h)
                err = np.max(np.abs(fd - J[:, :, c])) / max(1.0, np.max(np.abs(fd)))
                assert err < 1e-4, f"J_{which} column {c}"

    def test_disparity_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        edge = make_edge(rng)
        d = rng.uniform(0.2, 0.9, 6)
        S_i, S_j = rand_state(rng, 1.1), rand_state(rng, 0.93)
        out = sim3_vision_residual(edge, S_i, S_j, d, PINHOLE, OFFSET_EXTRINSIC)
        h = 1e-6
        for m in range(6):
            dp, dm = d.copy(), d.copy()
            dp[m] += h
            dm[m] -= h
            rp = sim3_vision_residual(edge, S_i, S_j, dp, PINHOLE,
                                      OFFSET_EXTRINSIC).residual[m]
            rm = sim3_vision_residual(edge, S_i, S_j, dm, PINHOLE,
                                      OFFSET_EXTRINSIC).residual[m]
            fd = (rp - rm) / (2 * h)
            assert np.max(np.abs(fd - out.J_disparity[m])) < 1e-4

    def test_scale_of_target_state_is_blind_with_identity_extrinsic(self):
        # with a camera at the body origin, scaling the target state
        # rescales the camera-frame point uniformly, which a pinhole
        # projection cannot see
        rng = np.random.default_rng(9)
        edge = make_edge(rng)
        d = rng.uniform(0.2, 0.9, 6)
        out = sim3_vision_residual(edge, rand_state(rng), rand_state(rng), d,
                                   PINHOLE, None)
        assert np.max(np.abs(out.J_j[:, :, 6])) < 1e-10

    def test_points_behind_target_camera_are_masked(self):
        rng = np.random.default_rng(4)
        edge = make_edge(rng)
        d = rng.uniform(0.2, 0.9, 6)
        S_i = SimTransform.identity()
        S_j = SimTransform(Rotation.exp(np.array([0.0, math.pi, 0.0])),
                           np.zeros(3), 1.0)
        out = sim3_vision_residual(edge, S_i, S_j, d, PINHOLE)
        assert out.behind_camera == 6
        assert not out.valid.any()
        assert np.all(out.residual == 0.0)
        assert np.all(out.J_i == 0.0) and np.all(out.J_j == 0.0)

    def test_rejects_bad_disparities(self):
        rng = np.random.default_rng(4)
        edge = make_edge(rng)
        with pytest.raises(ValueError, match="length"):
            sim3_vision_residual(edge, SimTransform.identity(),
                                 SimTransform.identity(),
                                 np.ones(5), PINHOLE)
        d = np.ones(6)
        d[3] = 0.0
        with pytest.raises(ValueError, match="positive"):
            sim3_vision_residual(edge, SimTransform.identity(),
                                 SimTransform.identity(), d, PINHOLE)


class TestAlignLoopPair:
    def test_recovers_true_relative_pose(self, synth):
        ds, prov, grid, k = synth
        edge_raw = prov.edge(0, 6)
        vis = VisionEdge(0, 6, edge_raw.pixels, edge_raw.targets,
                         edge_raw.weights)
        d = 1.0 / prov.depth_hint(0, grid)
        S_i = SimTransform.from_pose(ds.frame_pose(0))
        S_j_gt = SimTransform.from_pose(ds.frame_pose(6))
        rng = np.random.default_rng(11)
        pert = np.concatenate([rng.normal(0, 0.02, 3),
                               rng.normal(0, 0.05, 3), [0.03]])
        rel = align_loop_pair(vis, d, S_i, S_j_gt.retract(pert), k)
        assert (rel.i, rel.j) == (0, 6)
        S_rec = rel.measurement * S_i
        rot_err = np.linalg.norm(
            (S_rec.rotation.inverse() * S_j_gt.rotation).log())
        assert rot_err < 1e-9
        assert np.linalg.norm(S_rec.translation - S_j_gt.translation) < 1e-9

    def test_information_is_clamped_and_symmetric(self, synth):
        ds, prov, grid, k = synth
        edge_raw = prov.edge(0, 6)
        vis = VisionEdge(0, 6, edge_raw.pixels, edge_raw.targets,
                         edge_raw.weights)
        d = 1.0 / prov.depth_hint(0, grid)
        rel = align_loop_pair(vis, d, SimTransform.from_pose(ds.frame_pose(0)),
                              SimTransform.from_pose(ds.frame_pose(6)), k)
        info = rel.information
        assert np.array_equal(info, info.T)
        vals = np.linalg.eigvalsh(info)
        # eigendecomposition round-off scales with the largest eigenvalue
        slack = 64 * np.finfo(float).eps * vals.max()
        assert vals.min() >= 1e-3 - slack
        assert vals.max() <= 1e8 * (1 + 1e-9)
        # the blind scale direction must sit at the floor, not at zero
        assert vals.min() < 2e-3


def drifting_circle(n=61, cumulative_scale=1.05):
    """Ground truth on a wavy circle arc plus a scale-creeping odometry."""
    ang = np.linspace(0.0, 1.5 * np.pi, n)
    gt = []
    for a in ang:
        p = np.array([2 * np.cos(a), 2 * np.sin(a), 0.1 * np.sin(3 * a)])
        gt.append(SimTransform(Rotation.exp(np.array([0, 0, a + np.pi / 2])),
                               p, 1.0))
    sigma = cumulative_scale ** (1.0 / (n - 1))
    drift = [gt[0].copy()]
    for k in range(n - 1):
        rel = gt[k + 1] * gt[k].inverse()
        meas = SimTransform(Rotation(rel.rotation.q.copy()),
                            rel.translation.copy(), sigma)
        drift.append(meas * drift[k])
    return gt, drift


def translation_rmse(states, reference):
    d = np.array([s.translation for s in states]) \
        - np.array([r.translation for r in reference])
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


class TestSolvePgba:
    def exact_graph(self):
        states = [int_state([k, 2.0 * k % 7, -(k % 3)]) for k in range(61)]
        nodes = [PoseGraphNode(k, s.copy(), timestamp=float(k))
                 for k, s in enumerate(states)]
        loop = LoopEdge(0, 60, RelativePoseEdge(
            0, 60, states[60] * states[0].inverse(), np.eye(7) * 1e6))
        return PoseGraph(nodes, chain_from(states), [loop])

    def test_exactly_consistent_graph_is_untouched(self):
        g = self.exact_graph()
        before = [(n.state.rotation.q.copy(), n.state.translation.copy())
                  for n in g.nodes]
        assert total_pg_energy(g) == 0.0
        report, corr = solve_pgba(g)
        assert report.final_cost == 0.0
        for node, (q, t) in zip(g.nodes, before):
            assert np.array_equal(node.state.rotation.q, q)
            assert np.array_equal(node.state.translation, t)
            assert node.state.scale == 1.0
        for e in corr.entries.values():
            assert e.scale_change == 1.0
            assert np.array_equal(e.old_pose.translation,
                                  e.new_pose.translation)
            assert np.array_equal(e.old_pose.rotation.q, e.new_pose.rotation.q)
        assert corr.timestamp == 60.0

    def test_requires_a_loop_edge(self):
        states = [int_state([k, 0, 0]) for k in range(5)]
        nodes = [PoseGraphNode(k, s) for k, s in enumerate(states)]
        g = PoseGraph(nodes, chain_from(states), [])
        with pytest.raises(ValueError, match="no loop edges"):
            solve_pgba(g)

    def test_rejects_disconnected_graph(self):
        nodes = [PoseGraphNode(0, int_state([0, 0, 0])),
                 PoseGraphNode(60, int_state([5, 0, 0]))]
        loop = LoopEdge(0, 60, unit_rel(0, 60))
        g = PoseGraph(nodes, [], [loop])
        with pytest.raises(ValueError, match="disconnected"):
            solve_pgba(g)

    def test_non_finite_energy_raises(self):
        states = [int_state([k, 0, 0]) for k in range(61)]
        nodes = [PoseGraphNode(k, s.copy()) for k, s in enumerate(states)]
        bad = SimTransform(Rotation.identity(),
                           np.array([np.nan, 0.0, 0.0]), 1.0)
        loop = LoopEdge(0, 60, RelativePoseEdge(0, 60, bad, np.eye(7)))
        g = PoseGraph(nodes, chain_from(states), [loop])
        with pytest.raises(RuntimeError, match="finite"):
            solve_pgba(g)

    def test_scale_drift_closed_by_exact_loop(self):
        gt, drift = drifting_circle()
        nodes = [PoseGraphNode(k, drift[k].copy(), timestamp=float(k))
                 for k in range(61)]
        loop = LoopEdge(0, 60, RelativePoseEdge(
            0, 60, gt[60] * gt[0].inverse(), np.eye(7) * 1e6))
        g = PoseGraph(nodes, chain_from(drift), [loop])
        assert abs(drift[60].scale - 1.05) < 1e-12
        ate_before = translation_rmse(drift, gt)
        report, corr = solve_pgba(g, SolveOptions(max_iterations=30))

        # endpoint scale ratio pulled back to 1 within 0.5%
        assert abs(g.nodes[60].state.scale - 1.0) <= 0.005
        # trajectory error shrinks at least fivefold
        ate_after = translation_rmse([n.state for n in g.nodes], gt)
        assert ate_after <= ate_before / 5.0
        # accepted steps decrease cost monotonically
        assert all(b < a for a, b in
                   zip(report.cost_trajectory, report.cost_trajectory[1:]))
        assert report.final_cost < report.initial_cost

    def test_gauge_state_is_bit_identical(self):
        gt, drift = drifting_circle()
        nodes = [PoseGraphNode(k, drift[k].copy()) for k in range(61)]
        loop = LoopEdge(0, 60, RelativePoseEdge(
            0, 60, gt[60] * gt[0].inverse(), np.eye(7) * 1e6))
        g = PoseGraph(nodes, chain_from(drift), [loop])
        q0 = g.nodes[0].state.rotation.q.copy()
        t0 = g.nodes[0].state.translation.copy()
        s0 = g.nodes[0].state.scale
        solve_pgba(g)
        assert np.array_equal(g.nodes[0].state.rotation.q, q0)
        assert np.array_equal(g.nodes[0].state.translation, t0)
        assert g.nodes[0].state.scale == s0

    def test_correction_composition_reproduces_new_poses(self):
        gt, drift = drifting_circle()
        nodes = [PoseGraphNode(k, drift[k].copy()) for k in range(61)]
        loop = LoopEdge(0, 60, RelativePoseEdge(
            0, 60, gt[60] * gt[0].inverse(), np.eye(7) * 1e6))
        g = PoseGraph(nodes, chain_from(drift), [loop])
        _, corr = solve_pgba(g)
        assert set(corr.entries) == {n.kid for n in g.nodes}
        for e in corr.entries.values():
            redone = e.delta() * SimTransform.from_pose(e.old_pose)
            ang = np.linalg.norm(
                (redone.rotation.inverse() * e.new_pose.rotation).log())
            assert ang < 1e-12
            assert np.max(np.abs(redone.translation
                                 - e.new_pose.translation)) < 1e-12
            assert abs(redone.scale - e.scale_change) < 1e-12

    def test_vision_loop_refines_states_and_disparities(self, synth):
        ds, prov, grid, k = synth
        frames = [0, 2, 4, 6, 8, 10]
        gt = [SimTransform.from_pose(ds.frame_pose(f)) for f in frames]
        drifted = [gt[0].copy()]
        for n in range(1, 6):
            a = n / 5.0
            D = SimTransform(Rotation.exp(a * np.array([0.0, 0.0, 0.04])),
                             a * np.array([0.12, -0.08, 0.05]), 1.0)
            drifted.append(D * gt[n])
        edge_raw = prov.edge(frames[0], frames[-1])
        vis = VisionEdge(0, 5, edge_raw.pixels, edge_raw.targets,
                         edge_raw.weights)
        d0 = 1.0 / prov.depth_hint(frames[0], grid)
        rel = align_loop_pair(vis, d0, drifted[0], drifted[5], k)
        nodes = [PoseGraphNode(n, drifted[n].copy(),
                               pixels=grid if n == 0 else None,
                               disparities=d0.copy() if n == 0 else None,
                               timestamp=float(n)) for n in range(6)]
        g = PoseGraph(nodes, chain_from(drifted), [LoopEdge(0, 5, rel, vis)],
                      intrinsics=k, min_loop_gap=5)
        err_before = np.linalg.norm(drifted[5].translation - gt[5].translation)
        report, _ = solve_pgba(g, SolveOptions(max_iterations=15))
        err_after = np.linalg.norm(g.nodes[5].state.translation
                                   - gt[5].translation)
        assert report.final_cost < report.initial_cost / 100.0
        assert err_after < err_before / 4.0
        assert not np.array_equal(g.nodes[0].disparities, d0)
        assert np.all(g.nodes[0].disparities > 0.0)


@pytest.fixture(scope="module")
def worker_run():
    """Full worker pass over a revisiting trajectory with injected drift."""
    model = TrajectoryModel(family="figure8", amplitude=1.5, period=12.0,
                            duration=12.8, yaw_policy="tangent")
    ds = make_dataset(model, sigma_px=0.0, frame_rate=10.0)
    prov = SyntheticProvider(ds, stride=40)
    grid = prov.grid_pixels()
    n = ds.n_frames()
    gt = [SimTransform.from_pose(ds.frame_pose(f)) for f in range(n)]
    drifted = []
    for f in range(n):
        a = f / (n - 1)
        D = SimTransform(Rotation.exp(a * np.array([0.0, 0.0, 0.05])),
                         a * np.array([0.25, -0.20, 0.10]), 1.0)
        drifted.append(D * gt[f])
    chain = chain_from(drifted)

    policy = LoopPolicy()
    worker = LoopWorker(prov.intrinsics(), prov.edge, policy)
    window = 12
    admitted = []
    for f in range(n):
        flows = {}
        for old in range(0, f - policy.min_gap + 1):
            try:
                flows[old] = flow_magnitude(prov.edge(old, f))
            except ValueError:
                pass                       # no covisible pixels, skip
        pair = worker.ingest_summary(KeyframeSummary(
            kid=f, frame_index=f, pose=drifted[f].pose(), flows=flows,
            pixels=grid, disparities=1.0 / prov.depth_hint(f, grid),
            timestamp=ds.frame_time(f)))
        if pair is not None:
            admitted.append(pair)
        if f >= window:
            worker.ingest_eviction(f - window, drifted[f - window].pose(),
                                   chain[f - window])
    window_kids = range(n - window, n)
    report, corr = worker.solve(
        [(kid, drifted[kid].copy(), ds.frame_time(kid)) for kid in window_kids],
        [chain[i] for i in range(n - window, n - 1)],
        SolveOptions(max_iterations=20))
    return {
        "n": n, "gt": gt, "drifted": drifted, "worker": worker,
        "admitted": admitted, "report": report, "correction": corr,
    }


class TestLoopWorker:
    def test_loops_admitted_respect_gap(self, worker_run):
        admitted = worker_run["admitted"]
        assert len(admitted) > 0
        assert all(j - i >= 55 for i, j in admitted)
        assert worker_run["worker"].loops_closed == len(admitted)

    def test_period_revisit_is_found(self, worker_run):
        # the trajectory repeats after 120 frames, so keyframe 120 must
        # close against keyframe 0
        assert (0, 120) in worker_run["admitted"]

    def test_solve_collapses_energy(self, worker_run):
        report = worker_run["report"]
        assert report.final_cost < 1e-3 * report.initial_cost

    def test_revisit_drift_removed(self, worker_run):
        n, gt = worker_run["n"], worker_run["gt"]
        drifted, worker = worker_run["drifted"], worker_run["worker"]
        err0 = np.array([np.linalg.norm(drifted[f].translation
                                        - gt[f].translation)
                         for f in range(n)])
        err1 = np.array([np.linalg.norm(worker.poses[f].translation
                                        - gt[f].translation)
                         for f in range(n)])
        revisit = slice(113, n)
        rms0 = np.sqrt(np.mean(err0[revisit] ** 2))
        rms1 = np.sqrt(np.mean(err1[revisit] ** 2))
        assert rms1 < rms0 / 10.0
        assert err1[120] < 1e-2
        assert np.sqrt(np.mean(err1 ** 2)) < np.sqrt(np.mean(err0 ** 2))

    def test_correction_covers_all_keyframes(self, worker_run):
        corr = worker_run["correction"]
        assert set(corr.entries) == set(range(worker_run["n"]))
        gauge = corr.entries[0]
        assert np.array_equal(gauge.old_pose.rotation.q,
                              gauge.new_pose.rotation.q)
        assert np.array_equal(gauge.old_pose.translation,
                              gauge.new_pose.translation)
        assert gauge.scale_change == 1.0

    def test_archived_nodes_enter_at_unit_scale(self, worker_run):
        worker = worker_run["worker"]
        assert len(worker.states) > 0

    def test_duplicate_summary_rejected(self, worker_run):
        worker = worker_run["worker"]
        with pytest.raises(ValueError, match="already"):
            worker.ingest_summary(summary(0))

    def test_solve_without_loops_returns_none(self, synth):
        _, prov, _, k = synth
        worker = LoopWorker(k, prov.edge)
        assert worker.solve([], []) is None
        assert worker.pending is False

    def test_admission_needs_source_snapshot(self, synth):
        _, prov, _, k = synth
        worker = LoopWorker(k, prov.edge)
        worker.ingest_summary(summary(0))       # no pixel snapshot
        with pytest.raises(ValueError, match="snapshot"):
            worker.ingest_summary(summary(55, flows={0: 1.0}))


def make_static_delta(duration=0.1):
    gravity = GravityModel()
    samples = [ImuSample(t, np.zeros(3), -gravity.vector())
               for t in np.arange(0.0, duration + 1e-9, 0.005)]
    return preintegrate(samples, BiasState(), ImuNoiseModel())


def tiny_tracker():
    """Three-keyframe window plus one archived pose, built directly."""
    from vislam.frontend import ArchivedKeyframe, TrackerState, PHASE_FULL
    rng = np.random.default_rng(2)
    pix = np.stack([rng.uniform(50, 590, 5), rng.uniform(50, 430, 5)], axis=1)
    kfs = []
    for n in range(3):
        pose = Pose(Rotation.exp(np.array([0.0, 0.0, 0.1 * n])),
                    np.array([0.5 * n, 0.1, 0.0]))
        state = PoseState(pose, np.array([0.2, 0.0, 0.1]), BiasState(),
                          timestamp=1.0 + n)
        kfs.append(Keyframe(n, state, pix.copy(),
                            rng.uniform(0.3, 0.8, 5)))
    delta = make_static_delta()
    edges = [VisionEdge(0, 1, pix, pix, np.ones((5, 2))),
             VisionEdge(1, 2, pix, pix, np.ones((5, 2)))]
    graph = FrameGraph(kfs, edges, [(0, 1, delta), (1, 2, delta)],
                       GravityModel(), PINHOLE)
    tracker = TrackerState(provider=None, policy=None, init_cfg=InitConfig(),
                           noise=ImuNoiseModel(), graph=graph,
                           phase=PHASE_FULL)
    tracker.archive.append(ArchivedKeyframe(
        kid=100, frame_index=0, timestamp=0.5,
        pose=Pose(Rotation.identity(), np.array([9.0, 0.0, 0.0]))))
    return tracker


class TestTrackerSeam:
    def test_window_snapshot_shape(self):
        tracker = tiny_tracker()
        nodes, chain = window_snapshot(tracker)
        assert [kid for kid, _, _ in nodes] == [0, 1, 2]
        assert all(isinstance(s, SimTransform) and s.scale == 1.0
                   for _, s, _ in nodes)
        assert [t for _, _, t in nodes] == [1.0, 2.0, 3.0]
        assert [(e.i, e.j) for e in chain] == [(0, 1), (1, 2)]
        kf = tracker.graph.keyframes
        expect = SimTransform.from_pose(kf[1].state.pose) \
            * SimTransform.from_pose(kf[0].state.pose).inverse()
        got = chain[0].measurement
        assert np.allclose(got.translation, expect.translation)
        assert got.scale == 1.0

    def test_window_snapshot_does_not_alias_tracker_state(self):
        tracker = tiny_tracker()
        nodes, _ = window_snapshot(tracker)
        nodes[0][1].translation[:] = 99.0
        assert tracker.graph.keyframes[0].state.pose.translation[0] != 99.0

    def test_apply_correction_warps_window_and_archive(self):
        tracker = tiny_tracker()
        kf1 = tracker.graph.keyframes[1]
        old_pose = kf1.state.pose.copy()
        old_vel = kf1.state.velocity.copy()
        old_disp = kf1.disparities.copy()
        delta = SimTransform(Rotation.exp(np.array([0.0, 0.0, 0.2])),
                             np.array([0.3, -0.1, 0.05]), 2.0)
        warped = delta * SimTransform.from_pose(old_pose)
        arch = tracker.archive[0]
        arch_old = arch.pose.copy()

        def entry_for(kid, pose):
            new = delta * SimTransform.from_pose(pose)
            return CorrectionEntry(kid, pose.copy(), new.pose(), new.scale)

        untouched = tracker.graph.keyframes[0].state.pose
        corr = LoopCorrection({
            0: CorrectionEntry(0, untouched.copy(), untouched.copy(), 1.0),
            1: entry_for(1, old_pose),
            100: entry_for(100, arch_old),
        }, timestamp=3.0)
        n = apply_correction(tracker, corr)
        assert n == 2
        # keyframe 0: unchanged entry leaves the object untouched
        assert tracker.graph.keyframes[0].state.pose is untouched
        # keyframe 1: pose composed, velocity rotated and scaled,
        # disparities divided by the scale change
        assert np.allclose(kf1.state.pose.translation, warped.translation,
                           atol=1e-12)
        assert np.allclose(kf1.state.velocity,
                           2.0 * delta.rotation.apply(old_vel), atol=1e-12)
        assert np.allclose(kf1.disparities, old_disp / 2.0, atol=1e-15)
        # keyframe 2: no entry, untouched
        assert tracker.graph.keyframes[2].state.pose.translation[0] == 1.0
        # archived pose rewarped
        expected = (delta * SimTransform.from_pose(arch_old)).pose()
        assert np.allclose(arch.pose.translation, expected.translation,
                           atol=1e-12)

    def test_apply_correction_roundtrip_with_solver_output(self):
        # push the window through a real pose-graph solve and apply the
        # correction back: tracker poses must land on the solved states
        tracker = tiny_tracker()
        tracker.archive.clear()
        nodes, chain = window_snapshot(tracker)
        big_nodes = []
        states = [s for _, s, _ in nodes]
        loop_meas = states[2] * states[0].inverse()
        pert = loop_meas.retract(np.array([0.01, 0, 0, 0.05, 0, 0, 0.0]))
        big_nodes = [PoseGraphNode(kid, s, timestamp=t)
                     for (kid, s, t) in nodes]
        g = PoseGraph(big_nodes, chain,
                      [LoopEdge(0, 2, RelativePoseEdge(0, 2, pert,
                                                       np.eye(7) * 1e4))],
                      min_loop_gap=2)
        _, corr = solve_pgba(g, SolveOptions(max_iterations=10))
        apply_correction(tracker, corr)
        for node, kf in zip(g.nodes, tracker.graph.keyframes):
            assert np.allclose(kf.state.pose.translation,
                               node.state.pose().translation, atol=1e-9)
