"""Staged estimator bootstrap: vision-only geometry, then gravity, scale,
velocities, and bias from the preintegrated inertial terms, then one joint
refinement.

Stage 1 solves a vision-only bundle adjustment of the accumulated window, so
its geometry is known only up to a global similarity. Stage 2 freezes those
poses and fits the metric unknowns: a log-scale applied to all positions,
the 2-dof gravity orientation, one shared bias, and per-keyframe velocities.
Stage 3 applies the stage-2 solution to the window and runs the full
visual-inertial solve with the gravity direction left free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation
from .imu import BiasState
from .residuals import (
    GRAVITY_TANGENT_BASIS,
    GravityModel,
    PoseState,
    inertial_residual,
)
from .solver import FrameGraph, SolveOptions, SolveReport, solve_vi_ba


@dataclass
class InitConfig:
    """Stage trigger counts and per-stage iteration budgets."""

    n_vis_init: int = 10
    n_iner_init: int = 20
    max_iterations_vision: int = 30
    max_iterations_inertial: int = 60
    max_iterations_joint: int = 15
    damping: float = 1e-4

    def __post_init__(self):
        if not 2 <= self.n_vis_init <= self.n_iner_init:
            raise ValueError("need n_iner_init >= n_vis_init >= 2")
        for name in ("max_iterations_vision", "max_iterations_inertial",
                     "max_iterations_joint"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass
class InitResult:
    """Metric bootstrap estimate plus per-stage diagnostics."""

    gravity: GravityModel
    log_scale: float
    velocities: np.ndarray
    bias: BiasState
    reports: dict = field(default_factory=dict)

    def scale(self) -> float:
        return float(np.exp(self.log_scale))


def init_vision(graph: FrameGraph, cfg: InitConfig | None = None) -> SolveReport:
    """Stage 1: vision-only bundle adjustment of the window.

    Solves poses and disparities with inertial terms excluded and the first
    keyframe frozen, leaving the usual global-similarity gauge freedom.
    """
    cfg = cfg if cfg is not None else InitConfig()
    if not graph.keyframes:
        raise ValueError("cannot initialize an empty window")
    vis_graph = FrameGraph(keyframes=graph.keyframes,
                           vision_edges=graph.vision_edges,
                           inertial_edges=[],
                           gravity=graph.gravity,
                           intrinsics=graph.intrinsics,
                           T_cb=graph.T_cb)
    opts = SolveOptions(max_iterations=cfg.max_iterations_vision,
                        damping=cfg.damping,
                        frozen_keyframes=(graph.keyframes[0].kid,),
                        optimize_velocity_bias=False)
    return solve_vi_ba(vis_graph, opts)


def align_gravity(states: list, deltas: list,
                  magnitude: float = 9.81) -> GravityModel:
    """Closed-form gravity direction from per-pair velocity changes.

    Each consecutive pair gives g ~ (v_j - v_i - R_i dv_ij) / dt; the mean
    direction is mapped to a rotation with no yaw component (the geodesic
    taking the inertial gravity axis onto the estimate).
    """
    if len(states) < 2 or len(deltas) != len(states) - 1:
        raise ValueError("need one preintegrated delta per consecutive pair")
    votes = []
    for k, delta in enumerate(deltas):
        s_i, s_j = states[k], states[k + 1]
        dt = delta.dt_total
        g_est = (s_j.velocity - s_i.velocity
                 - s_i.pose.rotation.apply(delta.delta_v)) / dt
        votes.append(g_est)
    g_mean = np.mean(votes, axis=0)
    norm = np.linalg.norm(g_mean)
    if norm < 1e-8:
        raise ValueError("gravity direction unobservable from these windows")
    direction = g_mean / norm
    e3 = np.array([0.0, 0.0, 1.0])
    c = float(np.clip(direction @ e3, -1.0, 1.0))
    axis = np.cross(e3, direction)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        # parallel or anti-parallel; the anti-parallel branch needs any
        # horizontal axis, picked deterministically
        rotvec = np.zeros(3) if c > 0.0 else np.array([np.pi, 0.0, 0.0])
    else:
        rotvec = axis / s * np.arctan2(s, c)
    return GravityModel(Rotation.exp(rotvec), magnitude)


def _fd_velocities(graph: FrameGraph) -> np.ndarray:
    """Central-difference velocity seeds from keyframe positions."""
    states = [kf.state for kf in graph.keyframes]
    n = len(states)
    v = np.zeros((n, 3))
    for k in range(n):
        a = max(0, k - 1)
        b = min(n - 1, k + 1)
        dt = states[b].timestamp - states[a].timestamp
        if dt <= 0.0:
            raise ValueError("keyframe timestamps must increase")
        v[k] = (states[b].pose.translation - states[a].pose.translation) / dt
    return v


def _inertial_only_cost(graph: FrameGraph, s: float, gravity: GravityModel,
                        bias: BiasState, velocities: np.ndarray):
    """Residual stack of all inertial edges on scale-adjusted states."""
    es = float(np.exp(s))
    states = {}
    for k, kf in enumerate(graph.keyframes):
        st = kf.state
        states[kf.kid] = PoseState(Pose(st.pose.rotation, es * st.pose.translation),
                                   velocities[k], bias, st.timestamp)
    outs = []
    for i, j, delta in graph.inertial_edges:
        outs.append((i, j, inertial_residual(delta, states[i], states[j], gravity)))
    cost = sum(float((o.residual ** 2).sum()) for _, _, o in outs)
    return cost, outs, states


def init_inertial_only(graph: FrameGraph,
                       cfg: InitConfig | None = None) -> InitResult:
    """Stage 2: metric unknowns with the vision poses frozen.

    Gauss-Newton with Levenberg damping over x = [log-scale, gravity (2),
    shared bias (6), velocities (3 per keyframe)]. Positions enter as
    exp(s) * p_vision; rotations and the vision geometry stay fixed.
    """
    cfg = cfg if cfg is not None else InitConfig()
    n = len(graph.keyframes)
    if n < 2 or not graph.inertial_edges:
        raise ValueError("need at least two keyframes with inertial edges")
    index = {kf.kid: k for k, kf in enumerate(graph.keyframes)}

    s = 0.0
    gravity = graph.gravity.copy()
    bias = graph.keyframes[0].state.bias.copy()
    velocities = _fd_velocities(graph)

    dim = 9 + 3 * n
    lam = cfg.damping
    cost, outs, _ = _inertial_only_cost(graph, s, gravity, bias, velocities)
    trajectory = [cost]
    termination = "max_iterations"
    iterations = 0

    for _ in range(cfg.max_iterations_inertial):
        es = float(np.exp(s))
        H = np.zeros((dim, dim))
        g_vec = np.zeros(dim)
        for i, j, out in outs:
            ki, kj = index[i], index[j]
            p_i = graph.kf(i).state.pose.translation
            p_j = graph.kf(j).state.pose.translation
            J = np.zeros((15, dim))
            J[:, 0] = out.J_i[:, 3:6] @ (es * p_i) + out.J_j[:, 3:6] @ (es * p_j)
            J[:, 1:3] = out.J_gravity @ GRAVITY_TANGENT_BASIS
            J[:, 3:9] = out.J_i[:, 9:15] + out.J_j[:, 9:15]
            J[:, 9 + 3 * ki: 12 + 3 * ki] = out.J_i[:, 6:9]
            J[:, 9 + 3 * kj: 12 + 3 * kj] = out.J_j[:, 6:9]
            H += J.T @ J
            g_vec += J.T @ out.residual

        accepted = False
        while lam <= 1e8:
            H_damped = H + np.diag(np.diag(H)) * lam + 1e-10 * np.eye(dim)
            try:
                dx = np.linalg.solve(H_damped, -g_vec)
            except np.linalg.LinAlgError:
                break
            s_new = s + float(dx[0])
            gravity_new = gravity.retract(GRAVITY_TANGENT_BASIS @ dx[1:3])
            bias_new = BiasState(bias.gyro_bias + dx[3:6],
                                 bias.accel_bias + dx[6:9])
            vel_new = velocities + dx[9:].reshape(n, 3)
            cost_new, outs_new, _ = _inertial_only_cost(
                graph, s_new, gravity_new, bias_new, vel_new)
            if cost_new < cost:
                rel = (cost - cost_new) / max(cost, 1e-30)
                s, gravity, bias, velocities = s_new, gravity_new, bias_new, vel_new
                cost, outs = cost_new, outs_new
                trajectory.append(cost)
                lam = max(lam * 0.5, 1e-12)
                accepted = True
                iterations += 1
                if rel < 1e-10:
                    termination = "converged"
                break
            lam *= 10.0
        if not accepted:
            termination = "no_decrease_at_max_damping"
            break
        if termination == "converged":
            break

    report = SolveReport(iterations=iterations, initial_cost=trajectory[0],
                         final_cost=cost, cost_trajectory=trajectory,
                         termination=termination, condition_warnings=[])
    return InitResult(gravity=gravity, log_scale=s, velocities=velocities,
                      bias=bias, reports={"inertial": report})


def apply_initialization(graph: FrameGraph, result: InitResult) -> None:
    """Write a stage-2 solution into the window in place.

    Positions scale by exp(s) and disparities by exp(-s), which leaves every
    vision residual unchanged; velocities, biases, and the gravity model are
    replaced.
    """
    es = result.scale()
    for k, kf in enumerate(graph.keyframes):
        st = kf.state
        kf.state = PoseState(Pose(st.pose.rotation, es * st.pose.translation),
                             result.velocities[k].copy(), result.bias.copy(),
                             st.timestamp)
        kf.disparities = kf.disparities / es
    graph.gravity = result.gravity.copy()


def init_joint(graph: FrameGraph, cfg: InitConfig | None = None) -> SolveReport:
    """Stage 3: full visual-inertial solve with free gravity direction."""
    cfg = cfg if cfg is not None else InitConfig()
    if not graph.keyframes:
        raise ValueError("cannot initialize an empty window")
    opts = SolveOptions(max_iterations=cfg.max_iterations_joint,
                        damping=cfg.damping,
                        frozen_keyframes=(graph.keyframes[0].kid,),
                        optimize_gravity=True)
    return solve_vi_ba(graph, opts)


def run_full_initialization(graph: FrameGraph,
                            cfg: InitConfig | None = None) -> InitResult:
    """All three stages in sequence, mutating the window to the result."""
    cfg = cfg if cfg is not None else InitConfig()
    vision_report = init_vision(graph, cfg)

    fd_vel = _fd_velocities(graph)
    seed_states = [PoseState(kf.state.pose, fd_vel[k], kf.state.bias,
                             kf.state.timestamp)
                   for k, kf in enumerate(graph.keyframes)]
    deltas = [delta for _, _, delta in graph.inertial_edges]
    graph.gravity = align_gravity(seed_states, deltas,
                                  magnitude=graph.gravity.magnitude)

    result = init_inertial_only(graph, cfg)
    apply_initialization(graph, result)
    joint_report = init_joint(graph, cfg)

    result.gravity = graph.gravity.copy()
    result.velocities = np.stack([kf.state.velocity for kf in graph.keyframes])
    result.bias = graph.keyframes[-1].state.bias.copy()
    result.reports["vision"] = vision_report
    result.reports["joint"] = joint_report
    return result
