"""Keyframe tracking loop.

Flow-gated keyframe selection, inertial pose propagation with a covariance
fallback, and sliding-window frame-graph upkeep. The tracker owns a
FrameGraph and drives the staged initializer as the window fills; evicted
keyframes leave behind a relative Sim(3) chain edge and an archived pose for
the global pose graph.

Correspondences come from a provider object with the interface
edge(frame_i, frame_j) -> VisionEdge, grid_pixels(), depth_hint(frame, px),
intrinsics(). Edges must keep the full pixel grid (dead rows weight zero) so
every edge row aligns with the source keyframe's disparity list.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluation import Trajectory
from .geometry import Pose, Rotation, SimTransform
from .imu import (
    BiasState,
    ImuNoiseModel,
    ImuSample,
    PreintegratedDelta,
    preintegrate,
)
from .initialization import InitConfig, init_vision, run_full_initialization
from .residuals import (
    GravityModel,
    Intrinsics,
    PoseState,
    RelativePoseEdge,
    VisionEdge,
)
from .solver import FrameGraph, Keyframe, SolveOptions, SolveReport, solve_vi_ba

PHASE_VISION = "vision"
PHASE_INERTIAL = "inertial"
PHASE_FULL = "full"
PHASES = (PHASE_VISION, PHASE_INERTIAL, PHASE_FULL)

MAX_IMU_GAP_PERIODS = 5.0


@dataclass
class KeyframePolicy:
    """Keyframe gating thresholds and window bookkeeping.

    flow_threshold and the loop gates elsewhere are coarse-grid pixels: raw
    image-space flow is divided by flow_scale before any comparison.
    """

    flow_threshold: float = 2.4          # coarse-grid pixels
    max_interval: float = 3.0            # seconds without a keyframe
    cov_trace_threshold: float = 1e-4    # propagation fallback gate
    window_size: int = 12
    covis_radius: int = 3                # nearest neighbors wired per insertion
    flow_scale: float = 8.0

    def __post_init__(self):
        for name in ("flow_threshold", "max_interval",
                     "cov_trace_threshold", "flow_scale"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        if self.covis_radius < 1:
            raise ValueError("covis_radius must be at least 1")


def keyframe_decision(mean_flow: float, dt_since_last: float,
                      policy: KeyframePolicy) -> bool:
    """True when a frame should become a keyframe.

    Fires on image motion against the last keyframe or on too much elapsed
    time without one, whichever comes first.
    """
    if mean_flow < 0.0 or dt_since_last < 0.0:
        raise ValueError("flow and elapsed time must be non-negative")
    return mean_flow > policy.flow_threshold \
        or dt_since_last >= policy.max_interval


def flow_magnitude(edge: VisionEdge, flow_scale: float = 8.0) -> float:
    """Mean correspondence displacement in coarse-grid pixels.

    Zero-weight rows are placeholders for pixels without a valid match and
    are excluded; an edge with no live rows reads as infinite flow.
    """
    live = edge.weights[:, 0] > 0.0
    if not np.any(live):
        return float("inf")
    disp = edge.targets[live] - edge.pixels[live]
    return float(np.mean(np.linalg.norm(disp, axis=1)) / flow_scale)


def propagate_keyframe_state(prev: PoseState, delta: PreintegratedDelta,
                             gravity: GravityModel,
                             policy: KeyframePolicy) -> PoseState:
    """Seed the next keyframe state from the preintegrated interval.

    Velocity and bias always carry over (velocity through the delta); the
    pose is propagated only while the preintegration covariance trace stays
    below the policy threshold, otherwise the previous pose is kept and the
    vision solve must pull the keyframe into place.
    """
    dt = delta.dt_total
    g = gravity.vector()
    R_i = prev.pose.rotation
    velocity = prev.velocity + g * dt + R_i.apply(delta.delta_v)
    if float(np.trace(delta.covariance)) <= policy.cov_trace_threshold:
        pose = Pose(R_i * delta.delta_R,
                    prev.pose.translation + prev.velocity * dt
                    + 0.5 * dt * dt * g + R_i.apply(delta.delta_p))
    else:
        pose = prev.pose.copy()
    return PoseState(pose, velocity, prev.bias.copy(), prev.timestamp + dt)


@dataclass
class FramePayload:
    """One camera frame offered to the tracker."""
    frame_index: int
    timestamp: float


@dataclass
class ArchivedKeyframe:
    """Pose snapshot exported when a keyframe leaves the local window."""
    kid: int
    frame_index: int
    timestamp: float
    pose: Pose


def _capped_inverse(block: np.ndarray, lo: float = 1e-3,
                    hi: float = 1e8) -> np.ndarray:
    """Inverse of a PSD block with eigenvalues clamped into [lo, hi]."""
    vals, vecs = np.linalg.eigh(0.5 * (block + block.T))
    inv_vals = np.clip(1.0 / np.maximum(vals, 1e-12), lo, hi)
    out = vecs @ (inv_vals[:, None] * vecs.T)
    return 0.5 * (out + out.T)


def eviction_edge(kid_i: int, kid_j: int, state_i: PoseState,
                  state_j: PoseState, delta: PreintegratedDelta,
                  scale_weight: float = 100.0) -> RelativePoseEdge:
    """Sim(3) chain constraint left behind by an evicted keyframe.

    The measurement is the current relative pose at unit scale. Rotation and
    translation information blocks come from the inverted preintegration
    covariance (floored and capped so whitening never goes singular); the
    scale slot gets a fixed moderate weight since no sensor measures it.
    """
    S_i = SimTransform.from_pose(state_i.pose)
    S_j = SimTransform.from_pose(state_j.pose)
    info = np.zeros((7, 7))
    info[0:3, 0:3] = _capped_inverse(delta.covariance[0:3, 0:3])
    info[3:6, 3:6] = _capped_inverse(delta.covariance[3:6, 3:6])
    info[6, 6] = scale_weight
    return RelativePoseEdge(kid_i, kid_j, S_j * S_i.inverse(), info)


@dataclass
class TrackerState:
    """Everything the tracking loop mutates.

    The provider is attached at construction and never serialized; resuming
    from a dict needs the same provider handed back in.
    """

    provider: object
    policy: KeyframePolicy
    init_cfg: InitConfig
    noise: ImuNoiseModel
    graph: FrameGraph
    phase: str = PHASE_VISION
    last_keyframe_time: float | None = None
    imu_buffer: list = field(default_factory=list)
    next_kid: int = 0
    frame_of: dict = field(default_factory=dict)      # kid -> provider frame
    archive: list = field(default_factory=list)       # ArchivedKeyframe
    exported_edges: list = field(default_factory=list)  # RelativePoseEdge
    pinned: set = field(default_factory=set)          # kids immune to eviction
    degraded: list = field(default_factory=list)      # inertial-only kids
    init_reports: dict = field(default_factory=dict)
    solve_iterations: int = 4
    imu_period: float = 0.005

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    def buffer_imu(self, sample: ImuSample) -> None:
        """Append one IMU sample, rejecting disorder and coverage gaps."""
        if self.imu_buffer:
            gap = sample.timestamp - self.imu_buffer[-1].timestamp
            if gap <= 0.0:
                raise ValueError("IMU samples must arrive in time order")
            if gap > MAX_IMU_GAP_PERIODS * self.imu_period:
                raise ValueError(
                    f"IMU gap of {gap:.4f}s exceeds "
                    f"{MAX_IMU_GAP_PERIODS:g} sample periods")
        self.imu_buffer.append(sample)

    def to_dict(self) -> dict:
        g = self.graph
        return {
            "policy": asdict(self.policy),
            "init_cfg": asdict(self.init_cfg),
            "noise": asdict(self.noise),
            "phase": self.phase,
            "last_keyframe_time": self.last_keyframe_time,
            "imu_buffer": [[s.timestamp, *s.gyro.tolist(), *s.accel.tolist()]
                           for s in self.imu_buffer],
            "next_kid": self.next_kid,
            "frame_of": {str(k): v for k, v in self.frame_of.items()},
            "archive": [{"kid": a.kid, "frame_index": a.frame_index,
                         "timestamp": a.timestamp, "pose": _pose_dict(a.pose)}
                        for a in self.archive],
            "exported_edges": [_rel_edge_dict(e) for e in self.exported_edges],
            "pinned": sorted(self.pinned),
            "degraded": list(self.degraded),
            "init_reports": self.init_reports,
            "solve_iterations": self.solve_iterations,
            "imu_period": self.imu_period,
            "graph": {
                "gravity": {"q": g.gravity.R_wg.q.tolist(),
                            "magnitude": g.gravity.magnitude},
                "intrinsics": asdict(g.intrinsics),
                "T_cb": None if g.T_cb is None else _pose_dict(g.T_cb),
                "keyframes": [{
                    "kid": kf.kid,
                    "state": _state_dict(kf.state),
                    "pixels": kf.pixels.tolist(),
                    "disparities": kf.disparities.tolist(),
                } for kf in g.keyframes],
                "vision_edges": [{
                    "i": e.i, "j": e.j,
                    "pixels": e.pixels.tolist(),
                    "targets": e.targets.tolist(),
                    "weights": e.weights.tolist(),
                } for e in g.vision_edges],
                "inertial_edges": [[i, j, _delta_dict(d)]
                                   for i, j, d in g.inertial_edges],
            },
        }

    @staticmethod
    def from_dict(data: dict, provider) -> "TrackerState":
        gd = data["graph"]
        gravity = GravityModel(_rotation_exact(gd["gravity"]["q"]),
                               gd["gravity"]["magnitude"])
        graph = FrameGraph(
            keyframes=[Keyframe(k["kid"], _state_from(k["state"]),
                                np.array(k["pixels"]),
                                np.array(k["disparities"]))
                       for k in gd["keyframes"]],
            vision_edges=[VisionEdge(e["i"], e["j"], np.array(e["pixels"]),
                                     np.array(e["targets"]),
                                     np.array(e["weights"]))
                          for e in gd["vision_edges"]],
            inertial_edges=[(i, j, _delta_from(d))
                            for i, j, d in gd["inertial_edges"]],
            gravity=gravity,
            intrinsics=Intrinsics(**gd["intrinsics"]),
            T_cb=None if gd["T_cb"] is None else _pose_from(gd["T_cb"]),
        )
        tracker = TrackerState(
            provider=provider,
            policy=KeyframePolicy(**data["policy"]),
            init_cfg=InitConfig(**data["init_cfg"]),
            noise=ImuNoiseModel(**data["noise"]),
            graph=graph,
            phase=data["phase"],
            last_keyframe_time=data["last_keyframe_time"],
            imu_buffer=[ImuSample(row[0], row[1:4], row[4:7])
                        for row in data["imu_buffer"]],
            next_kid=data["next_kid"],
            frame_of={int(k): v for k, v in data["frame_of"].items()},
            archive=[ArchivedKeyframe(a["kid"], a["frame_index"],
                                      a["timestamp"], _pose_from(a["pose"]))
                     for a in data["archive"]],
            exported_edges=[_rel_edge_from(e) for e in data["exported_edges"]],
            pinned=set(data["pinned"]),
            degraded=list(data["degraded"]),
            init_reports=data["init_reports"],
            solve_iterations=data["solve_iterations"],
            imu_period=data["imu_period"],
        )
        return tracker


def make_tracker(provider, policy: KeyframePolicy | None = None,
                 init_cfg: InitConfig | None = None,
                 noise: ImuNoiseModel | None = None,
                 imu_period: float = 0.005,
                 gravity: GravityModel | None = None) -> TrackerState:
    """Fresh tracker with an empty window in the provider's camera model."""
    policy = policy if policy is not None else KeyframePolicy()
    init_cfg = init_cfg if init_cfg is not None else InitConfig()
    noise = noise if noise is not None else ImuNoiseModel()
    if gravity is None:
        gravity = GravityModel(magnitude=noise.gravity_magnitude)
    graph = FrameGraph([], [], [], gravity, provider.intrinsics())
    return TrackerState(provider, policy, init_cfg, noise, graph,
                        imu_period=imu_period)


def process_frame(tracker: TrackerState, frame_index: int, timestamp: float,
                  imu_samples=()) -> bool:
    """Feed one camera frame plus its IMU slice; True if it keyframed.

    Boundary IMU samples already buffered are skipped silently so callers
    can pass inclusive per-frame slices.
    """
    for s in imu_samples:
        if tracker.imu_buffer \
                and s.timestamp <= tracker.imu_buffer[-1].timestamp + 1e-12:
            continue
        tracker.buffer_imu(s)
    if not tracker.graph.keyframes:
        add_keyframe(tracker, FramePayload(frame_index, timestamp))
        return True
    last_kid = tracker.graph.keyframes[-1].kid
    try:
        probe = tracker.provider.edge(tracker.frame_of[last_kid], frame_index)
        flow = flow_magnitude(probe, tracker.policy.flow_scale)
    except ValueError:
        flow = float("inf")
    if keyframe_decision(flow, timestamp - tracker.last_keyframe_time,
                         tracker.policy):
        add_keyframe(tracker, FramePayload(frame_index, timestamp))
        return True
    return False


def add_keyframe(tracker: TrackerState, frame: FramePayload) -> TrackerState:
    """Insert one keyframe and run the window solve; mutates the tracker.

    Preintegrates the buffered IMU into an edge to the previous keyframe,
    seeds the new state (inertial propagation once initialized, previous
    pose before that), wires correspondence edges to the nearest window
    neighbors in both directions, fires the staged initializer at the
    configured keyframe counts, then solves and evicts down to the window
    size. A correspondence provider failure degrades the keyframe to
    inertial-only instead of raising.
    """
    graph = tracker.graph
    provider = tracker.provider
    kid = tracker.next_kid

    pixels = provider.grid_pixels()
    depth = np.asarray(provider.depth_hint(frame.frame_index, pixels),
                       dtype=float).reshape(-1)
    good = np.isfinite(depth) & (depth > 1e-3)
    disparities = np.where(good, 1.0 / np.where(good, depth, 1.0), 1.0)

    delta = None
    if graph.keyframes:
        last = graph.keyframes[-1]
        chunk = [s for s in tracker.imu_buffer
                 if last.state.timestamp - 1e-9 <= s.timestamp
                 <= frame.timestamp + 1e-9]
        if len(chunk) < 2:
            raise ValueError("IMU buffer does not cover the keyframe interval")
        delta = preintegrate(chunk, last.state.bias, tracker.noise)
        if tracker.phase == PHASE_FULL:
            prop = propagate_keyframe_state(last.state, delta, graph.gravity,
                                            tracker.policy)
            state = PoseState(prop.pose, prop.velocity, prop.bias,
                              frame.timestamp)
        else:
            state = PoseState(last.state.pose.copy(),
                              last.state.velocity.copy(),
                              last.state.bias.copy(), frame.timestamp)
    else:
        state = PoseState(Pose.identity(), np.zeros(3), BiasState(),
                          frame.timestamp)

    new_kf = Keyframe(kid, state, pixels, disparities)

    vision_edges = list(graph.vision_edges)
    wired = 0
    for neighbor in graph.keyframes[-tracker.policy.covis_radius:]:
        n_frame = tracker.frame_of[neighbor.kid]
        try:
            e_out = provider.edge(frame.frame_index, n_frame)
            e_in = provider.edge(n_frame, frame.frame_index)
        except ValueError:
            continue
        vision_edges.append(VisionEdge(kid, neighbor.kid, e_out.pixels,
                                       e_out.targets, e_out.weights))
        vision_edges.append(VisionEdge(neighbor.kid, kid, e_in.pixels,
                                       e_in.targets, e_in.weights))
        wired += 1
    if graph.keyframes and wired == 0:
        tracker.degraded.append(kid)

    inertial_edges = list(graph.inertial_edges)
    if delta is not None:
        inertial_edges.append((graph.keyframes[-1].kid, kid, delta))

    tracker.graph = FrameGraph(graph.keyframes + [new_kf], vision_edges,
                               inertial_edges, graph.gravity,
                               graph.intrinsics, graph.T_cb)
    tracker.frame_of[kid] = frame.frame_index
    tracker.next_kid = kid + 1
    tracker.last_keyframe_time = frame.timestamp
    tracker.imu_buffer = [s for s in tracker.imu_buffer
                          if s.timestamp >= frame.timestamp - 1e-9]

    n = len(tracker.graph.keyframes)
    if tracker.phase == PHASE_VISION and n >= tracker.init_cfg.n_vis_init:
        report = init_vision(tracker.graph, tracker.init_cfg)
        tracker.init_reports["vision"] = _report_dict(report)
        tracker.phase = PHASE_INERTIAL
    elif tracker.phase == PHASE_INERTIAL and n >= tracker.init_cfg.n_iner_init:
        result = run_full_initialization(tracker.graph, tracker.init_cfg)
        tracker.init_reports.update(
            {k: _report_dict(r) for k, r in result.reports.items()})
        tracker.init_reports["log_scale"] = float(result.log_scale)
        tracker.phase = PHASE_FULL
    else:
        _tracking_solve(tracker)

    if tracker.phase == PHASE_FULL:
        _evict(tracker)
    return tracker


def _tracking_solve(tracker: TrackerState) -> SolveReport | None:
    """Per-insertion window refinement; vision-only until initialized."""
    graph = tracker.graph
    if len(graph.keyframes) < 2 or not graph.vision_edges:
        return None
    frozen = (graph.keyframes[0].kid,)
    if tracker.phase == PHASE_FULL:
        opts = SolveOptions(max_iterations=tracker.solve_iterations,
                            frozen_keyframes=frozen)
        return solve_vi_ba(graph, opts)
    shadow = FrameGraph(graph.keyframes, graph.vision_edges, [],
                        graph.gravity, graph.intrinsics, graph.T_cb)
    opts = SolveOptions(max_iterations=tracker.solve_iterations,
                        frozen_keyframes=frozen,
                        optimize_velocity_bias=False)
    return solve_vi_ba(shadow, opts)


def _evict(tracker: TrackerState) -> None:
    """Shrink the window to size, exporting each evicted keyframe.

    The oldest keyframe leaves first; pinned keyframes (pending loop edge
    endpoints) block eviction entirely until released, since removing a
    mid-chain keyframe would break the consecutive inertial cover.
    """
    graph = tracker.graph
    keyframes = list(graph.keyframes)
    vision_edges = list(graph.vision_edges)
    inertial_edges = list(graph.inertial_edges)
    changed = False
    while len(keyframes) > tracker.policy.window_size \
            and keyframes[0].kid not in tracker.pinned:
        old, succ = keyframes[0], keyframes[1]
        delta = next(d for i, j, d in inertial_edges
                     if i == old.kid and j == succ.kid)
        tracker.exported_edges.append(
            eviction_edge(old.kid, succ.kid, old.state, succ.state, delta))
        tracker.archive.append(
            ArchivedKeyframe(old.kid, tracker.frame_of[old.kid],
                             old.state.timestamp, old.state.pose.copy()))
        keyframes.pop(0)
        vision_edges = [e for e in vision_edges
                        if e.i != old.kid and e.j != old.kid]
        inertial_edges = [t for t in inertial_edges if t[0] != old.kid]
        changed = True
    if changed:
        tracker.graph = FrameGraph(keyframes, vision_edges, inertial_edges,
                                   graph.gravity, graph.intrinsics, graph.T_cb)


def estimated_trajectory(tracker: TrackerState) -> Trajectory:
    """Archived keyframe poses followed by the live window, in time order."""
    stamps, poses = [], []
    for a in tracker.archive:
        stamps.append(a.timestamp)
        poses.append(a.pose)
    for kf in tracker.graph.keyframes:
        stamps.append(kf.state.timestamp)
        poses.append(kf.state.pose)
    return Trajectory(np.asarray(stamps, dtype=float), poses)


def window_snapshot(tracker: TrackerState):
    """Provisional pose-graph view of the live window.

    Returns (nodes, chain): nodes as (kid, SimTransform, timestamp) triples at
    unit scale, chain as relative edges over the window's consecutive inertial
    pairs, both built fresh from the current estimates.
    """
    keyframes = tracker.graph.keyframes
    nodes = [(kf.kid, SimTransform.from_pose(kf.state.pose),
              kf.state.timestamp) for kf in keyframes]
    by_kid = {kf.kid: kf for kf in keyframes}
    chain = [eviction_edge(i, j, by_kid[i].state, by_kid[j].state, delta)
             for i, j, delta in tracker.graph.inertial_edges]
    return nodes, chain


def _entry_unchanged(entry) -> bool:
    return (entry.scale_change == 1.0
            and np.array_equal(entry.old_pose.rotation.q,
                               entry.new_pose.rotation.q)
            and np.array_equal(entry.old_pose.translation,
                               entry.new_pose.translation))


def apply_correction(tracker: TrackerState, correction) -> int:
    """Fold a pose-graph correction into the window and the archive.

    Window keyframes are rewarped by their entry's similarity delta: pose
    composed, world velocity rotated and scaled, and the scale change folded
    into the disparities so the window stays metric at unit scale. Archived
    poses are rewarped in place. Entries whose pose and scale did not move
    are skipped so untouched keyframes stay bit-identical. Returns the
    number of keyframes updated.
    """
    applied = 0
    for kf in tracker.graph.keyframes:
        entry = correction.entries.get(kf.kid)
        if entry is None or _entry_unchanged(entry):
            continue
        delta = entry.delta()
        state = kf.state
        warped = delta * SimTransform.from_pose(state.pose)
        state.pose = warped.pose()
        state.velocity = delta.scale * delta.rotation.apply(state.velocity)
        kf.disparities = kf.disparities / warped.scale
        applied += 1
    for row in tracker.archive:
        entry = correction.entries.get(row.kid)
        if entry is None or _entry_unchanged(entry):
            continue
        row.pose = (entry.delta() * SimTransform.from_pose(row.pose)).pose()
        applied += 1
    return applied


def _report_dict(report: SolveReport) -> dict:
    return {
        "iterations": report.iterations,
        "initial_cost": report.initial_cost,
        "final_cost": report.final_cost,
        "termination": report.termination,
    }


def _pose_dict(p: Pose) -> dict:
    return {"q": p.rotation.q.tolist(), "t": p.translation.tolist()}


def _rotation_exact(q) -> Rotation:
    """Restore a serialized unit quaternion bit-exactly.

    The constructor renormalizes, which can move the last ulp; resuming
    from a checkpoint must restore exactly the value that was saved.
    """
    r = Rotation.identity()
    r.q = np.asarray(q, dtype=float).reshape(4)
    return r


def _pose_from(d: dict) -> Pose:
    return Pose(_rotation_exact(d["q"]), np.array(d["t"]))


def _state_dict(s: PoseState) -> dict:
    return {
        "pose": _pose_dict(s.pose),
        "velocity": s.velocity.tolist(),
        "gyro_bias": s.bias.gyro_bias.tolist(),
        "accel_bias": s.bias.accel_bias.tolist(),
        "timestamp": s.timestamp,
    }


def _state_from(d: dict) -> PoseState:
    return PoseState(_pose_from(d["pose"]), np.array(d["velocity"]),
                     BiasState(np.array(d["gyro_bias"]),
                               np.array(d["accel_bias"])),
                     d["timestamp"])


def _delta_dict(d: PreintegratedDelta) -> dict:
    return {
        "dt_total": d.dt_total,
        "q": d.delta_R.q.tolist(),
        "delta_p": d.delta_p.tolist(),
        "delta_v": d.delta_v.tolist(),
        "J_rot": d.J_rot.tolist(),
        "J_pos": d.J_pos.tolist(),
        "J_vel": d.J_vel.tolist(),
        "covariance": d.covariance.tolist(),
        "gyro_bias": d.bias_lin_point.gyro_bias.tolist(),
        "accel_bias": d.bias_lin_point.accel_bias.tolist(),
    }


def _delta_from(d: dict) -> PreintegratedDelta:
    return PreintegratedDelta(
        dt_total=d["dt_total"],
        delta_R=_rotation_exact(d["q"]),
        delta_p=np.array(d["delta_p"]),
        delta_v=np.array(d["delta_v"]),
        J_rot=np.array(d["J_rot"]),
        J_pos=np.array(d["J_pos"]),
        J_vel=np.array(d["J_vel"]),
        covariance=np.array(d["covariance"]),
        bias_lin_point=BiasState(np.array(d["gyro_bias"]),
                                 np.array(d["accel_bias"])),
    )


def _rel_edge_dict(e: RelativePoseEdge) -> dict:
    return {
        "i": e.i, "j": e.j,
        "q": e.measurement.rotation.q.tolist(),
        "t": e.measurement.translation.tolist(),
        "s": e.measurement.scale,
        "information": e.information.tolist(),
    }


def _rel_edge_from(d: dict) -> RelativePoseEdge:
    meas = SimTransform(_rotation_exact(d["q"]), np.array(d["t"]), d["s"])
    return RelativePoseEdge(d["i"], d["j"], meas, np.array(d["information"]))
