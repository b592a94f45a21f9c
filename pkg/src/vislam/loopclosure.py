"""Loop detection and similarity pose-graph refinement.

Loop candidates are keyframe pairs gated on keyframe-count gap, provider flow,
and relative orientation. The pose graph keeps one Sim(3) state per keyframe,
the sequential relative-pose chain exported by the tracking frontend, and loop
edges that carry dense pixel correspondences plus a derived relative-pose
constraint. solve_pgba refines all states (and loop-source disparities) by
damped Gauss-Newton with the earliest keyframe frozen as gauge, then reports
per-keyframe pose and scale changes for trajectory and map updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation, SimTransform
from .residuals import (
    Intrinsics,
    RelativePoseEdge,
    VisionEdge,
    backproject,
    relative_pose_residual,
)
from .solver import DISPARITY_FLOOR, SolveOptions, SolveReport, _solve_step

SIM3_DOF = 7


@dataclass
class LoopPolicy:
    """Gates a (new keyframe, old keyframe) pair must pass to become a loop."""

    min_gap: int = 55            # keyframes apart, at least
    flow_gate: float = 22.0      # coarse pixels, strictly below
    ang_gate_deg: float = 120.0  # relative orientation angle, strictly below

    def __post_init__(self):
        if self.min_gap <= 0:
            raise ValueError("min_gap must be positive")
        if self.flow_gate <= 0 or self.ang_gate_deg <= 0:
            raise ValueError("flow and orientation gates must be positive")


@dataclass
class KeyframeSummary:
    """Per-keyframe message from the tracker to the loop worker.

    flows maps earlier keyframe ids to the provider's mean flow magnitude in
    coarse pixels. The pixel/disparity snapshot lets the keyframe source loop
    vision edges after it has left the tracking window.
    """

    kid: int
    frame_index: int
    pose: Pose
    flows: dict = field(default_factory=dict)
    pixels: np.ndarray | None = None
    disparities: np.ndarray | None = None
    timestamp: float = 0.0

    @property
    def rotation(self) -> Rotation:
        return self.pose.rotation


def detect_loops(new_kf: KeyframeSummary, history,
                 policy: LoopPolicy | None = None) -> list:
    """Candidate loop pairs (old kid, new kid), ordered by ascending flow.

    A pair qualifies only when the keyframes are at least min_gap apart, the
    flow between them falls below flow_gate, and the relative orientation
    angle is below ang_gate_deg. A missing flow entry counts as infinite.
    """
    if policy is None:
        policy = LoopPolicy()
    passing = []
    for old in history:
        if new_kf.kid - old.kid < policy.min_gap:
            continue
        flow = new_kf.flows.get(old.kid, math.inf)
        if not flow < policy.flow_gate:
            continue
        rel = old.rotation.inverse() * new_kf.rotation
        if not math.degrees(np.linalg.norm(rel.log())) < policy.ang_gate_deg:
            continue
        passing.append((flow, old.kid))
    passing.sort()
    return [(i, new_kf.kid) for _, i in passing]


@dataclass
class LoopEdge:
    """One detected loop between keyframes i < j.

    The relative part is the two-view alignment of the pair (measurement plus
    information) and acts as the lightweight fallback constraint; when the
    dense correspondence edge is attached, it supplies the solve's vision rows
    instead and the relative part is kept as the alignment record.
    """

    i: int
    j: int
    relative: RelativePoseEdge
    vision: VisionEdge | None = None

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError("loop endpoints must satisfy i < j")
        if (self.relative.i, self.relative.j) != (self.i, self.j):
            raise ValueError("relative edge endpoints must match the loop pair")
        if self.vision is not None and (self.vision.i, self.vision.j) != (self.i, self.j):
            raise ValueError("vision edge endpoints must match the loop pair")


@dataclass
class PoseGraphNode:
    kid: int
    state: SimTransform
    pixels: np.ndarray | None = None
    disparities: np.ndarray | None = None
    timestamp: float = 0.0


@dataclass
class PoseGraph:
    """Sim(3) keyframe states, the sequential chain, and the loop edge set."""

    nodes: list
    chain: list                      # RelativePoseEdge over consecutive kids
    loops: list                      # LoopEdge
    intrinsics: Intrinsics | None = None
    T_cb: Pose | None = None
    min_loop_gap: int = 55

    def __post_init__(self):
        self.nodes = sorted(self.nodes, key=lambda n: n.kid)
        kids = [n.kid for n in self.nodes]
        if len(set(kids)) != len(kids):
            raise ValueError("duplicate pose graph node ids")
        self._index = {kid: n for n, kid in enumerate(kids)}
        consecutive = {(kids[n], kids[n + 1]) for n in range(len(kids) - 1)}
        covered = {(e.i, e.j) for e in self.chain}
        if self.chain and covered != consecutive:
            raise ValueError("chain must cover exactly the consecutive keyframe pairs")
        for loop in self.loops:
            if loop.i not in self._index or loop.j not in self._index:
                raise ValueError(f"loop edge ({loop.i},{loop.j}) references unknown keyframe")
            if loop.j - loop.i < self.min_loop_gap:
                raise ValueError(f"loop edge ({loop.i},{loop.j}) violates the keyframe gap gate")
            if loop.vision is not None:
                if self.intrinsics is None:
                    raise ValueError("vision loop edges need intrinsics")
                src = self.node(loop.i)
                if src.pixels is None or src.disparities is None:
                    raise ValueError(f"keyframe {loop.i} has no pixel snapshot for its loop edge")
                if len(src.disparities) != len(loop.vision.pixels):
                    raise ValueError("loop vision rows must align with the source pixel snapshot")

    def node(self, kid: int) -> PoseGraphNode:
        return self.nodes[self._index[kid]]

    def index_of(self, kid: int) -> int:
        return self._index[kid]


@dataclass
class CorrectionEntry:
    """Pose and scale change of one keyframe across a pose-graph solve."""

    kid: int
    old_pose: Pose
    new_pose: Pose
    scale_change: float = 1.0

    def __post_init__(self):
        self.scale_change = float(self.scale_change)
        if not self.scale_change > 0.0:
            raise ValueError("scale change must be positive")

    def delta(self) -> SimTransform:
        """World-frame warp that maps the old pose onto the new one."""
        new = SimTransform(Rotation(self.new_pose.rotation.q.copy()),
                           self.new_pose.translation.copy(), self.scale_change)
        return new * SimTransform.from_pose(self.old_pose).inverse()


@dataclass
class LoopCorrection:
    entries: dict                    # kid -> CorrectionEntry
    timestamp: float = 0.0

    def __post_init__(self):
        for kid, e in self.entries.items():
            if e.kid != kid:
                raise ValueError("correction entry keyed under the wrong keyframe id")


@dataclass
class Sim3VisionResult:
    residual: np.ndarray      # (N, 2) weighted
    J_i: np.ndarray           # (N, 2, 7), tangent (rotation, translation, log-scale)
    J_j: np.ndarray           # (N, 2, 7)
    J_disparity: np.ndarray   # (N, 2)
    behind_camera: int
    valid: np.ndarray

    def flat(self) -> np.ndarray:
        return self.residual.reshape(-1)


def _hat_rows(v: np.ndarray) -> np.ndarray:
    H = np.zeros((v.shape[0], 3, 3))
    H[:, 0, 1] = -v[:, 2]
    H[:, 0, 2] = v[:, 1]
    H[:, 1, 0] = v[:, 2]
    H[:, 1, 2] = -v[:, 0]
    H[:, 2, 0] = -v[:, 1]
    H[:, 2, 1] = v[:, 0]
    return H


def sim3_vision_residual(edge: VisionEdge, S_i: SimTransform, S_j: SimTransform,
                         d_i: np.ndarray, k: Intrinsics,
                         T_cb: Pose | None = None) -> Sim3VisionResult:
    """Reprojection residual of a vision edge under similarity keyframe states.

    Same measurement model as the rigid vision residual with the action
    s*R@x + t in place of the rigid one, so relative scale between the two
    keyframes enters the prediction. Jacobians are over right perturbations
    ordered (rotation, translation, log-scale). Rows are scaled by sqrt(w);
    points behind the target camera are zero-weighted and counted.
    """
    d_i = np.asarray(d_i, dtype=float).reshape(-1)
    if len(d_i) != len(edge.pixels):
        raise ValueError("disparity length must match edge pixel list")
    if np.any(d_i <= 0.0):
        raise ValueError("disparities must be strictly positive")

    T_bc = Pose.identity() if T_cb is None else T_cb.inverse()
    R_bc = T_bc.rotation.matrix()
    p_bc = T_bc.translation

    R_i = S_i.rotation.matrix()
    p_i, s_i = S_i.translation, S_i.scale
    R_j = S_j.rotation.matrix()
    p_j, s_j = S_j.translation, S_j.scale

    X_i = backproject(k, edge.pixels, d_i)        # camera i frame
    Y_i = X_i @ R_bc.T + p_bc                     # body i frame
    X_w = s_i * (Y_i @ R_i.T) + p_i               # world
    V_j = ((X_w - p_j) @ R_j) / s_j               # body j frame
    X_c = (V_j - p_bc) @ R_bc                     # camera j frame

    n = len(d_i)
    z = X_c[:, 2]
    valid = z > 1e-6
    n_behind = int(np.count_nonzero(~valid))
    z_safe = np.where(valid, z, 1.0)

    pred = np.stack([k.fx * X_c[:, 0] / z_safe + k.cx,
                     k.fy * X_c[:, 1] / z_safe + k.cy], axis=1)
    r = edge.targets - pred

    P = np.zeros((n, 2, 3))
    P[:, 0, 0] = k.fx / z_safe
    P[:, 0, 2] = -k.fx * X_c[:, 0] / z_safe ** 2
    P[:, 1, 1] = k.fy / z_safe
    P[:, 1, 2] = -k.fy * X_c[:, 1] / z_safe ** 2

    B = (R_bc.T @ R_j.T) / s_j                    # dX_c/dX_w
    BRi = B @ R_i

    dXc_dthi = np.einsum("ab,nbc->nac", -s_i * BRi, _hat_rows(Y_i))
    dXc_dpi = np.broadcast_to(s_i * BRi, (n, 3, 3))
    dXc_dsi = s_i * (Y_i @ BRi.T)                 # (N, 3)
    dXc_dthj = np.einsum("ab,nbc->nac", R_bc.T, _hat_rows(V_j))
    dXc_dpj = np.broadcast_to(-R_bc.T, (n, 3, 3))
    dXc_dsj = -(V_j @ R_bc)
    C = s_i * (BRi @ R_bc)                        # dX_c/dX_i
    dXc_dd = -np.einsum("ab,nb->na", C, X_i) / d_i[:, None]

    J_i = np.concatenate([
        -np.einsum("nab,nbc->nac", P, dXc_dthi),
        -np.einsum("nab,nbc->nac", P, dXc_dpi),
        -np.einsum("nab,nb->na", P, dXc_dsi)[:, :, None],
    ], axis=2)
    J_j = np.concatenate([
        -np.einsum("nab,nbc->nac", P, dXc_dthj),
        -np.einsum("nab,nbc->nac", P, dXc_dpj),
        -np.einsum("nab,nb->na", P, dXc_dsj)[:, :, None],
    ], axis=2)
    J_d = -np.einsum("nab,nb->na", P, dXc_dd)

    w = np.where(valid[:, None], edge.weights, 0.0)
    sw = np.sqrt(w)

    return Sim3VisionResult(
        residual=sw * r,
        J_i=sw[:, :, None] * J_i,
        J_j=sw[:, :, None] * J_j,
        J_disparity=sw * J_d,
        behind_camera=n_behind,
        valid=valid,
    )


def _floored_information(H: np.ndarray, lo: float = 1e-3,
                         hi: float = 1e8) -> np.ndarray:
    """Symmetric PSD projection of H with eigenvalues clamped into [lo, hi]."""
    vals, vecs = np.linalg.eigh(0.5 * (H + H.T))
    out = vecs @ (np.clip(vals, lo, hi)[:, None] * vecs.T)
    return 0.5 * (out + out.T)


def align_loop_pair(edge: VisionEdge, d_i: np.ndarray, S_i: SimTransform,
                    S_j: SimTransform, k: Intrinsics, T_cb: Pose | None = None,
                    iterations: int = 15) -> RelativePoseEdge:
    """Two-view similarity alignment of a loop pair from its correspondences.

    Holds S_i and the source disparities fixed, refines S_j by damped
    Gauss-Newton on the reprojection residual, and returns the relative-pose
    measurement S_j S_i^-1 with information from the Gauss-Newton Hessian at
    the optimum, transported to the relative-residual tangent and eigenvalue
    clamped so whitening stays well posed.
    """
    S = S_j.copy()

    def cost_of(state):
        out = sim3_vision_residual(edge, S_i, state, d_i, k, T_cb)
        return float((out.residual ** 2).sum()), out

    cost, out = cost_of(S)
    lam = 1e-6
    for _ in range(iterations):
        J = out.J_j.reshape(-1, SIM3_DOF)
        g = J.T @ out.flat()
        H = J.T @ J
        # floor the damping diagonal so near-null directions (the two-view
        # scale blind spot) stiffen with lam instead of letting the solve
        # step run off to unrepresentable states
        damp = np.maximum(np.diag(H), 1e-3 * max(1.0, float(np.max(np.diag(H)))))
        stepped = False
        while lam <= 1e8:
            Hd = H + np.diag(damp * lam)
            try:
                dx = np.linalg.solve(Hd, -g)
                trial = S.retract(dx)
                new_cost, new_out = cost_of(trial)
            except (np.linalg.LinAlgError, ValueError):
                lam *= 10.0
                continue
            if np.isfinite(new_cost) and new_cost < cost:
                S, cost, out = trial, new_cost, new_out
                lam = max(lam * 0.5, 1e-12)
                stepped = True
                break
            lam *= 10.0
        if not stepped or float(np.max(np.abs(dx))) < 1e-12:
            break

    J = out.J_j.reshape(-1, SIM3_DOF)
    H = J.T @ J
    A_inv = np.linalg.inv(S.adjoint())
    info = _floored_information(A_inv.T @ H @ A_inv)
    return RelativePoseEdge(edge.i, edge.j, S * S_i.inverse(), info)


def total_pg_energy(graph: PoseGraph) -> float:
    """Sum of whitened squared residuals over chain and loop edges."""
    e = 0.0
    for loop in graph.loops:
        S_i = graph.node(loop.i).state
        S_j = graph.node(loop.j).state
        if loop.vision is not None:
            out = sim3_vision_residual(loop.vision, S_i, S_j,
                                       graph.node(loop.i).disparities,
                                       graph.intrinsics, graph.T_cb)
            e += float((out.residual ** 2).sum())
        else:
            out = relative_pose_residual(loop.relative, S_i, S_j)
            e += float(out.residual @ out.residual)
    for edge in graph.chain:
        out = relative_pose_residual(edge, graph.node(edge.i).state,
                                     graph.node(edge.j).state)
        e += float(out.residual @ out.residual)
    return e


class _PgLayout:
    """Tangent-space bookkeeping for one pose-graph linearization.

    Exposes the same surface the shared step solver expects: opts, n_disp,
    n_pose_vars and free_mask(). Only keyframes that source a loop vision
    edge carry disparity variables.
    """

    def __init__(self, graph: PoseGraph, opts: SolveOptions):
        self.graph = graph
        self.opts = opts
        self.n_nodes = len(graph.nodes)
        self.free = np.ones(self.n_nodes, dtype=bool)
        self.free[0] = False                        # earliest keyframe is gauge
        self.n_pose_vars = self.n_nodes * SIM3_DOF
        sources = {loop.vision.i for loop in graph.loops if loop.vision is not None}
        counts = [len(n.disparities) if n.kid in sources else 0 for n in graph.nodes]
        self.d_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(int)
        self.n_disp = int(self.d_offsets[-1])

    def state_cols(self, kid: int) -> np.ndarray:
        base = self.graph.index_of(kid) * SIM3_DOF
        return np.arange(base, base + SIM3_DOF)

    def disp_cols(self, kid: int) -> np.ndarray:
        n = self.graph.index_of(kid)
        return np.arange(self.d_offsets[n], self.d_offsets[n + 1])

    def free_mask(self) -> np.ndarray:
        mask = np.repeat(self.free, SIM3_DOF)
        return mask


def _linearize_pg(graph: PoseGraph, layout: _PgLayout):
    npv, ndp = layout.n_pose_vars, layout.n_disp
    H_pp = np.zeros((npv, npv))
    H_pd = np.zeros((npv, ndp))
    H_dd = np.zeros(ndp)
    g_p = np.zeros(npv)
    g_d = np.zeros(ndp)

    def add_rel(edge_i, edge_j, out):
        ci = layout.state_cols(edge_i)
        cj = layout.state_cols(edge_j)
        Ji, Jj, r = out.J_i, out.J_j, out.residual
        H_pp[np.ix_(ci, ci)] += Ji.T @ Ji
        H_pp[np.ix_(cj, cj)] += Jj.T @ Jj
        Hij = Ji.T @ Jj
        H_pp[np.ix_(ci, cj)] += Hij
        H_pp[np.ix_(cj, ci)] += Hij.T
        g_p[ci] += Ji.T @ r
        g_p[cj] += Jj.T @ r

    for loop in graph.loops:
        S_i = graph.node(loop.i).state
        S_j = graph.node(loop.j).state
        if loop.vision is None:
            add_rel(loop.i, loop.j, relative_pose_residual(loop.relative, S_i, S_j))
            continue
        out = sim3_vision_residual(loop.vision, S_i, S_j,
                                   graph.node(loop.i).disparities,
                                   graph.intrinsics, graph.T_cb)
        ci = layout.state_cols(loop.i)
        cj = layout.state_cols(loop.j)
        cd = layout.disp_cols(loop.i)
        Ji, Jj, Jd, r = out.J_i, out.J_j, out.J_disparity, out.residual

        H_pp[np.ix_(ci, ci)] += np.einsum("nka,nkb->ab", Ji, Ji)
        H_pp[np.ix_(cj, cj)] += np.einsum("nka,nkb->ab", Jj, Jj)
        Hij = np.einsum("nka,nkb->ab", Ji, Jj)
        H_pp[np.ix_(ci, cj)] += Hij
        H_pp[np.ix_(cj, ci)] += Hij.T
        H_pd[np.ix_(ci, cd)] += np.einsum("nka,nk->na", Ji, Jd).T
        H_pd[np.ix_(cj, cd)] += np.einsum("nka,nk->na", Jj, Jd).T
        H_dd[cd] += np.einsum("nk,nk->n", Jd, Jd)
        g_p[ci] += np.einsum("nka,nk->a", Ji, r)
        g_p[cj] += np.einsum("nka,nk->a", Jj, r)
        g_d[cd] += np.einsum("nk,nk->n", Jd, r)

    for edge in graph.chain:
        add_rel(edge.i, edge.j, relative_pose_residual(
            edge, graph.node(edge.i).state, graph.node(edge.j).state))

    return H_pp, H_pd, H_dd, g_p, g_d


def _pg_snapshot(graph: PoseGraph):
    return ([n.state.copy() for n in graph.nodes],
            [None if n.disparities is None else n.disparities.copy()
             for n in graph.nodes])


def _pg_restore(graph: PoseGraph, snap):
    states, disps = snap
    for node, s, d in zip(graph.nodes, states, disps):
        node.state = s
        node.disparities = d


def _pg_apply(graph: PoseGraph, layout: _PgLayout, dx_full, dx_d):
    for n, node in enumerate(graph.nodes):
        if layout.free[n]:
            node.state = node.state.retract(
                dx_full[n * SIM3_DOF:(n + 1) * SIM3_DOF])
        cd = layout.disp_cols(node.kid)
        if len(cd):
            node.disparities = np.maximum(node.disparities + dx_d[cd],
                                          DISPARITY_FLOOR)


def solve_pgba(graph: PoseGraph, opts: SolveOptions | None = None):
    """Minimize loop plus chain energy over the graph's Sim(3) states in place.

    Vision rows of loop edges are assembled with their source disparities as
    variables (eliminated per pixel); every other edge contributes a whitened
    relative-pose residual. The earliest keyframe is the gauge and is never
    touched. Returns (SolveReport, LoopCorrection); the correction covers
    every node with its pose change and scale ratio across the solve.
    """
    if not graph.loops:
        raise ValueError("pose graph has no loop edges")
    if len(graph.nodes) > 1 and not graph.chain:
        raise ValueError("pose graph chain is disconnected")
    if opts is None:
        opts = SolveOptions()
    layout = _PgLayout(graph, opts)
    before = {n.kid: n.state.copy() for n in graph.nodes}

    cost = total_pg_energy(graph)
    if not np.isfinite(cost):
        raise RuntimeError("pose-graph energy is not finite")
    trajectory = [cost]
    lam = opts.damping
    termination = "max_iterations"
    iterations = 0
    warnings = []

    for it in range(opts.max_iterations):
        H_pp, H_pd, H_dd, g_p, g_d = _linearize_pg(graph, layout)
        accepted = False
        while True:
            try:
                dx_full, dx_d = _solve_step(layout, H_pp, H_pd, H_dd,
                                            g_p, g_d, lam, opts.use_schur)
            except RuntimeError as exc:
                warnings.append(str(exc))
                lam *= opts.damping_up
                if lam > opts.max_damping:
                    report = SolveReport(iterations, trajectory[0], cost,
                                         trajectory, f"singular: {exc}", warnings)
                    return report, _correction(graph, before)
                continue
            snap = _pg_snapshot(graph)
            _pg_apply(graph, layout, dx_full, dx_d)
            new_cost = total_pg_energy(graph)
            if np.isfinite(new_cost) and new_cost < cost:
                cost = new_cost
                trajectory.append(cost)
                lam = max(lam * opts.damping_down, 1e-12)
                accepted = True
                iterations = it + 1
                step_inf = max(np.max(np.abs(dx_full), initial=0.0),
                               np.max(np.abs(dx_d), initial=0.0))
                if step_inf < opts.step_tol:
                    termination = "converged"
                break
            _pg_restore(graph, snap)
            lam *= opts.damping_up
            if lam > opts.max_damping:
                termination = "no_decrease_at_max_damping"
                break
        if not accepted:
            break
        if termination == "converged":
            break
        prev = trajectory[-2]
        if prev > 0 and (prev - cost) / prev < opts.rel_decrease_tol:
            termination = "converged"
            break

    report = SolveReport(iterations, trajectory[0], cost, trajectory,
                         termination, warnings)
    return report, _correction(graph, before)


def _correction(graph: PoseGraph, before: dict) -> LoopCorrection:
    entries = {}
    stamp = 0.0
    for node in graph.nodes:
        old = before[node.kid]
        entries[node.kid] = CorrectionEntry(
            kid=node.kid,
            old_pose=old.pose(),
            new_pose=node.state.pose(),
            scale_change=node.state.scale / old.scale,
        )
        stamp = max(stamp, node.timestamp)
    return LoopCorrection(entries, stamp)


class LoopWorker:
    """Owns the persistent pose graph side of loop closure.

    The tracker sends a keyframe summary at every insertion and a relative
    chain edge at every eviction; the worker detects loops against its
    history, aligns admitted pairs, and on request solves the pose graph over
    the archived chain plus the provisional window, returning the correction
    message for the tracker and map. One loop (the lowest-flow candidate) is
    admitted per keyframe.
    """

    def __init__(self, intrinsics: Intrinsics, edge_source,
                 policy: LoopPolicy | None = None, T_cb: Pose | None = None,
                 align_iterations: int = 15):
        self.intrinsics = intrinsics
        self.edge_source = edge_source            # (frame_i, frame_j) -> VisionEdge
        self.policy = policy or LoopPolicy()
        self.T_cb = T_cb
        self.align_iterations = align_iterations
        self.summaries = []
        self.poses = {}             # kid -> Pose, newest estimate seen
        self.states = {}            # kid -> SimTransform, archived nodes only
        self.snapshots = {}         # kid -> (pixels, disparities)
        self.frame_of = {}
        self.timestamps = {}
        self.chain = []             # exported sequential edges, archived prefix
        self.loops = []
        self.pending = False        # a loop was admitted since the last solve

    @property
    def loops_closed(self) -> int:
        return len(self.loops)

    def _state_of(self, kid: int) -> SimTransform:
        s = self.states.get(kid)
        return s if s is not None else SimTransform.from_pose(self.poses[kid])

    def ingest_summary(self, summary: KeyframeSummary):
        """Register a new keyframe; returns the admitted loop pair, if any."""
        if summary.kid in self.poses:
            raise ValueError(f"keyframe {summary.kid} was already summarized")
        candidates = detect_loops(summary, self.summaries, self.policy)
        self.summaries.append(summary)
        self.poses[summary.kid] = summary.pose
        self.frame_of[summary.kid] = summary.frame_index
        self.timestamps[summary.kid] = summary.timestamp
        if summary.pixels is not None and summary.disparities is not None:
            self.snapshots[summary.kid] = (
                np.asarray(summary.pixels, dtype=float),
                np.asarray(summary.disparities, dtype=float))
        if not candidates:
            return None
        pair = candidates[0]
        self._admit(pair)
        return pair

    def _admit(self, pair):
        i, j = pair
        if any(l.i == i and l.j == j for l in self.loops):
            return
        if i not in self.snapshots:
            raise ValueError(f"keyframe {i} has no pixel snapshot to anchor a loop")
        pixels_i, disp_i = self.snapshots[i]
        raw = self.edge_source(self.frame_of[i], self.frame_of[j])
        vision = VisionEdge(i, j, raw.pixels, raw.targets, raw.weights)
        if len(vision.pixels) != len(disp_i):
            raise ValueError("loop edge rows must align with the source pixel snapshot")
        relative = align_loop_pair(vision, disp_i, self._state_of(i),
                                   self._state_of(j), self.intrinsics,
                                   self.T_cb, iterations=self.align_iterations)
        self.loops.append(LoopEdge(i, j, relative, vision))
        self.pending = True

    def ingest_eviction(self, kid: int, pose: Pose,
                        chain_edge: RelativePoseEdge | None) -> None:
        """Record a keyframe leaving the window with its exported chain edge.

        The tracker's pose is correction-current (corrections fold scale into
        its depths), so the archived node enters at unit scale.
        """
        self.states[kid] = SimTransform.from_pose(pose)
        self.poses[kid] = pose
        if chain_edge is not None:
            self.chain.append(chain_edge)

    def solve(self, window_nodes, window_chain,
              opts: SolveOptions | None = None):
        """Solve the pose graph with the live window appended provisionally.

        window_nodes is a list of (kid, SimTransform, timestamp) triples and
        window_chain the relative edges over its consecutive pairs, both
        rebuilt fresh from the tracker's current estimates. Archived node
        states persist across calls and are updated by the solve; provisional
        nodes are discarded afterwards. Returns (report, correction) or None
        when the graph has no loops yet.
        """
        if not self.loops:
            return None
        window_kids = {kid for kid, _, _ in window_nodes}
        nodes = []
        for kid, state in self.states.items():
            if kid in window_kids:
                continue
            pixels, disp = self.snapshots.get(kid, (None, None))
            nodes.append(PoseGraphNode(kid, state.copy(), pixels,
                                       None if disp is None else disp.copy(),
                                       self.timestamps.get(kid, 0.0)))
        for kid, state, stamp in window_nodes:
            pixels, disp = self.snapshots.get(kid, (None, None))
            nodes.append(PoseGraphNode(kid, state.copy(), pixels,
                                       None if disp is None else disp.copy(),
                                       stamp))
        graph = PoseGraph(nodes, self.chain + list(window_chain),
                          list(self.loops), self.intrinsics, self.T_cb,
                          self.policy.min_gap)
        report, correction = solve_pgba(graph, opts)
        for node in graph.nodes:
            self.poses[node.kid] = node.state.pose()
            if node.kid in self.states:
                self.states[node.kid] = node.state
            if node.kid in self.snapshots and node.disparities is not None:
                self.snapshots[node.kid] = (self.snapshots[node.kid][0],
                                            node.disparities)
        self.pending = False
        return report, correction
