"""Damped Gauss-Newton over a local frame graph with disparity elimination.

The decision variables are per-keyframe 15-dof states (rotation, translation,
velocity, gyro bias, accel bias), optionally a 2-dof gravity direction, and
one disparity per tracked pixel of each source keyframe. Disparities only
couple through their own keyframe's vision edges, so their normal-equation
block is diagonal and is folded into the pose system by a per-pixel Schur
complement, then recovered by back-substitution.

A reference dense path solves the full (un-eliminated) normal equations and
must produce the same step; it exists for verification and small problems.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .imu import PreintegratedDelta
from .residuals import (
    GRAVITY_TANGENT_BASIS,
    GravityModel,
    Intrinsics,
    PoseState,
    VisionEdge,
    inertial_residual,
    vision_residual,
)

DISPARITY_FLOOR = 1e-4
STATE_DOF = 15
POSE_DOF = 6


@dataclass
class Keyframe:
    kid: int
    state: PoseState
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    disparities: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.disparities = np.asarray(self.disparities, dtype=float).reshape(-1)
        if len(self.pixels) != len(self.disparities):
            raise ValueError("one disparity per tracked pixel")
        if len(self.disparities) and self.disparities.min() <= 0.0:
            raise ValueError("disparities must be positive")


@dataclass
class FrameGraph:
    keyframes: list            # ordered Keyframe list
    vision_edges: list         # VisionEdge, endpoints are keyframe ids
    inertial_edges: list       # (i, j, PreintegratedDelta) for consecutive pairs
    gravity: GravityModel
    intrinsics: Intrinsics
    T_cb: Pose | None = None

    def __post_init__(self):
        ids = [kf.kid for kf in self.keyframes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate keyframe ids")
        self._index = {kid: n for n, kid in enumerate(ids)}
        for e in self.vision_edges:
            if e.i not in self._index or e.j not in self._index:
                raise ValueError(f"vision edge ({e.i},{e.j}) references unknown keyframe")
        consecutive = {(ids[n], ids[n + 1]) for n in range(len(ids) - 1)}
        covered = {(i, j) for i, j, _ in self.inertial_edges}
        if self.inertial_edges and covered != consecutive:
            raise ValueError("inertial edges must cover exactly the consecutive pairs")

    def kf(self, kid: int) -> Keyframe:
        return self.keyframes[self._index[kid]]

    def index_of(self, kid: int) -> int:
        return self._index[kid]


@dataclass
class SolveOptions:
    max_iterations: int = 10
    damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    rel_decrease_tol: float = 1e-8
    step_tol: float = 1e-10
    max_damping: float = 1e8
    frozen_keyframes: tuple = (0,)     # keyframe ids with fixed pose+velocity+bias
    optimize_gravity: bool = False
    optimize_velocity_bias: bool = True
    use_schur: bool = True
    ridge: float = 1e-10

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        for name in ("damping", "damping_up", "rel_decrease_tol", "step_tol",
                     "max_damping", "ridge"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.damping_down < 1):
            raise ValueError("damping_down must be in (0, 1)")


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    cost_trajectory: list
    termination: str
    condition_warnings: list = field(default_factory=list)


def total_energy(graph: FrameGraph) -> float:
    """Sum of whitened squared residuals over every edge of the graph."""
    e = 0.0
    for edge in graph.vision_edges:
        kf_i, kf_j = graph.kf(edge.i), graph.kf(edge.j)
        out = vision_residual(edge, kf_i.state.pose, kf_j.state.pose,
                              _edge_disparities(graph, edge), graph.intrinsics,
                              T_cb=graph.T_cb)
        e += float((out.residual ** 2).sum())
    for i, j, delta in graph.inertial_edges:
        out = inertial_residual(delta, graph.kf(i).state, graph.kf(j).state,
                                graph.gravity)
        e += float((out.residual ** 2).sum())
    return e


def _edge_disparities(graph: FrameGraph, edge: VisionEdge) -> np.ndarray:
    """Disparities of the edge's source pixels (edges share the source list)."""
    return graph.kf(edge.i).disparities


class _Layout:
    """Tangent-space bookkeeping for one linearization."""

    def __init__(self, graph: FrameGraph, opts: SolveOptions):
        self.graph = graph
        self.opts = opts
        self.n_kf = len(graph.keyframes)
        frozen = set(opts.frozen_keyframes)
        self.frozen = np.array([kf.kid in frozen for kf in graph.keyframes])
        self.state_dof = STATE_DOF if opts.optimize_velocity_bias else POSE_DOF
        self.n_state = self.n_kf * self.state_dof
        self.n_grav = 2 if opts.optimize_gravity else 0
        self.n_pose_vars = self.n_state + self.n_grav
        self.d_offsets = np.concatenate(
            [[0], np.cumsum([len(kf.disparities) for kf in graph.keyframes])])
        self.n_disp = int(self.d_offsets[-1])

    def state_cols(self, kid: int, rows: slice) -> np.ndarray:
        """Columns in the reduced system for a keyframe's tangent sub-block."""
        base = self.graph.index_of(kid) * self.state_dof
        return np.arange(base + rows.start, base + rows.stop)

    def disp_cols(self, kid: int) -> np.ndarray:
        n = self.graph.index_of(kid)
        return np.arange(self.d_offsets[n], self.d_offsets[n + 1])

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.n_pose_vars, dtype=bool)
        for n, kf in enumerate(self.graph.keyframes):
            if self.frozen[n]:
                mask[n * self.state_dof:(n + 1) * self.state_dof] = False
        return mask


def _linearize(graph: FrameGraph, layout: _Layout):
    """Assemble H, g over [states | gravity | disparities] in normal form.

    Returns (H_pp, H_pd dense blocks per keyframe, H_dd diagonal, g_p, g_d).
    H_pd is stored as a full (n_pose_vars, n_disp) matrix; problems here are
    desk-scale so the clarity is worth the memory.
    """
    npv, ndp = layout.n_pose_vars, layout.n_disp
    H_pp = np.zeros((npv, npv))
    H_pd = np.zeros((npv, ndp))
    H_dd = np.zeros(ndp)
    g_p = np.zeros(npv)
    g_d = np.zeros(ndp)
    sdof = layout.state_dof

    for edge in graph.vision_edges:
        kf_i, kf_j = graph.kf(edge.i), graph.kf(edge.j)
        out = vision_residual(edge, kf_i.state.pose, kf_j.state.pose,
                              kf_i.disparities, graph.intrinsics, T_cb=graph.T_cb)
        ci = layout.state_cols(edge.i, slice(0, POSE_DOF))
        cj = layout.state_cols(edge.j, slice(0, POSE_DOF))
        cd = layout.disp_cols(edge.i)

        Ji = out.J_pose_i            # (N, 2, 6)
        Jj = out.J_pose_j
        Jd = out.J_disparity         # (N, 2)
        r = out.residual             # (N, 2)

        Hii = np.einsum("nka,nkb->ab", Ji, Ji)
        Hjj = np.einsum("nka,nkb->ab", Jj, Jj)
        Hij = np.einsum("nka,nkb->ab", Ji, Jj)
        H_pp[np.ix_(ci, ci)] += Hii
        H_pp[np.ix_(cj, cj)] += Hjj
        H_pp[np.ix_(ci, cj)] += Hij
        H_pp[np.ix_(cj, ci)] += Hij.T

        # per-pixel disparity coupling
        Hid = np.einsum("nka,nk->na", Ji, Jd)   # (N, 6)
        Hjd = np.einsum("nka,nk->na", Jj, Jd)
        H_pd[np.ix_(ci, cd)] += Hid.T
        H_pd[np.ix_(cj, cd)] += Hjd.T
        H_dd[cd] += np.einsum("nk,nk->n", Jd, Jd)

        # gradient uses J^T r with the residual defined as (target - prediction),
        # so the Gauss-Newton step solves H dx = -g with g = J^T r
        g_p[ci] += np.einsum("nka,nk->a", Ji, r)
        g_p[cj] += np.einsum("nka,nk->a", Jj, r)
        g_d[cd] += np.einsum("nk,nk->n", Jd, r)

    grav_cols = np.arange(layout.n_state, layout.n_state + layout.n_grav)
    for i, j, delta in graph.inertial_edges:
        out = inertial_residual(delta, graph.kf(i).state, graph.kf(j).state,
                                graph.gravity)
        Ji = out.J_i[:, :sdof]
        Jj = out.J_j[:, :sdof]
        ci = layout.state_cols(i, slice(0, sdof))
        cj = layout.state_cols(j, slice(0, sdof))
        r = out.residual

        H_pp[np.ix_(ci, ci)] += Ji.T @ Ji
        H_pp[np.ix_(cj, cj)] += Jj.T @ Jj
        Hij = Ji.T @ Jj
        H_pp[np.ix_(ci, cj)] += Hij
        H_pp[np.ix_(cj, ci)] += Hij.T
        g_p[ci] += Ji.T @ r
        g_p[cj] += Jj.T @ r

        if layout.n_grav:
            Jg = out.J_gravity @ GRAVITY_TANGENT_BASIS
            H_pp[np.ix_(grav_cols, grav_cols)] += Jg.T @ Jg
            Hg_i = Ji.T @ Jg
            Hg_j = Jj.T @ Jg
            H_pp[np.ix_(ci, grav_cols)] += Hg_i
            H_pp[np.ix_(grav_cols, ci)] += Hg_i.T
            H_pp[np.ix_(cj, grav_cols)] += Hg_j
            H_pp[np.ix_(grav_cols, cj)] += Hg_j.T
            g_p[grav_cols] += Jg.T @ r

    return H_pp, H_pd, H_dd, g_p, g_d


def _apply_freeze(layout, H_pp, H_pd, g_p):
    free = layout.free_mask()
    Hf = H_pp[np.ix_(free, free)]
    return Hf, H_pd[free], g_p[free], free


def _damp(diag_vec: np.ndarray, lam: float, ridge: float) -> np.ndarray:
    """Levenberg scaling of a diagonal, with an absolute floor for flat blocks."""
    return diag_vec * (1.0 + lam) + ridge


def _solve_step(layout, H_pp, H_pd, H_dd, g_p, g_d, lam, use_schur):
    """One damped step, solved either via the Schur path or fully dense.

    Both paths apply identical damping (multiplicative on the diagonal plus a
    tiny absolute ridge) so their accepted steps coincide.
    """
    opts = layout.opts
    Hf, Hfd, gf, free = _apply_freeze(layout, H_pp, H_pd, g_p)
    nf = Hf.shape[0]
    nd = layout.n_disp

    Hf_d = Hf.copy()
    idx = np.arange(nf)
    Hf_d[idx, idx] = _damp(np.diag(Hf), lam, opts.ridge)
    Hdd_d = _damp(H_dd, lam, opts.ridge)

    if use_schur and nd:
        inv_dd = 1.0 / Hdd_d
        # reduced pose system: Hf - Hfd D^-1 Hfd^T
        Hred = Hf_d - (Hfd * inv_dd) @ Hfd.T
        gred = gf - Hfd @ (inv_dd * g_d)
        try:
            dx_f = np.linalg.solve(Hred, -gred)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError("singular reduced pose system") from exc
        dx_d = inv_dd * (-g_d - Hfd.T @ dx_f)
    else:
        n = nf + nd
        H = np.zeros((n, n))
        H[:nf, :nf] = Hf_d
        if nd:
            H[:nf, nf:] = Hfd
            H[nf:, :nf] = Hfd.T
            H[nf + np.arange(nd), nf + np.arange(nd)] = Hdd_d
        g = np.concatenate([gf, g_d])
        try:
            dx = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError("singular full system") from exc
        dx_f, dx_d = dx[:nf], dx[nf:]

    dx_full = np.zeros(layout.n_pose_vars)
    dx_full[free] = dx_f
    return dx_full, dx_d


def _snapshot(graph: FrameGraph):
    states = [kf.state.copy() for kf in graph.keyframes]
    disps = [kf.disparities.copy() for kf in graph.keyframes]
    grav = graph.gravity.copy()
    return states, disps, grav


def _restore(graph: FrameGraph, snap):
    states, disps, grav = snap
    for kf, s, d in zip(graph.keyframes, states, disps):
        kf.state = s
        kf.disparities = d
    graph.gravity = grav


def _apply_step(graph: FrameGraph, layout: _Layout, dx_full, dx_d):
    sdof = layout.state_dof
    for n, kf in enumerate(graph.keyframes):
        seg = dx_full[n * sdof:(n + 1) * sdof]
        if sdof == STATE_DOF:
            kf.state = kf.state.retract(seg)
        else:
            kf.state = PoseState(kf.state.pose.retract(seg[0:3], seg[3:6]),
                                 kf.state.velocity, kf.state.bias,
                                 kf.state.timestamp)
        cd = layout.disp_cols(kf.kid)
        if len(cd):
            kf.disparities = np.maximum(kf.disparities + dx_d[cd], DISPARITY_FLOOR)
    if layout.n_grav:
        dg = dx_full[layout.n_state:layout.n_state + 2]
        graph.gravity = graph.gravity.retract(GRAVITY_TANGENT_BASIS @ dg)


def solve_vi_ba(graph: FrameGraph, opts: SolveOptions | None = None) -> SolveReport:
    """Minimize the joint vision + inertial energy over the graph in place.

    Levenberg-style damping: a step is accepted only if it strictly decreases
    the total energy; rejected steps raise the damping and retry the same
    linearization. Disparities are Schur-eliminated per pixel unless the
    dense reference path is requested.
    """
    if opts is None:
        opts = SolveOptions()
    layout = _Layout(graph, opts)

    cost = total_energy(graph)
    trajectory = [cost]
    if opts.max_iterations == 0:
        return SolveReport(0, cost, cost, trajectory, "max_iterations")

    lam = opts.damping
    termination = "max_iterations"
    iterations = 0
    warnings = []

    for it in range(opts.max_iterations):
        H_pp, H_pd, H_dd, g_p, g_d = _linearize(graph, layout)
        accepted = False
        while True:
            try:
                dx_full, dx_d = _solve_step(layout, H_pp, H_pd, H_dd,
                                            g_p, g_d, lam, opts.use_schur)
            except RuntimeError as exc:
                warnings.append(str(exc))
                lam *= opts.damping_up
                if lam > opts.max_damping:
                    return SolveReport(iterations, trajectory[0], cost, trajectory,
                                       f"singular: {exc}", warnings)
                continue
            snap = _snapshot(graph)
            _apply_step(graph, layout, dx_full, dx_d)
            new_cost = total_energy(graph)
            if new_cost < cost:
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
            _restore(graph, snap)
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
    else:
        termination = "max_iterations"

    return SolveReport(iterations, trajectory[0], cost, trajectory,
                       termination, warnings)
