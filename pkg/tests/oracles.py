"""Independent oracles used by the test suite.

These re-derive expected values through a different code path than the library
(vectorized quaternion scan instead of the sequential matrix loop) so that
agreement is a genuine dual-route check.
"""

from __future__ import annotations

import numpy as np


def _quat_from_rotvec(w: np.ndarray) -> np.ndarray:
    """Batch rotation-vector to quaternion (w, x, y, z)."""
    w = np.atleast_2d(w)
    theta = np.linalg.norm(w, axis=1)
    q = np.empty((w.shape[0], 4))
    small = theta < 1e-12
    half = 0.5 * theta
    q[:, 0] = np.cos(half)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small, 0.5, np.sin(half) / np.where(theta == 0, 1.0, theta))
    q[:, 1:] = w * s[:, None]
    return q


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate batched vectors by batched quaternions."""
    u = q[..., 1:]
    w = q[..., 0:1]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def _quat_scan(steps: np.ndarray) -> np.ndarray:
    """Inclusive prefix products q_0, q_0 q_1, ... via a Hillis-Steele scan."""
    out = steps.copy()
    n = out.shape[0]
    shift = 1
    while shift < n:
        prev = out[:-shift]
        out[shift:] = _quat_mul(prev, out[shift:])
        shift *= 2
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / norms


def integrate_imu_fine(omega_fn, accel_fn, t0: float, t1: float, rate_hz: float):
    """Fine-step integration of analytic body-frame signals.

    Holds the endpoint average over each fine interval with the midpoint
    rotation for the velocity/position quadrature; at 20 kHz the residual
    discretization error is far below the coarse tolerances being checked.
    Returns (delta_R 3x3, delta_p, delta_v).
    """
    n = int(round((t1 - t0) * rate_hz))
    ts = t0 + (t1 - t0) * np.arange(n + 1) / n
    dt = np.diff(ts)
    w_all = omega_fn(ts)
    a_all = accel_fn(ts)
    w_bar = 0.5 * (w_all[:-1] + w_all[1:])
    a_bar = 0.5 * (a_all[:-1] + a_all[1:])

    step_q = _quat_from_rotvec(w_bar * dt[:, None])
    prefix = _quat_scan(step_q)
    # rotation from the segment start to the START of interval k
    q_start = np.vstack([np.array([[1.0, 0.0, 0.0, 0.0]]), prefix[:-1]])
    q_mid = _quat_mul(q_start, _quat_from_rotvec(w_bar * (0.5 * dt[:, None])))

    a_seg = _quat_rotate(q_mid, a_bar)
    dv_steps = a_seg * dt[:, None]
    dv_prefix = np.cumsum(dv_steps, axis=0)
    dv_before = np.vstack([np.zeros(3), dv_prefix[:-1]])
    dp_steps = dv_before * dt[:, None] + 0.5 * a_seg * dt[:, None] ** 2
    delta_p = dp_steps.sum(axis=0)
    delta_v = dv_prefix[-1]

    qw, qx, qy, qz = prefix[-1]
    R = np.array([
        [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz), 2 * (qx * qz + qw * qy)],
        [2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qw * qx)],
        [2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx), 1 - 2 * (qx * qx + qy * qy)],
    ])
    return R, delta_p, delta_v


def random_periodic_signal(rng, n_harmonics=2, base_hz=1.0, amps=(0.3, 0.15), offset=0.0):
    """Random band-limited signal periodic over 1/base_hz seconds.

    Returns a closure mapping scalar or (n,) times to (..., 3) values.
    Periodicity makes the composite quadrature error of interval schemes
    telescope away at the boundaries.
    """
    amp = np.array([rng.uniform(0.2, 1.0, size=3) * amps[h] for h in range(n_harmonics)])
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(n_harmonics, 3))
    const = rng.uniform(-1.0, 1.0, size=3) * offset

    def signal(t):
        t = np.asarray(t, dtype=float)
        arg = 2.0 * np.pi * base_hz * (np.arange(n_harmonics) + 1.0)
        out = np.broadcast_to(const, t.shape + (3,)).copy()
        for h in range(n_harmonics):
            out = out + amp[h] * np.sin(arg[h] * t[..., None] + phase[h])
        return out

    return signal


def umeyama_alignment_ref(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Reference Horn/Umeyama closed form, kept separate from the library."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    C = xd.T @ xs / src.shape[0]
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (xs ** 2).sum() / src.shape[0]
        s = np.trace(np.diag(D) @ S) / var_s
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t
