"""Rotation, rigid-body and similarity transforms with their tangent-space maps.

Conventions used across the package:

* quaternions are stored (w, x, y, z) with w >= 0 and unit norm,
* SO(3) tangent vectors are rotation vectors (axis * angle),
* pose tangents are (rotation, translation), retraction R <- R Exp(dtheta),
  p <- p + dp,
* Sim(3) tangents are ordered (rotation, translation, log-scale) and retract
  on the right: S <- S * Exp(xi).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

_SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp_matrix(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor fallback below the small-angle cutoff."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        # second-order Taylor keeps exp(log(R)) round trips at machine precision
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log_matrix(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R.

    Goes through the quaternion: the arccos-of-trace route loses most of its
    precision within a few milliradians of a pi rotation, while the
    largest-diagonal quaternion extraction plus an atan2 angle stay accurate
    over the whole ball.
    """
    return Rotation.from_matrix(R).log()


def so3_right_jacobian(omega: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3): Exp(w + dw) ~= Exp(w) Exp(Jr(w) dw)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + (K @ K) / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * K + b * (K @ K)


def so3_right_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + (K @ K) / 12.0
    half = 0.5 * theta
    cot = 1.0 / np.tan(half)
    b = (1.0 / (theta * theta)) * (1.0 - theta * cot / 2.0)
    return np.eye(3) + 0.5 * K + b * (K @ K)


def _quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_canonical(q: np.ndarray) -> np.ndarray:
    q = q / np.linalg.norm(q)
    if q[0] < 0.0:
        q = -q
    return q


class Rotation:
    """Unit quaternion rotation, canonicalized to w >= 0."""

    __slots__ = ("q",)

    def __init__(self, q: np.ndarray):
        self.q = _quat_canonical(np.asarray(q, dtype=float))

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def exp(omega: np.ndarray) -> "Rotation":
        omega = np.asarray(omega, dtype=float)
        theta = np.linalg.norm(omega)
        if theta < _SMALL_ANGLE:
            # exp of a tiny rotation vector, first-order quaternion
            q = np.concatenate(([1.0], 0.5 * omega))
        else:
            axis = omega / theta
            q = np.concatenate(([np.cos(0.5 * theta)], np.sin(0.5 * theta) * axis))
        return Rotation(q)

    @staticmethod
    def from_matrix(R: np.ndarray) -> "Rotation":
        R = np.asarray(R, dtype=float)
        t = np.trace(R)
        if t > 0.0:
            s = np.sqrt(t + 1.0) * 2.0
            q = np.array([0.25 * s,
                          (R[2, 1] - R[1, 2]) / s,
                          (R[0, 2] - R[2, 0]) / s,
                          (R[1, 0] - R[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(R)))
            if i == 0:
                s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
                q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                              (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
            elif i == 1:
                s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
                q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                              0.25 * s, (R[1, 2] + R[2, 1]) / s])
            else:
                s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
                q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                              (R[1, 2] + R[2, 1]) / s, 0.25 * s])
        return Rotation(q)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def log(self) -> np.ndarray:
        w = self.q[0]
        v = self.q[1:]
        n = np.linalg.norm(v)
        if n < _SMALL_ANGLE:
            # first-order in the vector part; w is 1 up to O(n^2)
            return (2.0 / w) * v
        theta = 2.0 * np.arctan2(n, w)
        return (theta / n) * v

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix().T

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(_quat_multiply(self.q, other.q))

    def angle_to(self, other: "Rotation") -> float:
        """Geodesic angle in radians between two rotations."""
        return float(np.linalg.norm((self.inverse() * other).log()))

    def __repr__(self) -> str:
        return f"Rotation(q={self.q})"


@dataclass
class Pose:
    """Rigid transform x_out = R @ x + t."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix()
        T[:3, 3] = self.translation
        return T

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.rotation.apply(x) + self.translation

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation * other.rotation,
                    self.rotation.apply(other.translation) + self.translation)

    def __mul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rinv = self.rotation.inverse()
        return Pose(Rinv, -Rinv.apply(self.translation))

    def retract(self, dtheta: np.ndarray, dp: np.ndarray) -> "Pose":
        """Right rotation update, additive world-frame translation update."""
        return Pose(self.rotation * Rotation.exp(dtheta), self.translation + dp)

    def copy(self) -> "Pose":
        return Pose(Rotation(self.q_copy()), self.translation.copy())

    def q_copy(self) -> np.ndarray:
        return self.rotation.q.copy()


def _sim3_w_matrix(omega: np.ndarray, sigma: float) -> np.ndarray:
    """Closed-form W with W @ v the translation of exp((omega, v, sigma)).

    W = int_0^1 exp(sigma u) Exp(omega u) du, evaluated with Taylor branches
    for small angle and small log-scale.
    """
    theta = np.linalg.norm(omega)
    K = hat(omega)
    K2 = K @ K
    s = np.exp(sigma)
    eps = 1e-6
    if abs(sigma) < eps:
        C = 1.0
        if theta < eps:
            A = 0.5
            B = 1.0 / 6.0
        else:
            t2 = theta * theta
            A = (1.0 - np.cos(theta)) / t2
            B = (theta - np.sin(theta)) / (t2 * theta)
    else:
        C = (s - 1.0) / sigma
        if theta < eps:
            s2 = sigma * sigma
            A = ((sigma - 1.0) * s + 1.0) / s2
            B = (s * (0.5 * s2 - sigma + 1.0) - 1.0) / (s2 * sigma)
        else:
            t2 = theta * theta
            d = sigma * sigma + t2
            A = (s * sigma * np.sin(theta) + theta * (1.0 - s * np.cos(theta))) / (theta * d)
            B = (C - ((s * np.cos(theta) - 1.0) * sigma + s * np.sin(theta) * theta) / d) / t2
    return C * np.eye(3) + A * K + B * K2


@dataclass
class SimTransform:
    """Similarity transform x_out = scale * R @ x + t, scale > 0."""

    rotation: Rotation
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        self.scale = float(self.scale)
        if not self.scale > 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @staticmethod
    def identity() -> "SimTransform":
        return SimTransform(Rotation.identity(), np.zeros(3), 1.0)

    @staticmethod
    def from_pose(pose: Pose, scale: float = 1.0) -> "SimTransform":
        return SimTransform(Rotation(pose.rotation.q.copy()), pose.translation.copy(), scale)

    def pose(self) -> Pose:
        """Rigid part (scale dropped)."""
        return Pose(Rotation(self.rotation.q.copy()), self.translation.copy())

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * self.rotation.apply(x) + self.translation

    def compose(self, other: "SimTransform") -> "SimTransform":
        return SimTransform(
            self.rotation * other.rotation,
            self.scale * self.rotation.apply(other.translation) + self.translation,
            self.scale * other.scale,
        )

    def __mul__(self, other: "SimTransform") -> "SimTransform":
        return self.compose(other)

    def inverse(self) -> "SimTransform":
        Rinv = self.rotation.inverse()
        inv_s = 1.0 / self.scale
        return SimTransform(Rinv, -inv_s * Rinv.apply(self.translation), inv_s)

    @staticmethod
    def exp(xi: np.ndarray) -> "SimTransform":
        """Tangent ordered (rotation, translation, log-scale)."""
        xi = np.asarray(xi, dtype=float).reshape(7)
        omega, upsilon, sigma = xi[:3], xi[3:6], xi[6]
        W = _sim3_w_matrix(omega, sigma)
        return SimTransform(Rotation.exp(omega), W @ upsilon, np.exp(sigma))

    def log(self) -> np.ndarray:
        omega = self.rotation.log()
        sigma = np.log(self.scale)
        W = _sim3_w_matrix(omega, sigma)
        upsilon = np.linalg.solve(W, self.translation)
        return np.concatenate([omega, upsilon, [sigma]])

    def retract(self, xi: np.ndarray) -> "SimTransform":
        return self.compose(SimTransform.exp(xi))

    def adjoint(self) -> np.ndarray:
        """7x7 adjoint with tangent ordering (rotation, translation, log-scale)."""
        R = self.rotation.matrix()
        t = self.translation
        A = np.zeros((7, 7))
        A[:3, :3] = R
        A[3:6, :3] = hat(t) @ R
        A[3:6, 3:6] = self.scale * R
        A[3:6, 6] = -t
        A[6, 6] = 1.0
        return A

    def copy(self) -> "SimTransform":
        return SimTransform(Rotation(self.rotation.q.copy()), self.translation.copy(), self.scale)


def sim3_ad(xi: np.ndarray) -> np.ndarray:
    """Algebra adjoint ad_xi with ordering (rotation, translation, log-scale)."""
    xi = np.asarray(xi, dtype=float).reshape(7)
    omega, upsilon, sigma = xi[:3], xi[3:6], xi[6]
    A = np.zeros((7, 7))
    A[:3, :3] = hat(omega)
    A[3:6, :3] = hat(upsilon)
    A[3:6, 3:6] = hat(omega) + sigma * np.eye(3)
    A[3:6, 6] = -upsilon
    return A


def sim3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Exact inverse right Jacobian of Sim(3) at xi.

    Uses Jr(xi) = phi(-ad_xi) with phi(A) = int_0^1 expm(A s) ds, evaluated via
    the block-matrix exponential identity, then inverted. Exact up to expm
    accuracy (Pade), so it is a closed-form evaluation rather than a series
    truncation or a finite difference.
    """
    A = -sim3_ad(xi)
    M = np.zeros((14, 14))
    M[:7, :7] = A
    M[:7, 7:] = np.eye(7)
    phi = expm(M)[:7, 7:]
    return np.linalg.inv(phi)


def so3_exp(omega: np.ndarray) -> Rotation:
    """Rotation by angle ||omega|| about omega/||omega||."""
    omega = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(omega)):
        raise ValueError("non-finite rotation vector")
    return Rotation.exp(omega)


def so3_log(r: Rotation) -> np.ndarray:
    """Principal rotation vector, ||result|| <= pi."""
    return r.log()


def sim3_apply(s: SimTransform, x: np.ndarray) -> np.ndarray:
    return s.apply(x)


def se3_exp(xi: np.ndarray) -> Pose:
    """SE(3) exponential, tangent ordered (rotation, translation)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, upsilon = xi[:3], xi[3:6]
    W = _sim3_w_matrix(omega, 0.0)
    return Pose(Rotation.exp(omega), W @ upsilon)


def se3_log(pose: Pose) -> np.ndarray:
    omega = pose.rotation.log()
    W = _sim3_w_matrix(omega, 0.0)
    upsilon = np.linalg.solve(W, pose.translation)
    return np.concatenate([omega, upsilon])
