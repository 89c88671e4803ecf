"""Rigid transforms on SE(3): poses, exp/log maps, adjoints and tangent Jacobians.

Conventions:
    - A Pose maps points from its "source" frame into its "target" frame:
      x_target = R @ x_source + t.
    - Tangent vectors are 6-vectors ordered (phi, rho): rotation first,
      translation second.  exp((0,0,0, a,b,c)) is the pure translation (a,b,c).
    - Perturbations are applied on the left: T' = exp(delta) * T.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_EPS = 1e-12


def _quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < _EPS:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical sign: w >= 0 (unique representation for serialization)
    if q[0] < 0 or (q[0] == 0 and _first_nonzero_negative(q[1:])):
        q = -q
    return q


def _first_nonzero_negative(v):
    for x in v:
        if x != 0:
            return x < 0
    return False


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return _quat_normalize(q)


def hat(v):
    """Skew-symmetric matrix such that hat(v) @ x = cross(v, x)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as unit quaternion (w,x,y,z) + translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", _quat_normalize(self.quat))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @staticmethod
    def identity():
        return Pose()

    @staticmethod
    def from_rt(R, t):
        return Pose(matrix_to_quat(R), np.asarray(t, dtype=float))

    @staticmethod
    def from_matrix(T):
        T = np.asarray(T, dtype=float)
        return Pose(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self):
        return quat_to_matrix(self.quat)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.R.T + self.t

    def inverse(self):
        qinv = np.array([self.quat[0], -self.quat[1], -self.quat[2], -self.quat[3]])
        return Pose(qinv, -(quat_to_matrix(qinv) @ self.t))

    def __matmul__(self, other):
        return compose(self, other)

    def almost_equal(self, other, tol=1e-9):
        return np.linalg.norm(log_map(compose(self.inverse(), other))) < tol


def compose(a: Pose, b: Pose) -> Pose:
    """Product of the two transforms (4x4 homogeneous matrix product)."""
    return Pose(quat_multiply(a.quat, b.quat), a.R @ b.t + a.t)


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    half = 0.5 * theta
    if theta < 1e-8:
        # sin(x)/x Taylor, keeps exp/log round-trips exact near identity
        w = 1.0 - half * half / 2.0
        s = 0.5 - half * half / 12.0
    else:
        w = np.cos(half)
        s = np.sin(half) / theta
    return _quat_normalize(np.concatenate(([w], s * phi)))


def so3_log(q):
    """Rotation vector of a unit quaternion.

    Angle pi is not special-cased: the canonical (w >= 0) storage fixes the
    axis sign, which is the documented tie-break.
    """
    w, v = q[0], np.asarray(q[1:])
    n = np.linalg.norm(v)
    if n < 1e-10:
        return 2.0 * v  # first-order: q ~ (1, phi/2)
    angle = 2.0 * np.arctan2(n, w)
    return (angle / n) * v


def so3_left_jacobian(phi):
    theta = np.linalg.norm(phi)
    P = hat(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * P + (P @ P) / 6.0
    a = (1.0 - np.cos(theta)) / theta ** 2
    b = (theta - np.sin(theta)) / theta ** 3
    return np.eye(3) + a * P + b * (P @ P)


def so3_left_jacobian_inv(phi):
    theta = np.linalg.norm(phi)
    P = hat(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * P + (P @ P) / 12.0
    cot_term = 1.0 / theta ** 2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * P + cot_term * (P @ P)


def exp_map(xi) -> Pose:
    """SE(3) exponential of a (phi, rho) tangent vector."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log_map(p: Pose):
    """Inverse of exp_map; log_map(identity) is exactly zero."""
    phi = so3_log(p.quat)
    rho = so3_left_jacobian_inv(phi) @ p.t
    return np.concatenate([phi, rho])


def adjoint(p: Pose):
    """6x6 Adj(T) with T exp(xi) T^-1 = exp(Adj(T) xi), (phi, rho) ordering."""
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, :3] = hat(p.t) @ R
    A[3:, 3:] = R
    return A


def _se3_Q(phi, rho):
    """Coupling block of the SE(3) left Jacobian (Barfoot-style closed form)."""
    theta = np.linalg.norm(phi)
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    if theta < 1e-4:
        t2 = theta * theta
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        c1 = (theta - np.sin(theta)) / theta ** 3
        c2 = (1.0 - theta ** 2 / 2.0 - np.cos(theta)) / theta ** 4
        c3 = (theta - np.sin(theta) - theta ** 3 / 6.0) / theta ** 5
    Q = (0.5 * Rh
         + c1 * (PR + RP + PRP)
         - c2 * (P @ PR + RP @ P - 3.0 * PRP)
         - 0.5 * (c2 - 3.0 * c3) * (PRP @ P + P @ PRP))
    return Q


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    J = so3_left_jacobian(phi)
    Q = _se3_Q(phi, rho)
    out = np.zeros((6, 6))
    out[:3, :3] = J
    out[3:, :3] = Q
    out[3:, 3:] = J
    return out


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_Q(phi, rho)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, :3] = -Jinv @ Q @ Jinv
    out[3:, 3:] = Jinv
    return out


def se3_right_jacobian(xi):
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def interpolate_pose(a: Pose, b: Pose, s: float) -> Pose:
    """Geodesic interpolation a * exp(s * log(a^-1 b)); endpoints exact."""
    if s == 0.0:
        return a
    if s == 1.0:
        return b
    return compose(a, exp_map(s * log_map(compose(a.inverse(), b))))


def pose_distance(a: Pose, b: Pose):
    """(translation distance in meters, geodesic rotation angle in radians)."""
    dt = float(np.linalg.norm(a.t - b.t))
    q_rel = quat_multiply(np.array([a.quat[0], -a.quat[1], -a.quat[2], -a.quat[3]]),
                          b.quat)
    dr = float(np.linalg.norm(so3_log(_quat_normalize(q_rel))))
    return dt, dr


def rotation_angle(R_or_pose):
    """Geodesic angle of a rotation matrix or of a Pose's rotation."""
    if isinstance(R_or_pose, Pose):
        return float(np.linalg.norm(so3_log(R_or_pose.quat)))
    return float(np.linalg.norm(so3_log(matrix_to_quat(R_or_pose))))
