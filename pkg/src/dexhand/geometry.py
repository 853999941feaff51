"""Rigid-body geometry primitives: quaternions, poses, rotation vectors,
and capsule (segment) distance with analytic witness points."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, float)
    n = float(np.linalg.norm(v))
    if n < EPS:
        raise ValueError("cannot normalize near-zero vector")
    return v / n


# ---------------------------------------------------------------- quaternions
# Convention: (w, x, y, z), unit norm, scalar first.

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, float)
    n = float(np.linalg.norm(q))
    if n < EPS:
        raise ValueError("degenerate quaternion")
    q = q / n
    return -q if q[0] < 0.0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = normalize(axis)
    h = 0.5 * angle
    return np.concatenate(([math.cos(h)], math.sin(h) * axis))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    s = float(np.linalg.norm(q[1:]))
    if s < EPS:
        return np.zeros(3)
    angle = 2.0 * math.atan2(s, q[0])
    return (angle / s) * q[1:]


def rotvec_to_quat(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, float)
    angle = float(np.linalg.norm(r))
    if angle < EPS:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return quat_from_axis_angle(r / angle, angle)


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    return quat_to_matrix(rotvec_to_quat(r))


def matrix_to_rotvec(m: np.ndarray) -> np.ndarray:
    w = math.sqrt(max(0.0, 1.0 + m[0, 0] + m[1, 1] + m[2, 2])) / 2.0
    if w > 1e-8:
        x = (m[2, 1] - m[1, 2]) / (4 * w)
        y = (m[0, 2] - m[2, 0]) / (4 * w)
        z = (m[1, 0] - m[0, 1]) / (4 * w)
    else:
        # angle near pi: extract axis from the symmetric part
        d = np.diagonal(m)
        k = int(np.argmax(d))
        axis = np.sqrt(np.maximum(0.0, (d + 1.0 - (1.0 - d[k])) / 2.0))
        axis = np.zeros(3)
        axis[k] = math.sqrt(max(0.0, (m[k, k] + 1.0) / 2.0))
        for j in range(3):
            if j != k:
                axis[j] = m[k, j] / (2.0 * axis[k]) if axis[k] > EPS else 0.0
        axis = normalize(axis)
        x, y, z = axis * math.sin(math.acos(max(-1.0, min(1.0, w))))
    return quat_to_rotvec(quat_normalize(np.array([w, x, y, z])))


def quat_slerp(qa: np.ndarray, qb: np.ndarray, u: float) -> np.ndarray:
    qa = quat_normalize(qa)
    qb = quat_normalize(qb)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb, dot = -qb, -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(qa + u * (qb - qa))
    theta = math.acos(min(1.0, dot))
    s = math.sin(theta)
    return quat_normalize(
        (math.sin((1 - u) * theta) / s) * qa + (math.sin(u * theta) / s) * qb)


# ---------------------------------------------------------------------- poses
@dataclass(frozen=True)
class Pose:
    """Rigid transform: translation (m) + unit quaternion (w, x, y, z)."""

    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        t = np.asarray(self.translation, float).reshape(3)
        q = np.asarray(self.rotation, float).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("quaternion norm must be 1 within 1e-9")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        r = quat_to_matrix(self.rotation)
        return Pose(self.translation + r @ other.translation,
                    quat_normalize(quat_multiply(self.rotation, other.rotation)))

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        return Pose(-(quat_to_matrix(qi) @ self.translation), qi)

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.translation + quat_to_matrix(self.rotation) @ np.asarray(point, float)

    def flat(self) -> np.ndarray:
        """7-vector (x y z qw qx qy qz), the wire layout used everywhere."""
        return np.concatenate([self.translation, self.rotation])

    @staticmethod
    def from_flat(v) -> "Pose":
        v = np.asarray(v, float).reshape(7)
        return Pose(v[:3], quat_normalize(v[3:]))


# ------------------------------------------------------------------- capsules
def closest_segment_points(p1: np.ndarray, q1: np.ndarray,
                           p2: np.ndarray, q2: np.ndarray):
    """Closest points between segments [p1,q1] and [p2,q2].

    Returns (w1, w2, s, t) with w1 = p1 + s*(q1-p1), w2 = p2 + t*(q2-p2).
    Parallel segments pick the midpoint-overlap witness (stable subgradient).
    """
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a < EPS and e < EPS:
        return p1.copy(), p2.copy(), 0.0, 0.0
    if a < EPS:
        s = 0.0
        t = min(1.0, max(0.0, f / e))
    else:
        c = float(d1 @ r)
        if e < EPS:
            t = 0.0
            s = min(1.0, max(0.0, -c / a))
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            if denom > 1e-14 * a * e:
                s = min(1.0, max(0.0, (b * f - c * e) / denom))
            else:
                # parallel: center of the overlap interval
                s0 = min(1.0, max(0.0, -c / a))
                s1 = min(1.0, max(0.0, (b - c) / a))
                s = 0.5 * (s0 + s1)
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = min(1.0, max(0.0, -c / a))
            elif t > 1.0:
                t = 1.0
                s = min(1.0, max(0.0, (b - c) / a))
    w1 = p1 + s * d1
    w2 = p2 + t * d2
    return w1, w2, s, t


def batch_segment_closest(A1, B1, A2, B2):
    """Vectorized closest points between segment pairs (m x 3 arrays).
    Returns (W1, W2). Assumes non-degenerate segments."""
    D1 = B1 - A1
    D2 = B2 - A2
    R = A1 - A2
    a = np.einsum("ij,ij->i", D1, D1)
    e = np.einsum("ij,ij->i", D2, D2)
    f = np.einsum("ij,ij->i", D2, R)
    c = np.einsum("ij,ij->i", D1, R)
    b = np.einsum("ij,ij->i", D1, D2)
    denom = a * e - b * b
    para = denom <= 1e-14 * a * e
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    s0 = np.clip(-c / a, 0.0, 1.0)
    s1 = np.clip((b - c) / a, 0.0, 1.0)
    s = np.where(para, 0.5 * (s0 + s1), s)
    t = (b * s + f) / e
    s = np.where(t < 0.0, s0, np.where(t > 1.0, s1, s))
    t = np.clip(t, 0.0, 1.0)
    W1 = A1 + s[:, None] * D1
    W2 = A2 + t[:, None] * D2
    return W1, W2


def capsule_distance(p1, q1, r1: float, p2, q2, r2: float):
    """Signed clearance between two capsules and the witness points on
    their axes. Negative means interpenetration."""
    w1, w2, _, _ = closest_segment_points(
        np.asarray(p1, float), np.asarray(q1, float),
        np.asarray(p2, float), np.asarray(q2, float))
    d = float(np.linalg.norm(w1 - w2))
    return d - r1 - r2, w1, w2
