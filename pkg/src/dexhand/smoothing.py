"""Parameterized trajectory smoothing for 88-dim action chunks.

Each channel is fit with a clamped cubic smoothing spline (fidelity plus
integrated squared curvature), chunk boundaries are stitched with quintic
minimum-jerk blends, and limit violations are handled by uniform time
dilation. Rotation channels (EE orientation as rotation vectors) are
processed in the tangent space around the chunk's first rotation so the
vector components can be smoothed independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.linalg import solveh_banded

from .geometry import (quat_conjugate, quat_multiply, quat_slerp,
                       quat_to_rotvec, rotvec_to_quat)

N_CHANNELS = 88


class SmoothingError(ValueError):
    pass


@dataclass(frozen=True)
class ActionLayout:
    """Channel bookkeeping for the 88-dim action vector.

    Order: arm joints (7 per arm), EE poses (translation + rotation
    vector per arm), hand joints (16 per hand), fingertip positions
    (5 fingers x 3 per hand). Left side first throughout.
    """
    groups: tuple = (
        ("arm_left", 0, 7), ("arm_right", 7, 14),
        ("ee_left", 14, 20), ("ee_right", 20, 26),
        ("hand_left", 26, 42), ("hand_right", 42, 58),
        ("fingertips_left", 58, 73), ("fingertips_right", 73, 88),
    )

    def __post_init__(self):
        spans = sorted((a, b) for _, a, b in self.groups)
        cursor = 0
        for a, b in spans:
            if a != cursor or b <= a:
                raise SmoothingError("layout groups must partition [0, 88)")
            cursor = b
        if cursor != N_CHANNELS:
            raise SmoothingError(f"layout covers [0, {cursor}), need 88")

    def group_range(self, name: str) -> range:
        for g, a, b in self.groups:
            if g == name:
                return range(a, b)
        raise KeyError(name)

    def group_of(self, channel: int) -> str:
        for g, a, b in self.groups:
            if a <= channel < b:
                return g
        raise IndexError(channel)

    @property
    def rotation_starts(self) -> tuple:
        # rotation-vector triples live in the back half of each EE pose
        return (self.group_range("ee_left")[3],
                self.group_range("ee_right")[3])

    def default_stiffness(self) -> np.ndarray:
        lam = np.empty(N_CHANNELS)
        for g, a, b in self.groups:
            if g.startswith("fingertips"):
                lam[a:b] = 1e-5
            else:
                lam[a:b] = 1e-4
        return lam


DEFAULT_LAYOUT = ActionLayout()


def _check_rotvecs(values: np.ndarray, layout: ActionLayout):
    for s in layout.rotation_starts:
        norms = np.linalg.norm(values[:, s:s + 3], axis=1)
        if np.any(norms > np.pi + 1e-6):
            raise SmoothingError("rotation-vector norm exceeds pi")


@dataclass(frozen=True)
class ActionChunk:
    k: int
    dt: float
    values: np.ndarray
    layout: ActionLayout = DEFAULT_LAYOUT

    def __post_init__(self):
        v = np.asarray(self.values, float)
        object.__setattr__(self, "values", v)
        if self.k < 1:
            raise SmoothingError("chunk length must be >= 1")
        if self.dt <= 0:
            raise SmoothingError("control period must be positive")
        if v.shape != (self.k, N_CHANNELS):
            raise SmoothingError(f"values must be {self.k}x{N_CHANNELS}, "
                                 f"got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SmoothingError("chunk contains non-finite values")
        _check_rotvecs(v, self.layout)


@dataclass
class SmootherState:
    """Boundary conditions carried across chunks, plus channel limits."""
    value: np.ndarray
    velocity: np.ndarray
    vel_limit: np.ndarray
    acc_limit: np.ndarray

    def __post_init__(self):
        self.value = np.asarray(self.value, float).copy()
        self.velocity = np.asarray(self.velocity, float).copy()
        self.vel_limit = np.broadcast_to(
            np.asarray(self.vel_limit, float), (N_CHANNELS,)).copy()
        self.acc_limit = np.broadcast_to(
            np.asarray(self.acc_limit, float), (N_CHANNELS,)).copy()
        for arr in (self.value, self.velocity):
            if arr.shape != (N_CHANNELS,):
                raise SmoothingError("state vectors must have 88 entries")
        if np.any(self.vel_limit <= 0) or np.any(self.acc_limit <= 0):
            raise SmoothingError("limits must be positive")

    @classmethod
    def rest(cls, value=None, vel_limit=10.0, acc_limit=200.0):
        v = np.zeros(N_CHANNELS) if value is None else np.asarray(value, float)
        return cls(v, np.zeros(N_CHANNELS), vel_limit, acc_limit)


@dataclass(frozen=True)
class SmoothedTrajectory:
    times: np.ndarray
    values: np.ndarray
    max_vel: np.ndarray
    max_acc: np.ndarray
    max_jerk: np.ndarray
    dilation: float = 1.0

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 \
            else 0.0


def fd_maxima(values: np.ndarray, dt: float):
    """Per-channel max |velocity|, |acceleration|, |jerk| by forward
    differences; the same recipe the diagnostics contract is tested
    against."""
    zeros = np.zeros(values.shape[1])
    if values.shape[0] < 2:
        return zeros, zeros.copy(), zeros.copy()
    vel = np.diff(values, axis=0) / dt
    mv = np.abs(vel).max(axis=0)
    ma = np.abs(np.diff(vel, axis=0)).max(axis=0) / dt \
        if vel.shape[0] > 1 else zeros.copy()
    mj = np.abs(np.diff(vel, 2, axis=0)).max(axis=0) / dt ** 2 \
        if vel.shape[0] > 2 else zeros.copy()
    return mv, ma, mj


def _to_tangent(values: np.ndarray, base_q: np.ndarray) -> np.ndarray:
    inv = quat_conjugate(base_q)
    out = np.empty_like(values)
    for i in range(values.shape[0]):
        out[i] = quat_to_rotvec(quat_multiply(inv, rotvec_to_quat(values[i])))
    return out


def _from_tangent(values: np.ndarray, base_q: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    for i in range(values.shape[0]):
        out[i] = quat_to_rotvec(quat_multiply(base_q, rotvec_to_quat(values[i])))
    return out


def _tangent_point(r: np.ndarray, base_q: np.ndarray) -> np.ndarray:
    return quat_to_rotvec(quat_multiply(quat_conjugate(base_q),
                                        rotvec_to_quat(r)))


def _hermite_quadrature(k: int, h: float) -> np.ndarray:
    """Gram matrix of integral y''^2 for a C1 cubic Hermite spline with
    knots at uniform spacing h. Unknowns interleaved [y0, m0, y1, m1, ...]."""
    n = 2 * k
    Q = np.zeros((n, n))
    # per-interval closed form in (y0, m0, y1, m1)
    local = np.array([
        [12 / h ** 3, 6 / h ** 2, -12 / h ** 3, 6 / h ** 2],
        [6 / h ** 2, 4 / h, -6 / h ** 2, 2 / h],
        [-12 / h ** 3, -6 / h ** 2, 12 / h ** 3, -6 / h ** 2],
        [6 / h ** 2, 2 / h, -6 / h ** 2, 4 / h],
    ])
    for i in range(k - 1):
        s = 2 * i
        Q[s:s + 4, s:s + 4] += local
    return Q


def _clamped_spline_fit(samples: np.ndarray, lam: np.ndarray, dt: float,
                        b_val: np.ndarray, b_vel: np.ndarray):
    """Solve the per-channel smoothing objective for a batch of channels
    sharing one stiffness value. samples is k x c. Returns (values k x c,
    end slope c)."""
    k, c = samples.shape
    lam_val = float(lam[0])
    if lam_val == 0.0:
        # fidelity-only objective: the spline interpolates the samples
        fitted = samples.copy()
        slope = (fitted[-1] - fitted[-2]) / dt if k > 1 else b_vel.copy()
        return fitted, slope
    Q = lam_val * _hermite_quadrature(k, dt)
    yidx = np.arange(0, 2 * k, 2)
    A = Q.copy()
    A[yidx, yidx] += 1.0
    b = np.zeros((2 * k, c))
    b[yidx] = samples
    # clamp x0 = boundary value, x1 = boundary velocity, eliminate them
    fixed = np.vstack([b_val, b_vel])
    free = np.arange(2, 2 * k)
    rhs = b[free] - A[np.ix_(free, [0, 1])] @ fixed
    Aff = A[np.ix_(free, free)]
    # symmetric banded solve; Hermite coupling spans adjacent knots only
    u = 3
    ab = np.zeros((u + 1, len(free)))
    for d in range(u + 1):
        ab[u - d, d:] = np.diagonal(Aff, offset=d)
    sol = solveh_banded(ab, rhs, lower=False)
    x = np.vstack([fixed, sol])
    return x[yidx], x[-1]


def fit_chunk(chunk: ActionChunk, state: SmootherState,
              stiffness=None):
    """Fit the smoothing spline to every channel and advance the boundary
    state. Returns (SmoothedTrajectory, SmootherState)."""
    layout = chunk.layout
    lam = layout.default_stiffness() if stiffness is None else \
        np.broadcast_to(np.asarray(stiffness, float), (N_CHANNELS,)).copy()
    if np.any(lam < 0):
        raise SmoothingError("stiffness must be non-negative")
    k, dt = chunk.k, chunk.dt
    values = chunk.values.copy()
    b_val = state.value.copy()
    b_vel = state.velocity.copy()

    # move rotation channels into the tangent space of the chunk's first
    # rotation; boundary values come along, boundary velocity is treated
    # as the tangent-space rate
    bases = {}
    for s in layout.rotation_starts:
        base_q = rotvec_to_quat(chunk.values[0, s:s + 3])
        bases[s] = base_q
        values[:, s:s + 3] = _to_tangent(chunk.values[:, s:s + 3], base_q)
        b_val[s:s + 3] = _tangent_point(state.value[s:s + 3], base_q)

    fitted = np.empty_like(values)
    end_slope = np.empty(N_CHANNELS)
    if k == 1:
        # degenerate chunk: emit the target directly, velocity from the
        # step to it
        fitted[0] = values[0]
        end_slope = (values[0] - b_val) / dt
    else:
        for lv in np.unique(lam):
            cols = np.nonzero(lam == lv)[0]
            f, s = _clamped_spline_fit(values[:, cols], lam[cols], dt,
                                       b_val[cols], b_vel[cols])
            fitted[:, cols] = f
            end_slope[cols] = s

    new_value = fitted[-1].copy()
    new_velocity = end_slope.copy()
    for s in layout.rotation_starts:
        fitted[:, s:s + 3] = _from_tangent(fitted[:, s:s + 3], bases[s])
        new_value[s:s + 3] = fitted[-1, s:s + 3]

    times = np.arange(k) * dt
    mv, ma, mj = fd_maxima(fitted, dt)
    traj = SmoothedTrajectory(times, fitted, mv, ma, mj)
    new_state = SmootherState(new_value, new_velocity,
                              state.vel_limit, state.acc_limit)
    return traj, new_state


def quintic_coeffs(p0, v0, a0, p1, v1, a1, T: float) -> np.ndarray:
    """Coefficients of the quintic matching position, velocity and
    acceleration at both ends, lowest order first. Vectorized over
    trailing dimensions."""
    p0, v0, a0 = np.asarray(p0, float), np.asarray(v0, float), np.asarray(a0, float)
    p1, v1, a1 = np.asarray(p1, float), np.asarray(v1, float), np.asarray(a1, float)
    T2, T3, T4, T5 = T ** 2, T ** 3, T ** 4, T ** 5
    c0, c1, c2 = p0, v0, a0 / 2.0
    d = p1 - p0 - v0 * T - 0.5 * a0 * T2
    dv = v1 - v0 - a0 * T
    da = a1 - a0
    c3 = (10 * d - 4 * dv * T + 0.5 * da * T2) / T3
    c4 = (-15 * d + 7 * dv * T - da * T2) / T4
    c5 = (6 * d - 3 * dv * T + 0.5 * da * T2) / T5
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3, c4, c5))


def quintic_eval(coeffs: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, float)
    out = np.zeros(t.shape + coeffs.shape[1:])
    for c in coeffs[::-1]:
        out = out * t[(...,) + (None,) * (coeffs.ndim - 1)] + c
    return out


def blend_boundary(state: SmootherState, chunk: ActionChunk,
                   horizon: Optional[int] = None) -> ActionChunk:
    """Replace the first few chunk samples with a quintic ramp from the
    previous boundary so the handoff is C2. Rotation channels blend in
    the tangent space of the chunk's first rotation."""
    k, dt = chunk.k, chunk.dt
    layout = chunk.layout
    h = min(10, max(1, k // 4)) if horizon is None else int(horizon)
    if h > k:
        raise SmoothingError("blend horizon exceeds chunk length")
    e = min(h, k - 1)
    if e == 0:
        return chunk

    values = chunk.values.copy()
    bases = {}
    b_val = state.value.copy()
    for s in layout.rotation_starts:
        base_q = rotvec_to_quat(chunk.values[0, s:s + 3])
        bases[s] = base_q
        values[:, s:s + 3] = _to_tangent(chunk.values[:, s:s + 3], base_q)
        b_val[s:s + 3] = _tangent_point(state.value[s:s + 3], base_q)

    if e + 1 < k:
        v_end = (values[e + 1] - values[e - 1]) / (2 * dt)
    else:
        v_end = (values[e] - values[e - 1]) / dt
    T = e * dt
    coeffs = quintic_coeffs(b_val, state.velocity, 0.0,
                            values[e], v_end, 0.0, T)
    t = np.arange(e + 1) * dt
    blended = quintic_eval(coeffs, t)
    out = values.copy()
    out[:e + 1] = blended
    for s in layout.rotation_starts:
        out[:, s:s + 3] = _from_tangent(out[:, s:s + 3], bases[s])
    return replace(chunk, values=out)


def enforce_limits(traj: SmoothedTrajectory, vel_limit,
                   acc_limit) -> SmoothedTrajectory:
    """Uniform time dilation until every channel satisfies its velocity
    and acceleration limits. Sample values are untouched; only the clock
    stretches."""
    vel_limit = np.broadcast_to(np.asarray(vel_limit, float), (N_CHANNELS,))
    acc_limit = np.broadcast_to(np.asarray(acc_limit, float), (N_CHANNELS,))
    if np.any(vel_limit <= 0) or np.any(acc_limit <= 0):
        raise SmoothingError("limits must be positive")
    gamma = max(1.0,
                float(np.max(traj.max_vel / vel_limit)),
                float(np.sqrt(max(np.max(traj.max_acc / acc_limit), 0.0))))
    if gamma == 1.0:
        return replace(traj, dilation=1.0)
    times = traj.times * gamma
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
    mv, ma, mj = fd_maxima(traj.values, dt) if dt > 0 else \
        (traj.max_vel * 0, traj.max_acc * 0, traj.max_jerk * 0)
    return SmoothedTrajectory(times, traj.values, mv, ma, mj,
                              dilation=gamma)


def rotvec_interpolate(r0: np.ndarray, r1: np.ndarray, u: float) -> np.ndarray:
    """Geodesic interpolation between two rotation vectors."""
    q0 = rotvec_to_quat(np.asarray(r0, float))
    q1 = rotvec_to_quat(np.asarray(r1, float))
    return quat_to_rotvec(quat_slerp(q0, q1, float(u)))
