"""Fingertip-alignment retargeting: human (or source-robot) fingertips to
active joint commands on the target hand, solved as a constrained NLP.

Cost: wrist-to-fingertip alignment + thumb-to-fingertip relative alignment
+ regularization toward the previous solution; capsule clearance enters as
inequality constraints, joint limits as bounds.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import sqp
from .geometry import Pose, batch_segment_closest
from .kinematics import (coupling_ratios, fingertip_jacobian,
                         forward_kinematics, point_jacobian, _plan)
from .model import FINGERS, HandModel

# 21-keypoint layout: 0 = wrist, then 4 per finger (thumb..little),
# proximal to distal; fingertip of finger i sits at 4*i + 4.
N_KEYPOINTS = 21
TIP_INDEX = {f: 4 * i + 4 for i, f in enumerate(FINGERS)}

# collision pairs farther than this from the margin contribute a zero
# gradient row; they re-activate as soon as they approach
NEAR_MARGIN = 0.01


class RetargetError(ValueError):
    pass


@dataclass(frozen=True)
class HumanHandObservation:
    timestamp: float
    wrist: Pose
    keypoints: np.ndarray     # 21 x 3, wrist frame, m
    confidence: np.ndarray    # 21 values in [0, 1]
    source: str = "glove"

    def __post_init__(self):
        kp = np.asarray(self.keypoints, float).reshape(N_KEYPOINTS, 3)
        cf = np.asarray(self.confidence, float).reshape(N_KEYPOINTS)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "confidence", cf)
        for f, idx in TIP_INDEX.items():
            if cf[idx] > 0 and not np.all(np.isfinite(kp[idx])):
                raise RetargetError(f"non-finite {f} fingertip keypoint")

    def tip(self, finger: str) -> np.ndarray:
        return self.keypoints[TIP_INDEX[finger]]

    def tip_confidence(self, finger: str) -> float:
        return float(self.confidence[TIP_INDEX[finger]])


@dataclass(frozen=True)
class RetargetConfig:
    w_align: float = 1.0
    w_thumb: float = 0.5
    # alignment residuals are ~1e-4 m^2 while joint deltas are ~1 rad^2;
    # the regularizer must sit well below that gap to only break redundancy
    w_reg: float = 1e-6
    d_min: float = 0.003           # m
    scale: Optional[float] = None  # None: calibrate per session
    fingers: tuple = FINGERS       # enabled fingers
    joint_speed_clamp: float = 2.0  # rad/s, stream post-projection
    gap_threshold: float = 0.5     # s, stream segmentation
    min_confidence: float = 1e-6   # below this a fingertip is unavailable
    collisions: bool = True

    def __post_init__(self):
        if min(self.w_align, self.w_thumb, self.w_reg) < 0:
            raise ValueError("weights must be >= 0")
        if self.d_min < 0:
            raise ValueError("d_min must be >= 0")
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be > 0")


@dataclass
class RetargetSolution:
    q: np.ndarray
    residual: float          # RMS fingertip alignment error, m
    min_clearance: float     # m, +inf when no pairs are checked
    status: str
    solve_time: float
    held: bool = False


def _capsule_arrays(model: HandModel, fk):
    """World endpoints of every collision capsule, stacked (ncaps x 3)."""
    plan = _plan(model)
    n = len(model.collision_capsules)
    A = np.empty((n, 3))
    B = np.empty((n, 3))
    for k, cap in enumerate(model.collision_capsules):
        i = plan.link_pos[cap.link]
        R, p = fk.link_R[i], fk.link_p[i]
        A[k] = p + R @ cap.a
        B[k] = p + R @ cap.b
    return A, B


def pair_clearances(model: HandModel, fk):
    """Signed clearance per precomputed collision pair, plus witnesses."""
    A, B = _capsule_arrays(model, fk)
    I = model._pair_i
    J = model._pair_j
    W1, W2 = batch_segment_closest(A[I], B[I], A[J], B[J])
    dist = np.linalg.norm(W1 - W2, axis=1) - model._pair_rsum
    return dist, W1, W2


def min_clearance(model: HandModel, q: np.ndarray) -> float:
    if not model.collision_pairs:
        return np.inf
    fk = forward_kinematics(model, q)
    dist, _, _ = pair_clearances(model, fk)
    return float(dist.min())


def build_problem(model: HandModel, obs: HumanHandObservation,
                  cfg: RetargetConfig, q_prev: np.ndarray) -> sqp.NlpProblem:
    """Assemble the per-frame NLP. Targets are scaled human fingertip
    positions in the wrist frame; gradients run through the analytic
    fingertip Jacobian and the coupling chain rule."""
    enabled = []
    for f in cfg.fingers:
        if obs.tip_confidence(f) >= cfg.min_confidence:
            if not np.all(np.isfinite(obs.tip(f))):
                raise RetargetError(f"missing mandatory keypoint for {f}")
            enabled.append(f)
    if not enabled:
        raise RetargetError("no confident fingertip targets in observation")
    s = cfg.scale if cfg.scale is not None else 1.0
    targets = {f: s * obs.tip(f) for f in enabled}
    q_prev = np.asarray(q_prev, float).copy()
    fidx = {f: i for i, f in enumerate(FINGERS)}
    lo, hi = model.limits_lo_hi()
    cache = {}

    def evaluate(x):
        key = x.tobytes()
        hit = cache.get(key)
        if hit is not None:
            return hit
        fk = forward_kinematics(model, x)
        ratios = coupling_ratios(model, x, fk.full_q)
        J = fingertip_jacobian(model, x, fk, ratios)
        f_val = cfg.w_reg * float(np.sum((x - q_prev) ** 2))
        grad = 2.0 * cfg.w_reg * (x - q_prev)
        for f in enabled:
            r = fk.fingertips_wrist[f] - targets[f]
            Jf = J[3 * fidx[f]:3 * fidx[f] + 3]
            f_val += cfg.w_align * float(r @ r)
            grad += 2.0 * cfg.w_align * (Jf.T @ r)
        if cfg.w_thumb > 0 and "thumb" in enabled:
            Jt = J[0:3]
            pt = fk.fingertips_wrist["thumb"]
            for f in enabled:
                if f == "thumb":
                    continue
                r = (fk.fingertips_wrist[f] - pt) - (targets[f] - targets["thumb"])
                Jd = J[3 * fidx[f]:3 * fidx[f] + 3] - Jt
                f_val += cfg.w_thumb * float(r @ r)
                grad += 2.0 * cfg.w_thumb * (Jd.T @ r)
        gvals, gjac = None, None
        if cfg.collisions and model.collision_pairs:
            dist, W1, W2 = pair_clearances(model, fk)
            gvals = dist - cfg.d_min
            gjac = np.zeros((len(gvals), len(x)))
            links = [c.link for c in model.collision_capsules]
            for k in np.nonzero(gvals < NEAR_MARGIN)[0]:
                i, j = model.collision_pairs[k]
                delta = W1[k] - W2[k]
                nrm = float(np.linalg.norm(delta))
                nhat = delta / nrm if nrm > 1e-12 else np.zeros(3)
                J1 = point_jacobian(model, fk, links[i], W1[k], ratios)
                J2 = point_jacobian(model, fk, links[j], W2[k], ratios)
                gjac[k] = nhat @ (J1 - J2)
        out = (f_val, grad, gvals, gjac, fk, J)
        if len(cache) > 8:
            cache.clear()
        cache[key] = out
        return out

    def objective(x):
        out = evaluate(x)
        return out[0], out[1]

    ineq = None
    if cfg.collisions and model.collision_pairs:
        def ineq(x):
            out = evaluate(x)
            return out[2], out[3]

    def hessian0(x):
        # Gauss-Newton seed for the damped-BFGS loop: exact for the
        # quadratic regularizer, first-order for the alignment residuals
        J = evaluate(x)[5]
        n = len(x)
        B = 2.0 * cfg.w_reg * np.eye(n)
        Jt = J[0:3]
        for f in enabled:
            Jf = J[3 * fidx[f]:3 * fidx[f] + 3]
            B += 2.0 * cfg.w_align * (Jf.T @ Jf)
            if cfg.w_thumb > 0 and "thumb" in enabled and f != "thumb":
                Jd = Jf - Jt
                B += 2.0 * cfg.w_thumb * (Jd.T @ Jd)
        return B

    prob = sqp.NlpProblem(len(model.active_joints), objective,
                          inequalities=ineq, lb=lo, ub=hi, hessian0=hessian0)
    prob._evaluate = evaluate  # reused by retarget_frame for diagnostics
    prob._targets = targets
    prob._enabled = enabled
    return prob


DEFAULT_SETTINGS = sqp.SqpSettings(max_iter=60, kkt_tol=1e-5, feas_tol=1e-7,
                                   hessian_refresh=1)


RESTART_RESIDUAL = 2e-3  # m; retry from canned seeds above this


def _residual(model, prob, q):
    fk = forward_kinematics(model, q)
    errs = [np.linalg.norm(fk.fingertips_wrist[f] - prob._targets[f])
            for f in prob._enabled]
    return float(np.sqrt(np.mean(np.square(errs))))


def retarget_frame(model: HandModel, obs: HumanHandObservation,
                   cfg: RetargetConfig, q_prev: np.ndarray,
                   settings: sqp.SqpSettings = None,
                   restarts: int = 2) -> RetargetSolution:
    t0 = time.perf_counter()
    settings = settings or DEFAULT_SETTINGS
    q_prev = np.asarray(q_prev, float)
    try:
        prob = build_problem(model, obs, cfg, q_prev)
        free = prob
        if cfg.collisions and model.collision_pairs:
            free = build_problem(model, obs,
                                 replace(cfg, collisions=False), q_prev)
    except RetargetError:
        return RetargetSolution(q_prev.copy(), np.nan, np.nan, "hold",
                                time.perf_counter() - t0, held=True)
    lo, hi = model.limits_lo_hi()
    seeds = [q_prev, lo + 0.5 * (hi - lo), lo + 0.25 * (hi - lo),
             lo + 0.75 * (hi - lo)]
    best = None
    best_res = np.inf
    for k, seed in enumerate(seeds[:1 + max(0, restarts)]):
        # Two phases: a collision-free alignment solve finds the basin
        # cheaply, then the full constrained solve polishes from there.
        if free is not prob:
            pre = sqp.solve(free, seed, settings)
            if pre.status not in (sqp.NUMERICAL_FAILURE, sqp.INFEASIBLE_QP):
                seed = pre.x
        res = sqp.solve(prob, seed, settings)
        if res.status in (sqp.NUMERICAL_FAILURE, sqp.INFEASIBLE_QP):
            continue
        r = _residual(model, prob, res.x)
        if r < best_res:
            best, best_res = res, r
        if best_res < RESTART_RESIDUAL:
            break
    if best is None:
        return RetargetSolution(q_prev.copy(), np.nan, np.nan, res.status,
                                time.perf_counter() - t0, held=True)
    q = best.x
    status = best.status
    clr = min_clearance(model, q) if (cfg.collisions and model.collision_pairs) else np.inf
    # feasibility polish: a max-iter exit can leave a micrometer-scale
    # clearance deficit; warm restarts push it back inside the margin
    for _ in range(2):
        if clr >= cfg.d_min - 1e-9:
            break
        extra = sqp.solve(prob, q, settings)
        if extra.status in (sqp.NUMERICAL_FAILURE, sqp.INFEASIBLE_QP):
            break
        q = extra.x
        status = extra.status
        clr = min_clearance(model, q)
    # final projection: if a micrometer-scale deficit survives the warm
    # restarts, nudge along the numerical clearance gradient instead
    lo, hi = model.limits_lo_hi()
    for _ in range(5):
        if clr >= cfg.d_min - 1e-9 or not np.isfinite(clr):
            break
        grad = np.zeros_like(q)
        eps = 1e-7
        for i in range(q.size):
            qp = q.copy()
            qp[i] += eps
            qm = q.copy()
            qm[i] -= eps
            grad[i] = (min_clearance(model, qp) - min_clearance(model, qm)) / (2 * eps)
        norm2 = float(grad @ grad)
        if norm2 <= 0.0:
            break
        q = np.clip(q + (cfg.d_min - clr + 1e-8) * grad / norm2, lo, hi)
        clr = min_clearance(model, q)
    best_res = _residual(model, prob, q)
    return RetargetSolution(q, best_res, clr, status,
                            time.perf_counter() - t0)


def session_scale(model: HandModel, obs: HumanHandObservation) -> Optional[float]:
    """Robot/human middle-finger length ratio from one confident frame."""
    idx = list(range(4 * FINGERS.index("middle") + 1,
                     4 * FINGERS.index("middle") + 5))
    if np.any(obs.confidence[idx] < 0.5):
        return None
    pts = obs.keypoints[idx]
    human = float(sum(np.linalg.norm(pts[k + 1] - pts[k]) for k in range(3)))
    if human < 1e-6:
        return None
    fk = forward_kinematics(model, np.zeros(len(model.active_joints)))
    tip = model.fingertip_frames["middle"]
    chain = model.joint_chain(tip)
    mcp = fk.joint_origins[chain[0]][0]
    pts_r = [mcp] + [fk.joint_origins[j][0] for j in chain[2:]] \
        + [fk.fingertips_world["middle"]]
    robot = float(sum(np.linalg.norm(pts_r[k + 1] - pts_r[k])
                      for k in range(len(pts_r) - 1)))
    return robot / human


def retarget_stream(model: HandModel, observations, cfg: RetargetConfig,
                    settings: sqp.SqpSettings = None):
    """Warm-started streaming retarget with gap segmentation, zero-confidence
    hold, and per-frame joint speed clamping."""
    settings = settings or DEFAULT_SETTINGS
    rest = model.rest_config.copy()
    q_prev = rest.copy()
    t_prev = None
    scale = cfg.scale
    out = []
    for obs in observations:
        if t_prev is not None and obs.timestamp <= t_prev:
            raise RetargetError("timestamps must be strictly increasing")
        new_segment = t_prev is None or (obs.timestamp - t_prev) > cfg.gap_threshold
        if new_segment:
            q_prev = rest.copy()
        if scale is None:
            scale = session_scale(model, obs)
        frame_cfg = replace(cfg, scale=scale if scale is not None else 1.0)
        all_tips_dark = all(obs.tip_confidence(f) < frame_cfg.min_confidence
                            for f in frame_cfg.fingers)
        if all_tips_dark:
            sol = RetargetSolution(q_prev.copy(), np.nan, np.nan, "hold",
                                   0.0, held=True)
        else:
            sol = retarget_frame(model, obs, frame_cfg, q_prev, settings)
            if not sol.held and not new_segment and t_prev is not None:
                dt = obs.timestamp - t_prev
                lim = frame_cfg.joint_speed_clamp * dt
                sol.q = np.clip(sol.q, q_prev - lim, q_prev + lim)
        q_prev = sol.q.copy()
        t_prev = obs.timestamp
        out.append(sol)
    return out


def observation_from_tips(timestamp: float, wrist: Pose, tips: dict,
                          source: str = "robot") -> HumanHandObservation:
    """Observation carrying only fingertip keypoints (others zero conf)."""
    kp = np.zeros((N_KEYPOINTS, 3))
    cf = np.zeros(N_KEYPOINTS)
    for f, p in tips.items():
        kp[TIP_INDEX[f]] = np.asarray(p, float)
        cf[TIP_INDEX[f]] = 1.0
    return HumanHandObservation(timestamp, wrist, kp, cf, source)


def retarget_source_robot(model_target: HandModel, frames, cfg: RetargetConfig,
                          settings: sqp.SqpSettings = None):
    """Cross-embodiment retarget: frames are (wrist Pose, {finger: tip}) with
    1..5 mapped fingers; unmapped fingers follow rest-pose regularization.

    Returns (list of ActiveJointVector, list of RetargetSolution).
    """
    frames = list(frames)
    if not frames:
        return [], []
    mapped = sorted({f for _, tips in frames for f in tips},
                    key=lambda f: FINGERS.index(f))
    if not mapped:
        raise RetargetError("empty finger mapping")
    cfg = replace(cfg, fingers=tuple(mapped),
                  scale=cfg.scale if cfg.scale is not None else 1.0)
    obs_seq = [observation_from_tips(float(k), wrist, tips)
               for k, (wrist, tips) in enumerate(frames)]
    q_prev = model_target.rest_config.copy()
    qs, sols = [], []
    for obs in obs_seq:
        sol = retarget_frame(model_target, obs, cfg, q_prev,
                             settings or DEFAULT_SETTINGS)
        q_prev = sol.q.copy()
        qs.append(sol.q)
        sols.append(sol)
    return qs, sols


# ------------------------------------------------------------- wire format
def format_observation(obs: HumanHandObservation, precision: str = "full") -> str:
    """One line: timestamp, wrist pose (7), 21x3 keypoints, 21 confidences."""
    fmt = repr if precision == "full" else lambda v: f"{v:.9g}"
    vals = [obs.timestamp, *obs.wrist.flat(), *obs.keypoints.ravel(),
            *obs.confidence]
    return " ".join(fmt(float(v)) for v in vals)


def parse_observation(line: str, source: str = "glove") -> HumanHandObservation:
    v = np.array([float(x) for x in line.split()])
    if v.size != 1 + 7 + 3 * N_KEYPOINTS + N_KEYPOINTS:
        raise RetargetError(f"observation line needs 92 numbers, got {v.size}")
    return HumanHandObservation(
        float(v[0]), Pose.from_flat(v[1:8]),
        v[8:8 + 63].reshape(N_KEYPOINTS, 3), v[71:92], source)


def read_observation_stream(fh, source: str = "glove"):
    for line in fh:
        line = line.strip()
        if line and not line.startswith("#"):
            yield parse_observation(line, source)
