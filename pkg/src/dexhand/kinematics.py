"""Forward kinematics, underactuation expansion, and analytic Jacobians.

FK runs inside the retargeting hot loop, so link poses are carried as
(3x3 rotation, origin) arrays; Pose objects are built only on request.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_to_matrix
from .model import ACTIVE, FINGERS, HandModel


def expand(model: HandModel, q_active: np.ndarray) -> np.ndarray:
    """Fill the 21-vector: active entries copied, coupled entries solved
    through their four-bar couplings."""
    q_active = np.asarray(q_active, float)
    if not np.all(np.isfinite(q_active)):
        raise ValueError("q_active must be finite")
    full = np.zeros(len(model.joints))
    for qi, jid in zip(q_active, model.active_joints):
        full[model.joint_index[jid]] = qi
    for c in model.couplings:
        drv = full[model.joint_index[c.driver]]
        full[model.joint_index[c.driven]] = c.solve(float(drv))
    return full


def coupling_ratios(model: HandModel, q_active: np.ndarray,
                    full: np.ndarray = None) -> dict:
    """driven joint id -> (driver id, d(driven)/d(driver)) at q_active."""
    if full is None:
        full = expand(model, q_active)
    out = {}
    for c in model.couplings:
        _, r = c.solve_with_derivative(float(full[model.joint_index[c.driver]]))
        out[c.driven] = (c.driver, r)
    return out


class _FkPlan:
    """Per-model static structure for fast chained FK."""

    def __init__(self, model: HandModel):
        self.steps = []
        link_pos = {}
        for k, link in enumerate(model.links):
            link_pos[link.id] = k
            off_R = quat_to_matrix(link.offset.rotation)
            off_t = link.offset.translation
            trivial = np.allclose(off_R, np.eye(3)) and not off_t.any()
            if link.parent == "none":
                self.steps.append(("root", None, None, off_R, off_t, trivial))
            elif link.parent in model.link_index:
                self.steps.append(("link", link_pos[link.parent], None,
                                   off_R, off_t, trivial))
            else:
                jidx = model.joint_index[link.parent]
                j = model.joints[jidx]
                K = np.array([[0, -j.axis[2], j.axis[1]],
                              [j.axis[2], 0, -j.axis[0]],
                              [-j.axis[1], j.axis[0], 0]])
                self.steps.append(("joint", link_pos[j.parent_link],
                                   (jidx, j.id, j.axis, K, K @ K),
                                   off_R, off_t, trivial))
        self.tip_idx = {f: link_pos[l] for f, l in model.fingertip_frames.items()}
        self.link_pos = link_pos


def _plan(model: HandModel) -> _FkPlan:
    plan = getattr(model, "_fk_plan", None)
    if plan is None:
        plan = _FkPlan(model)
        model._fk_plan = plan
    return plan


@dataclass
class FkResult:
    model: HandModel
    link_R: list          # per-link world rotation, model link order
    link_p: list          # per-link world origin
    joint_origins: dict   # joint id -> (world origin, world axis)
    fingertips_world: dict   # finger -> world position
    fingertips_wrist: dict   # finger -> position in wrist frame
    full_q: np.ndarray

    def link_pose(self, link_id: str) -> Pose:
        k = _plan(self.model).link_pos[link_id]
        return _pose_from_rp(self.link_R[k], self.link_p[k])

    @property
    def fingertips(self) -> dict:
        out = {}
        for f, l in self.model.fingertip_frames.items():
            out[f] = self.link_pose(l)
        return out


def _pose_from_rp(R, p):
    w = np.sqrt(max(0.0, 1 + R[0, 0] + R[1, 1] + R[2, 2])) / 2
    if w > 1e-8:
        q = np.array([w, (R[2, 1] - R[1, 2]) / (4 * w),
                      (R[0, 2] - R[2, 0]) / (4 * w),
                      (R[1, 0] - R[0, 1]) / (4 * w)])
    else:
        from .geometry import matrix_to_rotvec, rotvec_to_quat
        q = rotvec_to_quat(matrix_to_rotvec(R))
    q = q / np.linalg.norm(q)
    return Pose(p.copy(), q)


def forward_kinematics(model: HandModel, q_active: np.ndarray,
                       wrist: Pose = None) -> FkResult:
    full = expand(model, q_active)
    plan = _plan(model)
    n = len(plan.steps)
    Rs = [None] * n
    ps = [None] * n
    joint_origins = {}
    if wrist is None:
        wR, wp = np.eye(3), np.zeros(3)
    else:
        wR, wp = quat_to_matrix(wrist.rotation), wrist.translation
    for k, (kind, pidx, jinfo, off_R, off_t, trivial) in enumerate(plan.steps):
        if kind == "root":
            bR, bp = wR, wp
        elif kind == "link":
            bR, bp = Rs[pidx], ps[pidx]
        else:
            jidx, jid, axis, K, KK = jinfo
            th = full[jidx]
            pR, pp = Rs[pidx], ps[pidx]
            Rj = np.eye(3) + np.sin(th) * K + (1.0 - np.cos(th)) * KK
            bR = pR @ Rj
            bp = pp
            joint_origins[jid] = (pp, pR @ axis)
        if trivial:
            Rs[k], ps[k] = bR, bp
        else:
            Rs[k] = bR @ off_R
            ps[k] = bp + bR @ off_t
    tips_world = {f: ps[plan.tip_idx[f]] for f in model.fingertip_frames}
    if wrist is None:
        tips_wrist = {f: p.copy() for f, p in tips_world.items()}
    else:
        tips_wrist = {f: wR.T @ (p - wp) for f, p in tips_world.items()}
    return FkResult(model, Rs, ps, joint_origins, tips_world, tips_wrist, full)


def point_jacobian(model: HandModel, fk: FkResult, link_id: str,
                   point_world: np.ndarray, ratios: dict) -> np.ndarray:
    """3 x n_active position Jacobian of a world point rigidly attached to a
    link, with the chain rule applied through the couplings."""
    n = len(model.active_joints)
    col = model.active_col
    jac = np.zeros((3, n))
    px, py, pz = point_world
    for jid in model.joint_chain(link_id):
        origin, axis = fk.joint_origins[jid]
        rx, ry, rz = px - origin[0], py - origin[1], pz - origin[2]
        ax, ay, az = axis
        contrib = np.array([ay * rz - az * ry,
                            az * rx - ax * rz,
                            ax * ry - ay * rx])
        j = model.joints[model.joint_index[jid]]
        if j.actuation == ACTIVE:
            jac[:, col[jid]] += contrib
        else:
            driver, ratio = ratios[jid]
            jac[:, col[driver]] += ratio * contrib
    return jac


def fingertip_jacobian(model: HandModel, q_active: np.ndarray,
                       fk: FkResult = None, ratios: dict = None) -> np.ndarray:
    """15 x 16 stacked fingertip-position Jacobian in the wrist frame
    (FK is evaluated with identity wrist), finger order thumb..little."""
    if fk is None:
        fk = forward_kinematics(model, q_active)
    if ratios is None:
        ratios = coupling_ratios(model, q_active, fk.full_q)
    rows = []
    for f in FINGERS:
        link = model.fingertip_frames[f]
        rows.append(point_jacobian(model, fk, link,
                                   fk.fingertips_world[f], ratios))
    return np.vstack(rows)


def kapandji_targets(model: HandModel) -> np.ndarray:
    """10 thumb-opposition landmarks (m, wrist frame) from the model's own
    geometry at its declared reference flexion: the four fingertips, the
    palmar surface at each middle-phalanx midpoint, and two palm landmarks."""
    fk = forward_kinematics(model, model.kapandji_flexion)
    targets = []
    opposing = [f for f in FINGERS if f != "thumb"]
    for f in opposing:
        targets.append(fk.fingertips_wrist[f].copy())
    caps_by_link = {c.link: c for c in model.collision_capsules}
    plan = _plan(model)
    for f in opposing:
        tip_link = model.fingertip_frames[f]
        chain = model.joint_chain(tip_link)
        # middle phalanx spans the last two joints of the finger chain
        pip_id, dip_id = chain[-2], chain[-1]
        p0, _ = fk.joint_origins[pip_id]
        p1, _ = fk.joint_origins[dip_id]
        mid = 0.5 * (p0 + p1)
        mid_link = model.joints[model.joint_index[pip_id]].child_link
        palmar = fk.link_R[plan.link_pos[mid_link]] @ np.array([0.0, -1.0, 0.0])
        r = caps_by_link[mid_link].radius if mid_link in caps_by_link else 0.0
        targets.append(mid + r * palmar)
    for p in model.palm_landmarks:
        targets.append(np.asarray(p, float))
    if len(targets) != 10:
        raise ValueError(f"expected 10 landmarks, got {len(targets)}")
    return np.array(targets)
