import dataclasses

import numpy as np

from dexhand.geometry import Pose, quat_to_matrix
from dexhand.kinematics import (coupling_ratios, expand, fingertip_jacobian,
                                forward_kinematics, kapandji_targets)
from dexhand.model import FINGERS, HandModel, load_reference_model

rng = np.random.default_rng(3)
MODEL = load_reference_model()


def random_q(margin=1e-3):
    lo, hi = MODEL.limits_lo_hi()
    return lo + margin + rng.random(16) * (hi - lo - 2 * margin)


# ------------------------------------------------------------------ expand
def test_expand_copies_active_and_fills_coupled():
    q = random_q()
    full = expand(MODEL, q)
    assert full.shape == (21,)
    for col, jid in enumerate(MODEL.active_joints):
        assert full[MODEL.joint_index[jid]] == q[col]
    for c in MODEL.couplings:
        driver_col = MODEL.active_col[c.driver]
        assert abs(full[MODEL.joint_index[c.driven]]
                   - c.solve(q[driver_col])) < 1e-12


def test_expand_idempotent_on_active_entries():
    q = random_q()
    full1 = expand(MODEL, q)
    active = np.array([full1[MODEL.joint_index[j]]
                       for j in MODEL.active_joints])
    full2 = expand(MODEL, active)
    assert np.allclose(full1, full2, atol=1e-12)


# ------------------------------------------------------------------ FK
def naive_fk_oracle(model: HandModel, q_active, wrist=None):
    """Independent 4x4 homogeneous matrix chain."""
    full = expand(model, q_active)
    mats = {}

    def joint_mat(j, angle):
        m = np.eye(4)
        u = j.axis / np.linalg.norm(j.axis)
        K = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
        m[:3, :3] = (np.eye(3) + np.sin(angle) * K
                     + (1 - np.cos(angle)) * K @ K)
        return m

    def pose_mat(p: Pose):
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(p.rotation)
        m[:3, 3] = p.translation
        return m

    joints_by_child = {j.child_link: j for j in model.joints}
    def link_mat(lid):
        if lid in mats:
            return mats[lid]
        link = model.links[model.link_index[lid]]
        if link.parent == "none":
            base = np.eye(4)
        elif link.parent in model.link_index:
            base = link_mat(link.parent)
        else:
            j = model.joints[model.joint_index[link.parent]]
            base = link_mat(j.parent_link) @ joint_mat(
                j, full[model.joint_index[j.id]])
        mats[lid] = base @ pose_mat(link.offset)
        return mats[lid]

    w = pose_mat(wrist) if wrist is not None else np.eye(4)
    out = {}
    for f, tip in model.fingertip_frames.items():
        out[f] = (w @ link_mat(tip))[:3, 3]
    return out


def test_fk_matches_selftest_goldens_at_zero():
    fk = forward_kinematics(MODEL, np.zeros(16))
    for f, p in MODEL.selftest.items():
        assert np.allclose(fk.fingertips_wrist[f], p, atol=1e-9), f


def test_fk_matches_independent_matrix_chain():
    for _ in range(20):
        q = random_q()
        fk = forward_kinematics(MODEL, q)
        oracle = naive_fk_oracle(MODEL, q)
        for f in FINGERS:
            assert np.allclose(fk.fingertips_wrist[f], oracle[f],
                               atol=1e-12), f


def test_fk_wrist_translation_equivariance():
    q = random_q()
    base = forward_kinematics(MODEL, q)
    shifted = forward_kinematics(MODEL, q,
                                 Pose(np.array([0.1, 0.0, 0.0])))
    for f in FINGERS:
        assert np.allclose(shifted.fingertips_world[f],
                           base.fingertips_world[f] + [0.1, 0, 0],
                           atol=1e-12)


def test_fk_rigid_transform_equivariance():
    q = random_q()
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    T = Pose(rng.normal(size=3) * 0.2, quat)
    a = forward_kinematics(MODEL, q, T)
    b = forward_kinematics(MODEL, q)
    for f in FINGERS:
        assert np.allclose(a.fingertips_world[f],
                           T.apply(b.fingertips_world[f]), atol=1e-12)


# ------------------------------------------------------------------ Jacobian
def test_jacobian_matches_central_differences():
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        q = random_q(margin=2 * h)
        fk = forward_kinematics(MODEL, q)
        ratios = coupling_ratios(MODEL, q, fk.full_q)
        J = fingertip_jacobian(MODEL, q, fk, ratios)
        assert J.shape == (15, 16)
        for col in range(16):
            qp, qm = q.copy(), q.copy()
            qp[col] += h
            qm[col] -= h
            fp = forward_kinematics(MODEL, qp)
            fm = forward_kinematics(MODEL, qm)
            fd = np.concatenate([
                (fp.fingertips_wrist[f] - fm.fingertips_wrist[f]) / (2 * h)
                for f in FINGERS])
            worst = max(worst, float(np.abs(J[:, col] - fd).max()))
    assert worst < 1e-5, worst


def test_jacobian_kinematic_independence():
    q = random_q()
    fk = forward_kinematics(MODEL, q)
    ratios = coupling_ratios(MODEL, q, fk.full_q)
    J = fingertip_jacobian(MODEL, q, fk, ratios)
    thumb_rows = slice(0, 3)
    little_cols = [MODEL.active_col[j] for j in MODEL.active_joints
                   if j.startswith("little")]
    assert np.all(J[thumb_rows, little_cols] == 0.0)


# ------------------------------------------------------------------ Kapandji
def test_kapandji_targets_finite_and_count():
    t = kapandji_targets(MODEL)
    assert t.shape == (10, 3)
    assert np.all(np.isfinite(t))


def test_kapandji_first_target_is_index_tip_at_reference_flexion():
    t = kapandji_targets(MODEL)
    fk = forward_kinematics(MODEL, MODEL.kapandji_flexion)
    assert np.allclose(t[0], fk.fingertips_wrist["index"], atol=1e-12)


def mirror_model(m: HandModel) -> HandModel:
    """Reflect across the x=0 plane: positions flip x, joint axes map to
    -M u so identical joint values produce mirrored motion."""
    M = np.diag([-1.0, 1.0, 1.0])

    def mirror_pose(p: Pose):
        w, x, y, z = p.rotation
        return Pose(M @ p.translation, np.array([w, x, -y, -z]))

    joints = [dataclasses.replace(j, axis=-(M @ j.axis)) for j in m.joints]
    links = [dataclasses.replace(l, offset=mirror_pose(l.offset))
             for l in m.links]
    caps = [dataclasses.replace(c, a=M @ c.a, b=M @ c.b)
            for c in m.collision_capsules]
    landmarks = [M @ np.asarray(p, float) for p in m.palm_landmarks]
    return HandModel(m.name + "_mirror", "left", joints, links, m.couplings,
                     m.fingertip_frames, caps, m.overall_dims,
                     m.rest_config, m.kapandji_flexion, landmarks,
                     {f: M @ np.asarray(p, float)
                      for f, p in m.selftest.items()})


def test_kapandji_targets_mirror_to_x_reflection():
    mirrored = mirror_model(MODEL)
    a = kapandji_targets(MODEL)
    b = kapandji_targets(mirrored)
    M = np.diag([-1.0, 1.0, 1.0])
    assert np.allclose(b, a @ M, atol=1e-9)
