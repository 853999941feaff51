import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from dexhand.geometry import (Pose, batch_segment_closest, capsule_distance,
                              closest_segment_points, matrix_to_rotvec,
                              quat_multiply, quat_slerp, quat_to_matrix,
                              quat_to_rotvec, rotvec_to_matrix,
                              rotvec_to_quat)

rng = np.random.default_rng(42)


def random_quat():
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def test_quat_matrix_against_scipy():
    for _ in range(50):
        q = random_quat()
        ours = quat_to_matrix(q)
        theirs = Rotation.from_quat(np.roll(q, -1)).as_matrix()
        assert np.allclose(ours, theirs, atol=1e-12)


def test_rotvec_round_trip():
    for _ in range(50):
        r = rng.normal(size=3)
        r = r / np.linalg.norm(r) * rng.uniform(0, np.pi - 1e-3)
        back = quat_to_rotvec(rotvec_to_quat(r))
        assert np.allclose(back, r, atol=1e-12)


def test_rotvec_matrix_against_scipy():
    for _ in range(50):
        r = rng.normal(size=3) * 0.8
        assert np.allclose(rotvec_to_matrix(r),
                           Rotation.from_rotvec(r).as_matrix(), atol=1e-12)
        assert np.allclose(matrix_to_rotvec(rotvec_to_matrix(r)), r,
                           atol=1e-10)


def test_quat_multiply_matches_matrix_product():
    qa, qb = random_quat(), random_quat()
    m = quat_to_matrix(quat_multiply(qa, qb))
    assert np.allclose(m, quat_to_matrix(qa) @ quat_to_matrix(qb),
                       atol=1e-12)


def test_slerp_endpoints_and_midpoint():
    qa, qb = random_quat(), random_quat()
    assert np.allclose(np.abs(quat_slerp(qa, qb, 0.0) @ qa), 1.0)
    assert np.allclose(np.abs(quat_slerp(qa, qb, 1.0) @ qb), 1.0)
    qm = quat_slerp(qa, qb, 0.5)
    # midpoint is equidistant in angle from both ends
    da = 2 * np.arccos(min(1.0, abs(qm @ qa)))
    db = 2 * np.arccos(min(1.0, abs(qm @ qb)))
    assert abs(da - db) < 1e-10


def test_pose_compose_inverse():
    a = Pose(rng.normal(size=3), random_quat())
    b = Pose(rng.normal(size=3), random_quat())
    p = rng.normal(size=3)
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)),
                       atol=1e-12)
    assert np.allclose(a.compose(a.inverse()).apply(p), p, atol=1e-12)


def test_pose_rejects_unnormalized_quaternion():
    with pytest.raises(ValueError):
        Pose(np.zeros(3), np.array([1.0, 0.1, 0.0, 0.0]))


def test_pose_flat_round_trip():
    a = Pose(rng.normal(size=3), random_quat())
    b = Pose.from_flat(a.flat())
    assert np.allclose(a.translation, b.translation)
    # from_flat canonicalizes the quaternion sign
    assert np.allclose(np.abs(a.rotation @ b.rotation), 1.0)


def brute_segment_distance(p1, q1, p2, q2, n=400):
    t = np.linspace(0, 1, n)
    a = p1[None] + t[:, None] * (q1 - p1)[None]
    b = p2[None] + t[:, None] * (q2 - p2)[None]
    d = np.linalg.norm(a[:, None] - b[None, :], axis=2)
    return d.min()


def test_segment_distance_against_brute_force():
    for _ in range(30):
        p1, q1, p2, q2 = (rng.normal(size=3) for _ in range(4))
        w1, w2, _, _ = closest_segment_points(p1, q1, p2, q2)
        d = np.linalg.norm(w1 - w2)
        assert d <= brute_segment_distance(p1, q1, p2, q2) + 1e-3
        # witnesses must lie on the segments
        for w, a, b in ((w1, p1, q1), (w2, p2, q2)):
            t = (w - a) @ (b - a) / max((b - a) @ (b - a), 1e-12)
            assert -1e-9 <= t <= 1 + 1e-9
            assert np.linalg.norm(a + t * (b - a) - w) < 1e-9


def test_parallel_segments_no_nan():
    p1, q1 = np.zeros(3), np.array([1.0, 0, 0])
    p2, q2 = np.array([0.0, 1, 0]), np.array([1.0, 1, 0])
    w1, w2, _, _ = closest_segment_points(p1, q1, p2, q2)
    assert np.all(np.isfinite(w1)) and np.all(np.isfinite(w2))
    assert abs(np.linalg.norm(w1 - w2) - 1.0) < 1e-12


def test_capsule_distance_analytic():
    # unit-separated parallel capsules of radii 0.1 and 0.2
    d, _, _ = capsule_distance(np.zeros(3), np.array([1.0, 0, 0]), 0.1,
                               np.array([0.0, 1, 0]),
                               np.array([1.0, 1, 0]), 0.2)
    assert abs(d - 0.7) < 1e-12


def test_batch_segment_matches_scalar():
    n = 40
    A1, B1 = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    A2, B2 = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    W1, W2 = batch_segment_closest(A1, B1, A2, B2)
    for i in range(n):
        w1, w2, _, _ = closest_segment_points(A1[i], B1[i], A2[i], B2[i])
        assert abs(np.linalg.norm(W1[i] - W2[i])
                   - np.linalg.norm(w1 - w2)) < 1e-9
