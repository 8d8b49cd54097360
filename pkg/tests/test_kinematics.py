import numpy as np
import pytest

from servopb.world.kinematics import (
    DEFAULT_GEOMETRY,
    IkError,
    chain_points,
    fk_nominal,
    grasp_rotation,
    ik_nominal,
    jacobian,
)


def sample_grasp_pose(rng):
    rr = rng.uniform(0.20, 0.28)
    az = rng.uniform(-0.55, 0.55)
    yaw = rng.uniform(-0.45, 0.45)
    z = rng.uniform(0.06, 0.12)
    return np.array([rr * np.cos(az), rr * np.sin(az), z]), grasp_rotation(yaw)


def test_zero_pose_is_stretched_along_x():
    p, r = fk_nominal(np.zeros(6))
    np.testing.assert_allclose(p, [DEFAULT_GEOMETRY.reach, 0.0, DEFAULT_GEOMETRY.d1],
                               atol=1e-15)
    np.testing.assert_allclose(r, np.eye(3), atol=1e-15)


def test_fk_is_smooth():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rng.uniform(-1.0, 1.0, 6)
        p0, _ = fk_nominal(q)
        i = rng.integers(0, 6)
        q2 = q.copy()
        q2[i] += 1e-6
        p1, _ = fk_nominal(q2)
        assert np.linalg.norm(p1 - p0) < 1e-5 * DEFAULT_GEOMETRY.reach


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(10):
        q = rng.uniform(-1.0, 1.0, 6)
        j = jacobian(q)
        eps = 1e-7
        for i in range(6):
            qp, qm = q.copy(), q.copy()
            qp[i] += eps
            qm[i] -= eps
            dp = (fk_nominal(qp)[0] - fk_nominal(qm)[0]) / (2 * eps)
            np.testing.assert_allclose(j[:3, i], dp, atol=1e-6)


def test_ik_round_trip_100_poses():
    # position error below 1e-6 m on randomly sampled reachable poses
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        pos, rot = sample_grasp_pose(rng)
        q = ik_nominal(pos, rot)
        p, r = fk_nominal(q)
        worst = max(worst, np.linalg.norm(p - pos))
        assert np.linalg.norm(p - pos) < 1e-6
        np.testing.assert_allclose(r, rot, atol=1e-5)
    assert worst < 1e-6


def test_ik_near_home_gives_small_angles():
    # a pose reachable with a gentle configuration keeps joints well inside limits
    pos = np.array([0.24, 0.0, 0.16])
    q = ik_nominal(pos, grasp_rotation(0.0))
    assert np.all(np.abs(q) < 2.0)
    p, _ = fk_nominal(q)
    np.testing.assert_allclose(p, pos, atol=1e-7)


def test_ik_unreachable_raises():
    with pytest.raises(IkError):
        ik_nominal(np.array([0.9, 0.0, 0.1]), grasp_rotation(0.0))


def test_ik_deterministic():
    pos = np.array([0.25, 0.06, 0.08])
    rot = grasp_rotation(0.2)
    np.testing.assert_array_equal(ik_nominal(pos, rot), ik_nominal(pos, rot))


def test_chain_points_start_at_base_end_at_hand():
    rng = np.random.default_rng(4)
    q = rng.uniform(-0.8, 0.8, 6)
    pts = chain_points(q)
    np.testing.assert_array_equal(pts[0], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(pts[-1], fk_nominal(q)[0], atol=1e-15)
    assert pts.shape[1] == 3 and pts.shape[0] >= 6


def test_grasp_rotation_is_orthonormal_and_down():
    for yaw in np.linspace(-0.5, 0.5, 7):
        r = grasp_rotation(yaw)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)
        np.testing.assert_allclose(r[:, 0], [0, 0, -1], atol=1e-14)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12
