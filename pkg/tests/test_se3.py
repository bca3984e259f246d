import numpy as np
import pytest

from exblurf.errors import BranchCutError
from exblurf.se3 import (BezierTrajectory, Pose, Twist, bernstein_matrix, bernstein_weights,
                         blend_twists, d_pose_d_controls, exp_map, exp_map_batch, geodesic_angle,
                         init_trajectory, log_map, pose_at, se3_left_jacobian_batch, skew,
                         subframe_times)


def random_twists(rng, n, max_angle=np.pi - 0.1):
    axis = rng.normal(size=(n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    omega = axis * rng.uniform(0, max_angle, (n, 1))
    return np.concatenate([omega, rng.uniform(-5, 5, (n, 3))], axis=1)


def test_exp_identity_and_pure_translation():
    p = exp_map(Twist.from_vector(np.zeros(6)))
    assert np.array_equal(p.rotation, np.eye(3)) and np.array_equal(p.translation, np.zeros(3))
    p = exp_map(Twist(np.zeros(3), [1, 2, 3]))
    assert np.allclose(p.rotation, np.eye(3), atol=0)
    assert np.allclose(p.translation, [1, 2, 3], atol=1e-15)


def test_exp_quarter_turn_about_z():
    p = exp_map(Twist([0, 0, np.pi / 2], np.zeros(3)))
    expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], float)
    assert np.allclose(p.rotation, expected, atol=1e-15)
    assert np.allclose(p.translation, 0)


def test_exp_rejects_non_finite():
    with pytest.raises(ValueError):
        exp_map(Twist([np.nan, 0, 0], [0, 0, 0]))


def test_log_exp_roundtrip(rng):
    xi = random_twists(rng, 1000)
    for v in xi:
        back = log_map(exp_map(Twist.from_vector(v))).vector
        assert np.max(np.abs(back - v)) < 1e-9


def test_exp_log_roundtrip_small_angles(rng):
    for scale in (1e-9, 1e-7, 1e-5, 1e-3):
        for v in random_twists(rng, 50, max_angle=scale):
            pose = exp_map(Twist.from_vector(v))
            again = exp_map(log_map(pose))
            assert np.max(np.abs(again.matrix - pose.matrix)) < 1e-9


def test_log_identity_and_translation():
    assert np.array_equal(log_map(Pose.identity()).vector, np.zeros(6))
    xi = log_map(Pose(np.eye(3), [4, 0, 0]))
    assert np.allclose(xi.omega, 0) and np.allclose(xi.nu, [4, 0, 0])


def test_log_branch_cut():
    rot = exp_map(Twist([np.pi, 0, 0], [0, 0, 0])).rotation
    with pytest.raises(BranchCutError):
        log_map(Pose(rot, np.zeros(3)))
    near = exp_map(Twist([np.pi - 1e-3, 0, 0], [0, 0, 0]))
    assert abs(np.linalg.norm(log_map(near).omega) - (np.pi - 1e-3)) < 1e-9


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, 1.0 + 1e-6]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_pose_compose_inverse(rng):
    a = exp_map(Twist.from_vector(random_twists(rng, 1)[0]))
    ident = a.compose(a.inverse())
    assert np.allclose(ident.matrix, np.eye(4), atol=1e-12)
    pts = rng.normal(size=(5, 3))
    b = exp_map(Twist.from_vector(random_twists(rng, 1)[0]))
    assert np.allclose(a.compose(b).apply(pts), a.apply(b.apply(pts)))


@pytest.mark.parametrize("order", [1, 3, 5, 7, 9])
def test_bernstein_partition_of_unity(order):
    w = bernstein_matrix(order, np.linspace(0, 1, 101))
    assert np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
    assert np.all(w >= 0)


def test_bernstein_values():
    assert np.allclose(bernstein_weights(3, 0.5), [0.125, 0.375, 0.375, 0.125], atol=1e-15)
    assert np.array_equal(bernstein_weights(3, 0.0), [1, 0, 0, 0])
    with pytest.raises(ValueError):
        bernstein_weights(0, 0.5)
    with pytest.raises(ValueError):
        bernstein_weights(3, 1.5)


def test_bezier_endpoints_and_constant(rng):
    controls = random_twists(rng, 4, max_angle=1.0)
    traj = BezierTrajectory.from_array(controls)
    assert np.max(np.abs(pose_at(traj, 0.0).matrix - exp_map(traj.control_twists[0]).matrix)) < 1e-12
    assert np.max(np.abs(pose_at(traj, 1.0).matrix - exp_map(traj.control_twists[-1]).matrix)) < 1e-12
    anchor = exp_map(Twist.from_vector(controls[0]))
    const = init_trajectory(anchor, 5)
    for t in np.linspace(0, 1, 11):
        assert np.max(np.abs(pose_at(const, t).matrix - anchor.matrix)) < 1e-12


def test_trajectory_validation():
    with pytest.raises(ValueError):
        BezierTrajectory((Twist.from_vector(np.zeros(6)),) * 3, 3)
    with pytest.raises(ValueError):
        subframe_times(1)
    assert np.array_equal(subframe_times(3), [0.0, 0.5, 1.0])


def test_blend_matches_pose_at(rng):
    controls = random_twists(rng, 4, max_angle=1.0)
    traj = BezierTrajectory.from_array(controls)
    times = np.linspace(0, 1, 7)
    rot, trans = exp_map_batch(blend_twists(controls, times))
    for t, r, p in zip(times, rot, trans):
        ref = pose_at(traj, t)
        assert np.allclose(r, ref.rotation, atol=1e-14) and np.allclose(p, ref.translation)


def _left_delta(p_new: Pose, p_old: Pose) -> np.ndarray:
    d = p_new.compose(p_old.inverse())
    return log_map(d).vector


def test_d_pose_d_controls_finite_difference(rng):
    controls = random_twists(rng, 4, max_angle=1.5)
    traj = BezierTrajectory.from_array(controls)
    t = 0.37
    blocks = d_pose_d_controls(traj, t)
    base = pose_at(traj, t)
    h = 1e-6
    for j in range(4):
        num = np.zeros((6, 6))
        for k in range(6):
            plus = controls.copy()
            plus[j, k] += h
            minus = controls.copy()
            minus[j, k] -= h
            dp = _left_delta(pose_at(BezierTrajectory.from_array(plus), t), base)
            dm = _left_delta(pose_at(BezierTrajectory.from_array(minus), t), base)
            num[:, k] = (dp - dm) / (2 * h)
        assert np.max(np.abs(num - blocks[j])) < 1e-6


def test_left_jacobian_small_angle_continuity(rng):
    nu = rng.normal(size=3)
    for theta in (1e-8, 1e-4, 2.9e-2, 3.1e-2, 0.1):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        xi = np.concatenate([axis * theta, nu])
        jac = se3_left_jacobian_batch(xi)
        h = 1e-5
        num = np.zeros((6, 6))
        base_r, base_t = exp_map_batch(xi)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            rp, tp = exp_map_batch(xi + e)
            rm, tm = exp_map_batch(xi - e)
            # left increments: exp(d) = P(xi +- e) P(xi)^-1
            dp = log_map(Pose(rp @ base_r.T, tp - rp @ base_r.T @ base_t)).vector
            dm = log_map(Pose(rm @ base_r.T, tm - rm @ base_r.T @ base_t)).vector
            num[:, k] = (dp - dm) / (2 * h)
        assert np.max(np.abs(num - jac)) < 1e-6


def test_skew_and_geodesic():
    v = np.array([1.0, 2.0, 3.0])
    assert np.allclose(skew(v) @ np.array([4.0, 5.0, 6.0]), np.cross(v, [4, 5, 6]))
    r = exp_map(Twist([0, 0.3, 0], np.zeros(3))).rotation
    assert abs(geodesic_angle(np.eye(3), r) - 0.3) < 1e-12
