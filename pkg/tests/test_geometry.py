import numpy as np
import pytest

from oracles import euler_x, euler_y
from poselift.errors import GeometryError
from poselift.geometry import (
    AZIMUTH_LIMIT,
    ELEVATION_LIMIT,
    assemble3d,
    check_rotation,
    consistency_cycle,
    project,
    rot_x,
    rot_y,
    rotate,
    rotate90cw,
    rotation_from_angles,
    sample_angles,
    sample_rotation,
)
from poselift.skeleton import Pose2D, Pose3D


def test_angle_ranges():
    az, el = sample_angles(np.random.default_rng(0), size=100_000)
    assert az.min() >= -AZIMUTH_LIMIT and az.max() <= AZIMUTH_LIMIT
    assert el.min() >= -ELEVATION_LIMIT and el.max() <= ELEVATION_LIMIT
    assert AZIMUTH_LIMIT == pytest.approx(8 * np.pi / 9) and ELEVATION_LIMIT == pytest.approx(np.pi / 18)
    # Uniform: the sample nearly fills the range.
    assert az.max() - az.min() > 0.999 * 2 * AZIMUTH_LIMIT


def test_samples_are_rotations():
    R = sample_rotation(np.random.default_rng(1), size=10_000)
    eye = np.eye(3)
    assert np.max(np.abs(R @ np.swapaxes(R, 1, 2) - eye)) < 1e-9
    assert np.max(np.abs(np.linalg.det(R) - 1)) < 1e-9
    check_rotation(R)


def test_composition_matches_explicit_matrices(rng):
    for _ in range(20):
        a, e = rng.uniform(-3, 3, size=2)
        np.testing.assert_allclose(rotation_from_angles(a, e), euler_y(a) @ euler_x(e), atol=1e-15)
    np.testing.assert_array_equal(rotation_from_angles(0.0, 0.0), np.eye(3))
    np.testing.assert_allclose(rot_y([0.1, 0.2])[1], euler_y(0.2))
    np.testing.assert_allclose(rot_x([0.1, 0.2])[0], euler_x(0.1))


def test_check_rotation_rejects():
    with pytest.raises(GeometryError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(GeometryError):
        check_rotation(2 * np.eye(3))
    with pytest.raises(GeometryError):
        check_rotation(np.eye(2))
    with pytest.raises(GeometryError):
        rotate(np.zeros((16, 3)), np.diag([1.0, 2.0, 1.0]))


def test_rotate_examples(rng):
    P = rng.normal(size=(16, 3))
    np.testing.assert_array_equal(rotate(P, np.eye(3)), P)
    x, y, z = P.T
    np.testing.assert_allclose(rotate90cw(P), np.stack([z, y, -x], -1), atol=1e-15)
    R = sample_rotation(rng)
    assert np.max(np.abs(rotate(rotate(P, R), R.T) - P)) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(rotate(P, R), axis=-1), np.linalg.norm(P, axis=-1), atol=1e-12)


def test_rotate_batch_with_per_pose_matrices(rng):
    P = rng.normal(size=(5, 16, 3))
    R = sample_rotation(rng, size=5)
    out = rotate(Pose3D(P, np.ones(5)), R)
    for i in range(5):
        np.testing.assert_allclose(out.coords[i], P[i] @ R[i].T, atol=1e-15)


def test_quarter_turn_identities(rng):
    # project(rotate(+-90 deg or 180 deg)) on 10^4 poses, exact up to rounding of cos(pi/2).
    P = rng.uniform(-1, 1, size=(10_000, 16, 3))
    x, y, z = P[..., 0], P[..., 1], P[..., 2]
    eps = np.finfo(float).eps
    cw = project(rotate90cw(P))
    assert np.max(np.abs(cw - np.stack([z, y], -1))) <= 4 * eps
    acw = project(rotate(P, rot_y(-np.pi / 2)))
    assert np.max(np.abs(acw - np.stack([-z, y], -1))) <= 4 * eps
    half = project(rotate(P, rot_y(np.pi)))
    assert np.max(np.abs(half - np.stack([-x, y], -1))) <= 4 * eps


def test_assemble_and_project(rng):
    Y = Pose2D(rng.normal(size=(16, 2)), 2.0)
    z = rng.normal(size=16)
    P = assemble3d(Y, z)
    assert isinstance(P, Pose3D) and P.scale == 2.0
    proj = project(P)
    np.testing.assert_array_equal(proj.coords, Y.coords)
    with pytest.raises(GeometryError):
        assemble3d(Y, z[:5])


def test_projection_not_renormalized():
    P = np.zeros((16, 3))
    P[0] = [3.0, 0.0, 0.0]
    assert project(P)[0, 0] == 3.0


def _oracle_lifter(gt_norm: np.ndarray, R: np.ndarray):
    """Returns true depth for Y and, on the second call, true depth of the rotated pose."""
    rotated = np.einsum("bij,bnj->bni", R, gt_norm)
    answers = iter([gt_norm[..., 2], rotated[..., 2]])
    return lambda _: next(answers)


def test_cycle_closes_with_oracle_lifter(small_dataset, rng):
    gt = small_dataset.gt3d / small_dataset.scale[:, None, None]
    Y = small_dataset.poses
    R = sample_rotation(rng, size=len(Y))
    Yt, Yb = consistency_cycle(Y, _oracle_lifter(gt, R), R)
    assert np.max(np.abs(Yb - Y)) < 1e-10
    np.testing.assert_allclose(Yt, np.einsum("bij,bnj->bni", R, gt)[..., :2], atol=1e-12)


def test_cycle_identity_rotation_keeps_xy(rng):
    Y = Pose2D(rng.uniform(-1, 1, size=(16, 2)), 5.0)
    Yt, Yb = consistency_cycle(Y, lambda c: np.sin(c[..., 0]), np.eye(3))
    assert isinstance(Yt, Pose2D)
    np.testing.assert_array_equal(Yt.coords, Y.coords)
    np.testing.assert_array_equal(Yb.coords, Y.coords)
