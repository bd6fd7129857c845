"""Rotations, orthographic projection and the reprojection cycle.

Points are row vectors, so rotating an (N, 3) pose by ``R`` is ``coords @ R.T``.
Azimuth turns about the y axis, elevation about the x axis, composed as
``R = R_y(azimuth) @ R_x(elevation)``. Projection drops the depth column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import GeometryError
from .numerics import autodiff as ad
from .numerics.autodiff import Var
from .skeleton import Pose2D, Pose3D

AZIMUTH_LIMIT = 8.0 * np.pi / 9.0
ELEVATION_LIMIT = np.pi / 18.0


def rot_y(angle) -> np.ndarray:
    a = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    zero, one = np.zeros_like(a), np.ones_like(a)
    return np.stack(
        [np.stack([c, zero, s], -1), np.stack([zero, one, zero], -1), np.stack([-s, zero, c], -1)], -2
    )


def rot_x(angle) -> np.ndarray:
    a = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(a), np.sin(a)
    zero, one = np.zeros_like(a), np.ones_like(a)
    return np.stack(
        [np.stack([one, zero, zero], -1), np.stack([zero, c, -s], -1), np.stack([zero, s, c], -1)], -2
    )


def rotation_from_angles(azimuth, elevation) -> np.ndarray:
    return rot_y(azimuth) @ rot_x(elevation)


def sample_angles(rng: np.random.Generator, size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    azimuth = rng.uniform(-AZIMUTH_LIMIT, AZIMUTH_LIMIT, size=size)
    elevation = rng.uniform(-ELEVATION_LIMIT, ELEVATION_LIMIT, size=size)
    return azimuth, elevation


def sample_rotation(rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Random view rotation(s); shape (3, 3), or (size, 3, 3) when ``size`` is given."""
    return rotation_from_angles(*sample_angles(rng, size))


def check_rotation(R: np.ndarray, atol: float = 1e-9) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-2:] != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {R.shape}")
    eye = np.broadcast_to(np.eye(3), R.shape)
    if np.max(np.abs(R @ np.swapaxes(R, -1, -2) - eye)) > atol:
        raise GeometryError("matrix is not orthonormal")
    if np.max(np.abs(np.linalg.det(R) - 1.0)) > atol:
        raise GeometryError("matrix has determinant != 1")


def rotate(pose: Pose3D | np.ndarray, R: np.ndarray) -> Pose3D | np.ndarray:
    """Rotate every keypoint. ``R`` is (3, 3) or one matrix per batch element."""
    check_rotation(R)
    coords = pose.coords if isinstance(pose, Pose3D) else pose
    out = ad.rotate_points(np.asarray(coords, dtype=np.float64), R).value
    return Pose3D(out, pose.scale) if isinstance(pose, Pose3D) else out


def rotate90cw(pose: Pose3D | np.ndarray):
    """Quarter turn about y taking (x, y, z) to (z, y, -x)."""
    return rotate(pose, rot_y(np.pi / 2))


def assemble3d(Y: Pose2D | np.ndarray, z) -> Pose3D | np.ndarray:
    """Append predicted depths to the 2D keypoints."""
    coords = Y.coords if isinstance(Y, Pose2D) else np.asarray(Y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != coords.shape[:-1]:
        raise GeometryError(f"depths {z.shape} do not match pose {coords.shape[:-1]}")
    out = np.concatenate([coords, z[..., None]], axis=-1)
    return Pose3D(out, Y.scale) if isinstance(Y, Pose2D) else out


def project(pose: Pose3D | np.ndarray) -> Pose2D | np.ndarray:
    """Orthographic projection. The result is not re-centered or re-normalized."""
    if isinstance(pose, Pose3D):
        return Pose2D(np.asarray(pose.coords)[..., :2].copy(), pose.scale)
    return np.asarray(pose)[..., :2].copy()


# --- differentiable cycle --------------------------------------------------


def assemble_var(Y: Var, z: Var) -> Var:
    return ad.concat([Y, ad.reshape(z, z.shape + (1,))], axis=-1)


def project_var(P: Var) -> Var:
    return P[..., :2]


@dataclass
class CycleResult:
    z: Var  # depths lifted from Y
    y_tilde: Var  # rotated + projected pose
    z_tilde: Var  # depths lifted from y_tilde
    y_back: Var  # inverse-rotated + projected reconstruction of Y


def _renormalize(Y: Var, left_hip: int, right_hip: int) -> tuple[Var, np.ndarray]:
    # Offset and scale are treated as constants.
    v = Y.value
    mid = 0.5 * (v[:, left_hip, :] + v[:, right_hip, :])
    s = np.max(np.abs(v - mid[:, None, :]), axis=(1, 2))
    s = np.where(s > 0, s, 1.0)
    return (Y - mid[:, None, :]) * (1.0 / s)[:, None, None], s


def run_cycle(
    Y: Var,
    lift: Callable[[Var], Var],
    R: np.ndarray,
    renormalize: bool = False,
    hips: tuple[int, int] | None = None,
) -> CycleResult:
    """Lift, rotate, project, lift again, rotate back and project.

    ``lift`` maps a (B, N, 2) Var to (B, N) depths. ``R`` is (3, 3) or (B, 3, 3).
    With ``renormalize`` the rotated pose is re-centered on the hip midpoint and
    rescaled before the second lift; the recovered depths are scaled back.
    """
    z = lift(Y)
    y_tilde = project_var(ad.rotate_points(assemble_var(Y, z), R))
    if renormalize:
        if hips is None:
            raise GeometryError("renormalize needs the hip indices")
        y_in, s = _renormalize(y_tilde, *hips)
        z_tilde = lift(y_in) * s[:, None]
    else:
        z_tilde = lift(y_tilde)
    R_inv = np.swapaxes(np.asarray(R), -1, -2)
    y_back = project_var(ad.rotate_points(assemble_var(y_tilde, z_tilde), R_inv))
    return CycleResult(z=z, y_tilde=y_tilde, z_tilde=z_tilde, y_back=y_back)


def consistency_cycle(Y: Pose2D | np.ndarray, lifter: Callable, R: np.ndarray) -> tuple:
    """Array-level cycle for a plain lifter ``(B, N, 2) array -> (B, N) array``.

    Returns ``(Y_tilde, Y_back)`` with the same type as ``Y``.
    """
    check_rotation(R)
    coords = Y.coords if isinstance(Y, Pose2D) else np.asarray(Y, dtype=np.float64)
    single = coords.ndim == 2
    batch = coords[None] if single else coords

    def lift(v: Var) -> Var:
        out = lifter(v.value[0] if single else v.value)
        out = out.value if isinstance(out, Var) else np.asarray(out, dtype=np.float64)
        return Var(out[None] if single else out)

    res = run_cycle(Var(batch), lift, R)
    yt, yb = res.y_tilde.value, res.y_back.value
    if single:
        yt, yb = yt[0], yb[0]
    if isinstance(Y, Pose2D):
        return Pose2D(yt, Y.scale), Pose2D(yb, Y.scale)
    return yt, yb
