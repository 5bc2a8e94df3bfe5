"""Camera models, coordinate frames and projection transforms.

The world frame is z-up with the ground plane at z = 0. The bird's-eye view
(BEV) is the orthographic projection onto that plane; the first-person view
(FPV) is a pinhole camera. All functions here are pure and operate on numpy
arrays with a trailing coordinate axis, so they broadcast over batches of
points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Minimum camera-frame depth (m) for a point to count as visible; avoids
# projecting through the image plane.
DEPTH_EPSILON = 0.1

# Default synthetic front camera.
DEFAULT_FOCAL = 800.0
DEFAULT_IMAGE_WIDTH = 1280
DEFAULT_IMAGE_HEIGHT = 720
DEFAULT_CAMERA_HEIGHT = 1.6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with a rigid world-to-camera transform.

    The camera frame follows the usual computer-vision convention: x right,
    y down, z along the optical axis (depth).
    """

    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    image_width: int
    image_height: int
    rotation: np.ndarray  # (3, 3), world -> camera
    translation: np.ndarray  # (3,), meters

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise GeometryError("focal lengths must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise GeometryError("image dimensions must be positive")
        if self.rotation.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {self.rotation.shape}")
        if self.translation.shape != (3,):
            raise GeometryError(f"translation must be a 3-vector, got {self.translation.shape}")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise GeometryError(f"rotation is not orthonormal (max deviation {err:.3e})")


@dataclass(frozen=True)
class AbsoluteFrame:
    """Sequence-constant reference frame: the target agent's first observed
    position and initial forward direction. It does not follow ego-motion."""

    origin: np.ndarray  # (3,)
    heading: float  # radians, in [-pi, pi)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        if self.origin.shape != (3,):
            raise GeometryError(f"origin must be a 3-vector, got {self.origin.shape}")
        if not (-math.pi <= self.heading < math.pi):
            raise GeometryError(f"heading {self.heading} outside [-pi, pi)")


def wrap_angle(theta: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def project_to_bev(points: np.ndarray) -> np.ndarray:
    """Orthographic ground-plane projection: drop z."""
    points = np.asarray(points, dtype=float)
    return points[..., :2].copy()


def world_to_camera(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Apply the rigid world-to-camera transform R p + t."""
    points = np.asarray(points, dtype=float)
    return points @ cam.rotation.T + cam.translation


def camera_depth(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    return world_to_camera(points, cam)[..., 2]


def project_to_fpv(points: np.ndarray, cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole-project world points to pixels.

    Returns (uv, visible): uv has shape (..., 2) and visible is the boolean
    mask from :func:`is_visible`. Rows with camera-frame depth below
    DEPTH_EPSILON get nan pixels (they are never visible).
    """
    pc = world_to_camera(points, cam)
    z = pc[..., 2]
    safe = z >= DEPTH_EPSILON
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.focal_x * pc[..., 0] / z + cam.principal_x
        v = cam.focal_y * pc[..., 1] / z + cam.principal_y
    uv = np.stack([u, v], axis=-1)
    uv = np.where(safe[..., None], uv, np.nan)
    in_image = (
        safe
        & (uv[..., 0] >= 0.0)
        & (uv[..., 0] <= cam.image_width)
        & (uv[..., 1] >= 0.0)
        & (uv[..., 1] <= cam.image_height)
    )
    return uv, in_image


def project_point_fpv(point, cam: CameraModel):
    """Scalar convenience wrapper: returns (u, v) or None when invisible."""
    uv, vis = project_to_fpv(np.asarray(point, dtype=float), cam)
    if not bool(vis):
        return None
    return float(uv[0]), float(uv[1])


def is_visible(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """True iff depth >= DEPTH_EPSILON and the pixel lies inside the closed
    image rectangle."""
    _, vis = project_to_fpv(points, cam)
    return vis


def rotation_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_absolute_frame(points: np.ndarray, frame: AbsoluteFrame) -> np.ndarray:
    """Express world points in the sequence's absolute frame: translate by
    -origin, then rotate by -heading about z."""
    points = np.asarray(points, dtype=float)
    return (points - frame.origin) @ rotation_z(-frame.heading).T


def from_absolute_frame(points: np.ndarray, frame: AbsoluteFrame) -> np.ndarray:
    """Inverse of :func:`to_absolute_frame`."""
    points = np.asarray(points, dtype=float)
    return points @ rotation_z(frame.heading).T + frame.origin


def default_camera(
    frame: AbsoluteFrame,
    focal: float = DEFAULT_FOCAL,
    image_width: int = DEFAULT_IMAGE_WIDTH,
    image_height: int = DEFAULT_IMAGE_HEIGHT,
    height: float = DEFAULT_CAMERA_HEIGHT,
) -> CameraModel:
    """Front camera mounted at the absolute-frame origin, facing the frame
    heading, at the given height above the ground plane."""
    h = frame.heading
    forward = np.array([math.cos(h), math.sin(h), 0.0])
    right = np.array([math.sin(h), -math.cos(h), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    rotation = np.stack([right, down, forward])
    position = frame.origin + np.array([0.0, 0.0, height])
    translation = -rotation @ position
    return CameraModel(
        focal_x=focal,
        focal_y=focal,
        principal_x=image_width / 2.0,
        principal_y=image_height / 2.0,
        image_width=image_width,
        image_height=image_height,
        rotation=rotation,
        translation=translation,
    )
