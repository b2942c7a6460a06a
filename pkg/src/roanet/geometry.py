"""Pinhole camera model and 3D-box projection.

Boxes live in the ego frame (x forward, y left, z up); extrinsics map ego
coordinates into the camera frame (x right, y down, z along the optical
axis). Projection is the classic pinhole u = fx*x/z + cx, v = fy*y/z + cy.
"""

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-6


class BehindCamera(ValueError):
    """Point projects behind the near plane."""


class InvalidRotation(ValueError):
    """Matrix is not orthonormal with determinant +1."""


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")


class Extrinsics:
    """Rigid ego->camera transform: p_cam = rotation @ p_ego + translation."""

    def __init__(self, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError("extrinsics need a 3x3 rotation and a 3-vector translation")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > _ORTHO_TOL:
            raise InvalidRotation("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(rotation) - 1.0) > _ORTHO_TOL:
            raise InvalidRotation("rotation determinant is not +1 within 1e-6")
        self.rotation = rotation
        self.translation = translation

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


class Box3D:
    """Ego-frame cuboid: center (m), size (length, width, height), yaw about ego z."""

    def __init__(self, center, size, yaw, label=None):
        self.center = np.asarray(center, dtype=np.float64)
        self.size = tuple(float(s) for s in size)
        self.yaw = float(yaw)
        self.label = label
        if self.center.shape != (3,):
            raise ValueError("box center must be a 3-vector")
        if len(self.size) != 3 or any(s <= 0 for s in self.size):
            raise ValueError(f"box size components must be positive, got {self.size}")


@dataclass
class Rect2D:
    """Pixel-space axis-aligned rectangle, already clamped to image bounds."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError(f"degenerate rect {self}")


def box_corners(box):
    """The 8 ego-frame corners of the yaw-rotated cuboid, (8, 3)."""
    length, width, height = box.size
    signs = np.array(
        [[sx, sy, sz] for sx in (-0.5, 0.5) for sy in (-0.5, 0.5) for sz in (-0.5, 0.5)]
    )
    local = signs * np.array([length, width, height])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def project_point(p_ego, extr, intr, near=0.1):
    """Project an ego-frame point; returns (u, v, depth).

    Raises BehindCamera when the camera-frame depth falls below `near`.
    """
    p_cam = extr.rotation @ np.asarray(p_ego, dtype=np.float64) + extr.translation
    depth = p_cam[2]
    if depth < near:
        raise BehindCamera(f"point depth {depth:.4f} m is in front of the near plane ({near} m)")
    u = intr.fx * p_cam[0] / depth + intr.cx
    v = intr.fy * p_cam[1] / depth + intr.cy
    return u, v, depth


def unproject_point(u, v, depth, extr, intr):
    """Inverse of project_point: pixel + depth back to the ego frame."""
    x = (u - intr.cx) * depth / intr.fx
    y = (v - intr.cy) * depth / intr.fy
    p_cam = np.array([x, y, depth])
    return extr.rotation.T @ (p_cam - extr.translation)


def project_box(box, extr, intr, near=0.1):
    """Axis-aligned image hull of a box's visible corners.

    Corners closer than `near` are discarded; the hull of the surviving
    projections is clamped to the image. Returns a Rect2D, or None when
    fewer than two corners survive or the clamped hull has zero area.
    """
    corners_cam = box_corners(box) @ extr.rotation.T + extr.translation
    visible = corners_cam[corners_cam[:, 2] >= near]
    if visible.shape[0] < 2:
        return None
    us = intr.fx * visible[:, 0] / visible[:, 2] + intr.cx
    vs = intr.fy * visible[:, 1] / visible[:, 2] + intr.cy
    u_min = max(us.min(), 0.0)
    v_min = max(vs.min(), 0.0)
    u_max = min(us.max(), float(intr.width))
    v_max = min(vs.max(), float(intr.height))
    if u_min >= u_max or v_min >= v_max:
        return None
    return Rect2D(u_min, v_min, u_max, v_max)
