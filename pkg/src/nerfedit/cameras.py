"""Pinhole cameras, pose construction and ray generation.

Poses are 4x4 camera-to-world matrices, right-handed, camera looking along
its local -z axis (NeRF-synthetic convention). Pixel (i, j) means row i,
column j; rays go through pixel centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_cam = eye - target
    z_cam /= np.linalg.norm(z_cam)
    x_cam = np.cross(up, z_cam)
    n = np.linalg.norm(x_cam)
    if n < 1e-8:
        # Degenerate up direction; pick an arbitrary orthogonal axis.
        x_cam = np.cross(np.array([0.0, 1.0, 0.0]), z_cam)
        n = np.linalg.norm(x_cam)
    x_cam /= n
    y_cam = np.cross(z_cam, x_cam)
    pose = np.eye(4)
    pose[:3, 0] = x_cam
    pose[:3, 1] = y_cam
    pose[:3, 2] = z_cam
    pose[:3, 3] = eye
    return pose


@dataclass
class CameraRig:
    width: int
    height: int
    focal: float
    poses: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for k, pose in enumerate(self.poses):
            r = np.asarray(pose)[:3, :3]
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-5):
                raise ContractError(f"pose {k}: rotation block is not orthonormal")

    @property
    def camera_angle_x(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.focal)

    @property
    def n_views(self) -> int:
        return len(self.poses)


def focal_from_fov(width: int, fov_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * fov_x)


def orbit_rig(n_views: int, radius: float = 2.6, elevations_deg=(20.0, 40.0),
              width: int = 64, height: int = 64, fov_x: float = 1.0,
              start_azimuth: float = 0.0) -> CameraRig:
    """Cameras on one or more elevation rings around the origin."""
    elevations = np.atleast_1d(np.asarray(elevations_deg, dtype=np.float64))
    poses = []
    for k in range(n_views):
        azim = start_azimuth + 2.0 * math.pi * k / n_views
        elev = math.radians(float(elevations[k % len(elevations)]))
        eye = radius * np.array([
            math.cos(azim) * math.cos(elev),
            math.sin(azim) * math.cos(elev),
            math.sin(elev),
        ])
        poses.append(look_at(eye))
    return CameraRig(width, height, focal_from_fov(width, fov_x), poses)


def static_rig(n_views: int, **kwargs) -> CameraRig:
    """The same pose repeated; used by the consistency-metric sanity checks."""
    rig = orbit_rig(1, **kwargs)
    return CameraRig(rig.width, rig.height, rig.focal, [rig.poses[0].copy() for _ in range(n_views)])


def arc_rig(n_views: int, radius: float = 2.6, elevation_deg: float = 30.0,
            span_deg: float = 90.0, width: int = 64, height: int = 64,
            fov_x: float = 1.0, start_azimuth: float = 0.0) -> CameraRig:
    """A video-like camera path: one elevation, azimuths sweeping an arc.

    Frame distance grows monotonically with index separation, unlike a
    closed orbit where large separations wrap around; warp-consistency
    comparisons across baselines assume this.
    """
    poses = []
    for k in range(n_views):
        azim = start_azimuth + math.radians(span_deg) * k / max(n_views - 1, 1)
        elev = math.radians(elevation_deg)
        eye = radius * np.array([
            math.cos(azim) * math.cos(elev),
            math.sin(azim) * math.cos(elev),
            math.sin(elev),
        ])
        poses.append(look_at(eye))
    return CameraRig(width, height, focal_from_fov(width, fov_x), poses)


def rays_for_pose(pose: np.ndarray, width: int, height: int, focal: float,
                  pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins/unit directions for all pixels of a pose (or a subset).

    ``pixels``: optional integer array ``[M, 2]`` of (row, col). Without it,
    rays come back row-major for the whole image, shape ``[H*W, 3]``.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pixels is None:
        jj, ii = np.meshgrid(np.arange(width), np.arange(height))
        rows = ii.reshape(-1)
        cols = jj.reshape(-1)
    else:
        pixels = np.asarray(pixels)
        rows = pixels[:, 0]
        cols = pixels[:, 1]
    dirs_cam = np.stack([
        (cols + 0.5 - 0.5 * width) / focal,
        -(rows + 0.5 - 0.5 * height) / focal,
        -np.ones_like(rows, dtype=np.float64),
    ], axis=1)
    dirs = dirs_cam @ pose[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    return origins.astype(np.float32), dirs.astype(np.float32)


def ray_aabb(origins: np.ndarray, dirs: np.ndarray, aabb: np.ndarray,
             eps: float = 1e-9) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab intersection. Returns (t_near, t_far, hit) with t_near >= 0."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    lo, hi = np.asarray(aabb[0], dtype=np.float64), np.asarray(aabb[1], dtype=np.float64)
    inv = 1.0 / np.where(np.abs(dirs) < eps, np.copysign(eps, dirs) + np.where(dirs == 0, eps, 0), dirs)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    t_near = np.minimum(t0, t1).max(axis=1)
    t_far = np.maximum(t0, t1).min(axis=1)
    t_near = np.maximum(t_near, 0.0)
    hit = t_far > t_near + 1e-9
    return t_near.astype(np.float32), t_far.astype(np.float32), hit
