"""Rigid transforms, pinhole projection and lidar depth rasterization.

Frames: the ego frame has x forward, y left and z up, with z = 0 on the
ground plane. The camera frame has z forward, x right and y down.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

Z_EPS = 1e-6
ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise GeometryError(f"invalid intrinsics: non-finite value in {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"invalid intrinsics: fx={self.fx}, fy={self.fy} must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


class Pose:
    """4x4 homogeneous rigid transform mapping points from one frame to another."""

    def __init__(self, matrix):
        m = np.array(matrix, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise GeometryError(f"pose must be 4x4, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("pose contains non-finite values")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise GeometryError(f"pose last row must be [0,0,0,1], got {m[3].tolist()}")
        r = m[:3, :3]
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > ORTHO_TOL or np.linalg.det(r) < 0:
            raise GeometryError(f"pose rotation is not orthonormal (max deviation {err:.3g})")
        self.matrix = m

    @classmethod
    def from_rt(cls, rotation, translation):
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def identity(cls):
        return cls(np.eye(4))

    @property
    def rotation(self):
        return self.matrix[:3, :3]

    @property
    def translation(self):
        return self.matrix[:3, 3]

    def inverse(self):
        r = self.rotation
        return Pose.from_rt(r.T, -r.T @ self.translation)

    def __matmul__(self, other):
        return Pose(self.matrix @ other.matrix)

    def __repr__(self):
        return f"Pose({self.matrix.tolist()!r})"


@dataclass
class PointCloud:
    """N x C points; columns 0-2 are x, y, z in meters in ``frame``."""

    points: np.ndarray
    frame: str = "ego"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise GeometryError(f"point cloud must be N x C with C >= 3, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise GeometryError(f"point cloud has non-finite values (first at row {bad})")
        if not self.frame:
            raise GeometryError("point cloud frame tag missing")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def xyz(self):
        return self.points[:, :3]


@dataclass
class Projection:
    """Surviving projected points; ``index`` maps back to rows of the input cloud."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    index: np.ndarray

    def __len__(self):
        return self.u.shape[0]

    def as_tuples(self):
        return list(zip(self.u.tolist(), self.v.tolist(), self.depth.tolist()))


def transform_points(points, pose, frame=None):
    """Apply ``R p + t`` to the xyz columns; extra columns pass through."""
    if not isinstance(points, PointCloud):
        points = PointCloud(points)
    out = points.points.copy()
    out[:, :3] = points.xyz @ pose.rotation.T + pose.translation
    return PointCloud(out, frame or points.frame)


def project_points(points_cam, k, width, height):
    """Pinhole projection, dropping points behind the camera or outside the image."""
    xyz = points_cam.xyz if isinstance(points_cam, PointCloud) else np.asarray(points_cam, float)[:, :3]
    z = xyz[:, 2]
    front = z > Z_EPS
    zs = np.where(front, z, 1.0)
    u = k.fx * xyz[:, 0] / zs + k.cx
    v = k.fy * xyz[:, 1] / zs + k.cy
    keep = front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    idx = np.flatnonzero(keep)
    return Projection(u[idx], v[idx], z[idx].copy(), idx)


def pixel_indices(u, v):
    return np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)


def rasterize_depth(projected, width, height, return_winner=False):
    """Nearest-surface depth map; pixel (floor u, floor v) keeps the minimum depth.

    With ``return_winner`` the index (into ``projected``) of the point that
    won each pixel is returned too, -1 where no point landed.
    """
    if isinstance(projected, Projection):
        u, v, d = projected.u, projected.v, projected.depth
    else:
        arr = np.asarray(projected, dtype=np.float64).reshape(-1, 3)
        u, v, d = arr[:, 0], arr[:, 1], arr[:, 2]
    cols, rows = pixel_indices(u, v)
    depth, winner = kernels.rasterize_min(
        np.ascontiguousarray(cols), np.ascontiguousarray(rows),
        np.ascontiguousarray(d, dtype=np.float64), int(height), int(width))
    if return_winner:
        return depth, winner
    return depth


def adjust_intrinsics(k, scale_x, scale_y, crop_top=0):
    """Intrinsics after resizing by (scale_x, scale_y) and dropping ``crop_top`` rows."""
    if scale_x <= 0 or scale_y <= 0:
        raise GeometryError(f"scales must be positive, got ({scale_x}, {scale_y})")
    if crop_top < 0:
        raise GeometryError(f"crop_top must be >= 0, got {crop_top}")
    return Intrinsics(k.fx * scale_x, k.fy * scale_y, k.cx * scale_x, k.cy * scale_y - crop_top)


def lidar_depth(lidar_ego, cam_pose, k, width, height):
    """Ground-truth depth map from an ego-frame lidar sweep.

    Returns ``(depth, winner)`` where ``winner`` holds, per pixel, the row of
    ``lidar_ego`` whose return was rasterized there (-1 for empty pixels).
    """
    cam = transform_points(lidar_ego, cam_pose, "camera")
    proj = project_points(cam, k, width, height)
    depth, win = rasterize_depth(proj, width, height, return_winner=True)
    if len(proj) == 0:
        return depth, win
    src = np.where(win >= 0, proj.index[np.maximum(win, 0)], -1)
    return depth, src
