"""Image-plane radar inputs: height-extended pillars and multi-channel enhanced radar (MER).

Every channel of a radar image holds camera-frame depth in meters, 0 where
there is no radar evidence.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Z_EPS, PointCloud, pixel_indices, project_points, rasterize_depth, transform_points
from .raster import read_raster

MER_CHANNELS = 6


class RadarInputError(ValueError):
    pass


@dataclass(frozen=True)
class PillarSpec:
    z_lo: float = 0.3
    z_hi: float = 2.0

    def __post_init__(self):
        if not self.z_lo <= self.z_hi:
            raise RadarInputError(f"pillar needs z_lo <= z_hi, got [{self.z_lo}, {self.z_hi}]")


@dataclass(frozen=True)
class MerSpec:
    sigma_u: float = 6.0
    sigma_v: float = 12.0
    thresholds: tuple = (0.9, 0.7, 0.5, 0.3, 0.1)

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        object.__setattr__(self, "thresholds", t)
        if self.sigma_u <= 0 or self.sigma_v <= 0:
            raise RadarInputError(f"MER sigmas must be positive, got ({self.sigma_u}, {self.sigma_v})")
        if len(t) != MER_CHANNELS - 1:
            raise RadarInputError(f"MER needs {MER_CHANNELS - 1} thresholds, got {len(t)}")
        if not all(0 < x < 1 for x in t) or any(a <= b for a, b in zip(t, t[1:])):
            raise RadarInputError(f"MER thresholds must be strictly descending in (0, 1), got {t}")

    def confidence(self, du, dv):
        return np.exp(-0.5 * (np.square(du) / self.sigma_u**2 + np.square(dv) / self.sigma_v**2))


def _as_cloud(points):
    return points if isinstance(points, PointCloud) else PointCloud(points)


def extend_height(radar_ego, pillar, cam_pose, k, width, height):
    """Stretch each radar return into a vertical pillar of pixels (1 x H x W).

    Both pillar endpoints (x, y, z_lo) and (x, y, z_hi) are projected; every
    row between them in the return's own image column gets the return's
    camera-frame depth. Pillars are truncated at the image border.
    """
    radar_ego = _as_cloud(radar_ego)
    xyz = radar_ego.xyz
    lo, hi = xyz.copy(), xyz.copy()
    lo[:, 2] = pillar.z_lo
    hi[:, 2] = pillar.z_hi
    centre = transform_points(PointCloud(xyz), cam_pose).xyz
    lo_c = transform_points(PointCloud(lo), cam_pose).xyz
    hi_c = transform_points(PointCloud(hi), cam_pose).xyz

    ok = (centre[:, 2] > Z_EPS) & (lo_c[:, 2] > Z_EPS) & (hi_c[:, 2] > Z_EPS)
    centre, lo_c, hi_c = centre[ok], lo_c[ok], hi_c[ok]
    u = k.fx * centre[:, 0] / centre[:, 2] + k.cx
    v_lo = k.fy * lo_c[:, 1] / lo_c[:, 2] + k.cy
    v_hi = k.fy * hi_c[:, 1] / hi_c[:, 2] + k.cy
    cols = np.floor(u).astype(np.int64)
    r_a = np.floor(np.minimum(v_lo, v_hi)).astype(np.int64)
    r_b = np.floor(np.maximum(v_lo, v_hi)).astype(np.int64)
    out = kernels.fill_columns(cols, r_a, r_b, np.ascontiguousarray(centre[:, 2]), int(height), int(width))
    return out[None]


def build_mer(radar_ego, cam_pose, k, width, height, spec=None):
    """Geometric 6-channel enhanced radar image.

    Channel 0 is the raw rasterized radar depth. Channel j (1..5) spreads each
    return over the pixels whose Gaussian association confidence, measured
    from the return's own pixel, is at least ``spec.thresholds[j - 1]``.
    """
    spec = spec or MerSpec()
    cam = transform_points(_as_cloud(radar_ego), cam_pose, "camera")
    proj = project_points(cam, k, width, height)
    out = np.zeros((MER_CHANNELS, height, width))
    out[0] = rasterize_depth(proj, width, height)
    if len(proj) == 0:
        return out
    cols, rows = pixel_indices(proj.u, proj.v)
    qmax = np.array([-2.0 * math.log(t) for t in spec.thresholds])
    rad_u = int(math.floor(spec.sigma_u * math.sqrt(qmax[-1])))
    rad_v = int(math.floor(spec.sigma_v * math.sqrt(qmax[-1])))
    out[1:] = kernels.splat_mer(
        cols, rows, np.ascontiguousarray(proj.depth), int(height), int(width),
        1.0 / spec.sigma_u**2, 1.0 / spec.sigma_v**2, qmax, rad_u, rad_v)
    return out


def load_mer(path, expected_hw=None):
    """Read a precomputed MER raster and validate it."""
    arr = read_raster(path)
    if arr.shape[0] != MER_CHANNELS:
        raise RadarInputError(f"{path}: expected {MER_CHANNELS} channels, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise RadarInputError(f"{path}: non-finite depth values")
    if (arr < 0).any():
        c, r, col = np.argwhere(arr < 0)[0]
        raise RadarInputError(f"{path}: negative depth at channel {c}, pixel ({r}, {col})")
    if expected_hw is not None and tuple(arr.shape[1:]) != tuple(expected_hw):
        raise RadarInputError(
            f"{path}: MER is {arr.shape[1]}x{arr.shape[2]} but image is {expected_hw[0]}x{expected_hw[1]}")
    return arr
