"""Depth-map geometry: Scharr gradient magnitude and pinhole back-projection.

A depth frame (metric depth + RGB + intrinsics) yields two network inputs:
a normalized depth-gradient-magnitude image highlighting discontinuities,
and a 3D point cloud carrying per-point RGB features.  Depth value 0 marks
an invalid pixel and is masked out of both products.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DomainError, EmptyCloudError, ShapeError
from .pointnet import PointCloud, farthest_point_sample
from .tensor import Tensor

# horizontal-derivative kernel; the vertical one is its transpose
SCHARR_X = np.array([[-3.0, 0.0, 3.0],
                     [-10.0, 0.0, 10.0],
                     [-3.0, 0.0, 3.0]])

CLIP_PERCENTILE = 99.0


@dataclass
class CameraIntrinsics:
    """Pinhole parameters in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} frame")


@dataclass
class DepthFrame:
    """Metric depth map (0 = invalid) with its RGB image and intrinsics."""

    depth: np.ndarray
    rgb: np.ndarray
    intrinsics: CameraIntrinsics
    sample_id: str

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (h, w):
            raise ShapeError(f"depth shape {self.depth.shape} != intrinsics extents {(h, w)}")
        if self.rgb.shape != (h, w, 3):
            raise ShapeError(f"rgb shape {self.rgb.shape} != {(h, w, 3)}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise DomainError("depth values must be finite and nonnegative")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1):
            raise DomainError("rgb values must lie in [0, 1]")


@dataclass
class GradientMap:
    """Normalized gradient magnitude plus the clip value that scaled it."""

    magnitude: np.ndarray
    raw_max: float

    def __post_init__(self):
        if np.any(self.magnitude < 0) or np.any(self.magnitude > 1):
            raise DomainError("gradient magnitude must lie in [0, 1]")


def _correlate3x3(img, kernel):
    """Replicate-border 3x3 correlation via nine shifted slices."""
    h, w = img.shape
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            c = kernel[i, j]
            if c:
                out += c * padded[i:i + h, j:j + w]
    return out


def scharr_magnitude_raw(depth):
    """Unnormalized gradient magnitude sqrt(Gx^2 + Gy^2), float64."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2 or depth.shape[0] < 3 or depth.shape[1] < 3:
        raise ShapeError(f"gradient needs an image of at least 3x3, got {depth.shape}")
    gx = _correlate3x3(depth, SCHARR_X)
    gy = _correlate3x3(depth, SCHARR_X.T)
    return np.sqrt(gx * gx + gy * gy)


def scharr_gradient(frame):
    """Normalized depth-gradient map for a frame.

    Pixels whose 3x3 neighborhood touches invalid depth are zeroed before
    the normalization so masking artifacts cannot set the scale; the
    remaining magnitudes are clipped at their 99th percentile and scaled
    to [0, 1].  The clip value is kept as raw_max (meters per pixel).
    """
    mag = scharr_magnitude_raw(frame.depth)
    invalid = frame.depth == 0.0
    if invalid.any():
        contaminated = ndimage.binary_dilation(invalid, structure=np.ones((3, 3), dtype=bool))
        mag[contaminated] = 0.0
    raw_max = float(np.percentile(mag, CLIP_PERCENTILE))
    if raw_max <= 0.0:
        return GradientMap(np.zeros_like(mag, dtype=np.float32), 0.0)
    np.clip(mag, 0.0, raw_max, out=mag)
    return GradientMap((mag / raw_max).astype(np.float32), raw_max)


def backproject(frame, max_points, seed=0):
    """Lift valid depth pixels to a 3D point cloud with RGB features.

    X = (u-cx) d/fx, Y = (v-cy) d/fy, Z = d.  When more pixels are valid
    than max_points, farthest point sampling (started at a seed-chosen
    point) keeps a density-uniform subset; when fewer, the last point is
    repeated as padding and valid_count records the true count.
    """
    if max_points < 1:
        raise ShapeError(f"max_points must be at least 1, got {max_points}")
    intr = frame.intrinsics
    valid = frame.depth > 0.0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EmptyCloudError(f"frame '{frame.sample_id}' has no valid depth pixels")
    vs, us = np.nonzero(valid)
    d = frame.depth[valid].astype(np.float64)
    coords = np.stack([
        (us - intr.cx) * d / intr.fx,
        (vs - intr.cy) * d / intr.fy,
        d,
    ], axis=1).astype(np.float32)
    feats = frame.rgb[valid]
    if n_valid > max_points:
        sel = farthest_point_sample(coords[None], max_points, start_index=seed % n_valid)[0]
        coords = coords[sel]
        feats = feats[sel]
        count = max_points
    else:
        count = n_valid
        if n_valid < max_points:
            pad = max_points - n_valid
            coords = np.concatenate([coords, np.repeat(coords[-1:], pad, axis=0)])
            feats = np.concatenate([feats, np.repeat(feats[-1:], pad, axis=0)])
    return PointCloud(coords[None], Tensor(np.ascontiguousarray(feats)[None]), np.array([count]))


def project(cloud_coords, intrinsics):
    """Pinhole projection back to pixel coordinates (u, v) and depth."""
    pts = np.asarray(cloud_coords, dtype=np.float64)
    z = pts[..., 2]
    u = pts[..., 0] * intrinsics.fx / z + intrinsics.cx
    v = pts[..., 1] * intrinsics.fy / z + intrinsics.cy
    return u, v, z
