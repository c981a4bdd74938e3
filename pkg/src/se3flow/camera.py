"""Augmented pinhole camera: projection keeps inverse depth as a third coordinate.

A point X = (X, Y, Z) maps to the augmented pixel (x, y, d):

    x = fx X / Z + cx,  y = fy Y / Z + cy,  d = 1 / Z

so projection is a bijection between points in front of the camera and pixels
with positive inverse depth, and backprojection is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonPositiveDepth, NonPositiveInverseDepth
from .se3 import Se3, hat

# points with Z <= EPS_Z count as behind the camera
EPS_Z = 1e-6


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def scaled(self, factor: float) -> "PinholeIntrinsics":
        """Intrinsics for an image resized by `factor` (pixel-center convention)."""
        return PinholeIntrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
        )


@dataclass
class InverseDepthMap:
    """Per-pixel inverse depth d = 1/Z with a validity mask."""

    d: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if self.valid is None:
            self.valid = self.d > 0.0
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.d.shape:
            raise ValueError("validity mask shape mismatch")

    @property
    def shape(self):
        return self.d.shape


def project(points, K: PinholeIntrinsics, eps_z: float = EPS_Z) -> np.ndarray:
    """(..., 3) points -> (..., 3) augmented pixels. Raises NonPositiveDepth."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= eps_z):
        raise NonPositiveDepth(f"point depth <= {eps_z}")
    d = 1.0 / z
    return np.stack(
        [K.fx * points[..., 0] * d + K.cx, K.fy * points[..., 1] * d + K.cy, d], axis=-1
    )


def project_masked(points, K: PinholeIntrinsics, eps_z: float = EPS_Z):
    """Like project but returns (pixels, ok); failed entries are zero-filled."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    ok = z > eps_z
    d = np.where(ok, 1.0 / np.where(ok, z, 1.0), 0.0)
    pix = np.stack(
        [K.fx * points[..., 0] * d + K.cx, K.fy * points[..., 1] * d + K.cy, d], axis=-1
    )
    return np.where(ok[..., None], pix, 0.0), ok


def backproject(pixels, K: PinholeIntrinsics) -> np.ndarray:
    """(..., 3) augmented pixels -> (..., 3) points. Raises NonPositiveInverseDepth."""
    pixels = np.asarray(pixels, dtype=np.float64)
    d = pixels[..., 2]
    if np.any(d <= 0.0):
        raise NonPositiveInverseDepth("inverse depth <= 0")
    z = 1.0 / d
    return np.stack(
        [(pixels[..., 0] - K.cx) / K.fx * z, (pixels[..., 1] - K.cy) / K.fy * z, z], axis=-1
    )


def backproject_masked(pixels, K: PinholeIntrinsics):
    pixels = np.asarray(pixels, dtype=np.float64)
    d = pixels[..., 2]
    ok = d > 0.0
    z = np.where(ok, 1.0 / np.where(ok, d, 1.0), 0.0)
    pts = np.stack(
        [(pixels[..., 0] - K.cx) / K.fx * z, (pixels[..., 1] - K.cy) / K.fy * z, z], axis=-1
    )
    return np.where(ok[..., None], pts, 0.0), ok


def projection_jacobian(points, K: PinholeIntrinsics) -> np.ndarray:
    """d(project)/d(point) at the given points, (..., 3, 3)."""
    points = np.asarray(points, dtype=np.float64)
    x, y, z = np.moveaxis(points, -1, 0)
    d = 1.0 / z
    zero = np.zeros_like(d)
    row0 = np.stack([K.fx * d, zero, -K.fx * x * d * d], axis=-1)
    row1 = np.stack([zero, K.fy * d, -K.fy * y * d * d], axis=-1)
    row2 = np.stack([zero, zero, -d * d], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def transform_jacobian(points) -> np.ndarray:
    """d(exp(delta) X)/d(delta) at delta = 0, (..., 3, 6).

    Left-multiplicative twist (tau, phi): the translational block is I, the
    rotational block is -hat(X) since d/dphi (phi x X) = -hat(X).
    """
    points = np.asarray(points, dtype=np.float64)
    eye = np.broadcast_to(np.eye(3), points.shape[:-1] + (3, 3))
    return np.concatenate([eye, -hat(points)], axis=-1)


def pixel_jacobian(points, K: PinholeIntrinsics) -> np.ndarray:
    """Full chain d(project(exp(delta) X))/d(delta) at delta = 0, (..., 3, 6)."""
    return projection_jacobian(points, K) @ transform_jacobian(points)


def map_pixel(pixels, T: Se3, K: PinholeIntrinsics) -> np.ndarray:
    """Reproject augmented pixels through a rigid motion. Raises on invalid."""
    return project(T.act(backproject(pixels, K)), K)


def map_pixel_masked(pixels, T: Se3, K: PinholeIntrinsics):
    pts, ok0 = backproject_masked(pixels, K)
    pix, ok1 = project_masked(T.act(pts), K)
    ok = ok0 & ok1
    return np.where(ok[..., None], pix, 0.0), ok


def pixel_grid(h: int, w: int):
    """Pixel-center coordinate arrays (x, y), each (h, w) float64."""
    y, x = np.mgrid[0:h, 0:w]
    return x.astype(np.float64), y.astype(np.float64)


def augmented_grid(z: InverseDepthMap) -> np.ndarray:
    """(H, W, 3) augmented pixels (x, y, d) for a whole inverse-depth map."""
    x, y = pixel_grid(*z.shape)
    return np.stack([x, y, z.d], axis=-1)


def bilinear_sample(grid, valid, xs, ys):
    """Sample `grid` at continuous (xs, ys).

    Returns (values, ok). ok is False where the 2x2 footprint would need
    clamping (sample outside [0, W-1) x [0, H-1)) or touches an invalid cell.
    """
    grid = np.asarray(grid, dtype=np.float64)
    h, w = grid.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 <= w - 1) & (y0 + 1 <= h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = xs - x0c
    fy = ys - y0c
    v00 = grid[y0c, x0c]
    v01 = grid[y0c, x0c + 1]
    v10 = grid[y0c + 1, x0c]
    v11 = grid[y0c + 1, x0c + 1]
    if valid is not None:
        valid = np.asarray(valid, dtype=bool)
        ok = ok & valid[y0c, x0c] & valid[y0c, x0c + 1] & valid[y0c + 1, x0c] & valid[y0c + 1, x0c + 1]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy, ok


def depth_residual(pixels, T: Se3, K: PinholeIntrinsics, z2: InverseDepthMap):
    """Inverse-depth residual d' - Z2(x', y') at the mapped location.

    Off-grid or invalid samples are flagged (ok = False), not raised.
    Returns (residual, ok) with residual zero-filled where not ok.
    """
    mapped, ok_map = map_pixel_masked(pixels, T, K)
    sampled, ok_smp = bilinear_sample(z2.d, z2.valid, mapped[..., 0], mapped[..., 1])
    ok = ok_map & ok_smp
    res = np.where(ok, mapped[..., 2] - sampled, 0.0)
    return res, ok
