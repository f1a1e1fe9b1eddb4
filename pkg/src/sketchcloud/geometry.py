"""Projection model, pixel/image/world coordinate maps, density rendering,
depth multisets, and voxelization.

Conventions: the image plane is the world x-y plane scaled by the camera
factor s (orthographic). Pixel (u, v) indexes column u / row v; normalized
image coordinates live in [-1, 1] with corner pixels mapping to the corners.
Bin assignment rounds to the nearest bin center (half away from zero) and
clamps to the border, so every projected point lands in some bin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    kind: str = "orthographic"
    s: float = 1.0

    def __post_init__(self):
        if self.kind != "orthographic":
            raise ValueError(f"unsupported projection model: {self.kind!r}")
        if not self.s > 0:
            raise ValueError(f"projection scale must be positive, got {self.s}")


@dataclass(frozen=True)
class GridSpec:
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")


@dataclass
class DensityMap:
    """H x W probability grid; values[v, u] is the mass of bin (u, v)."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.grid.height, self.grid.width):
            raise ValueError(
                f"density shape {self.values.shape} vs grid "
                f"{self.grid.height}x{self.grid.width}"
            )

    def validate(self, tol=1e-6):
        if (self.values < 0).any():
            raise ValueError("density map has negative entries")
        total = float(self.values.sum())
        if abs(total - 1.0) > tol:
            raise ValueError(f"density map sums to {total}, expected 1")


@dataclass
class DepthMultisetMap:
    """Per-bin multisets of world depths of the points projecting there."""

    grid: GridSpec
    bins: dict = field(default_factory=dict)  # (u, v) -> float64 array of z

    def total_count(self) -> int:
        return sum(len(z) for z in self.bins.values())

    def counts(self) -> np.ndarray:
        out = np.zeros((self.grid.height, self.grid.width), dtype=np.int64)
        for (u, v), zs in self.bins.items():
            out[v, u] = len(zs)
        return out


def project_point(p, cam: CameraModel):
    """World (x, y, z) -> image plane (x_I, y_I); depth is discarded."""
    x, y, _ = p
    return cam.s * x, cam.s * y


def project_points(cloud: np.ndarray, cam: CameraModel) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    return cloud[:, :2] * cam.s


def pixel_to_image(u, v, grid: GridSpec):
    """Bin index -> normalized image coordinates in [-1, 1]."""
    u = np.asarray(u)
    v = np.asarray(v)
    if (u < 0).any() or (u >= grid.width).any() or (v < 0).any() or (v >= grid.height).any():
        raise ValueError(f"pixel index out of range for {grid.width}x{grid.height}")
    x = 2.0 * u / (grid.width - 1) - 1.0
    y = 2.0 * v / (grid.height - 1) - 1.0
    return x, y


def _round_half_away(t):
    return np.sign(t) * np.floor(np.abs(t) + 0.5)


def image_to_pixel(x, y, grid: GridSpec):
    """Normalized image coordinates -> nearest bin index, clamped to border."""
    u = _round_half_away((np.asarray(x, dtype=np.float64) + 1.0) * (grid.width - 1) / 2.0)
    v = _round_half_away((np.asarray(y, dtype=np.float64) + 1.0) * (grid.height - 1) / 2.0)
    u = np.clip(u, 0, grid.width - 1).astype(np.int64)
    v = np.clip(v, 0, grid.height - 1).astype(np.int64)
    return u, v


def invproj(x_img, y_img, z, cam: CameraModel):
    """Image plane + depth -> world coordinates (orthographic inverse)."""
    return x_img / cam.s, y_img / cam.s, z


def bin_points(cloud: np.ndarray, grid: GridSpec, cam: CameraModel):
    """Project and bin a cloud; returns per-point (u, v) arrays."""
    im = project_points(cloud, cam)
    return image_to_pixel(im[:, 0], im[:, 1], grid)


def render_density(cloud: np.ndarray, grid: GridSpec, cam: CameraModel) -> DensityMap:
    """Fraction of cloud points landing in each bin; sums to 1."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.size == 0:
        raise ValueError("cannot render a density map from an empty cloud")
    u, v = bin_points(cloud, grid, cam)
    counts = np.bincount(v * grid.width + u, minlength=grid.height * grid.width)
    values = counts.reshape(grid.height, grid.width) / len(cloud)
    return DensityMap(grid, values)


def render_depth_multisets(cloud: np.ndarray, grid: GridSpec, cam: CameraModel) -> DepthMultisetMap:
    """Collect the depth of every point falling in each bin."""
    cloud = np.asarray(cloud, dtype=np.float64)
    u, v = bin_points(cloud, grid, cam)
    out = DepthMultisetMap(grid)
    order = np.argsort(v * grid.width + u, kind="stable")
    us, vs, zs = u[order], v[order], cloud[order, 2]
    start = 0
    n = len(cloud)
    while start < n:
        end = start
        key = (us[start], vs[start])
        while end < n and us[end] == key[0] and vs[end] == key[1]:
            end += 1
        out.bins[(int(key[0]), int(key[1]))] = zs[start:end].copy()
        start = end
    return out


def voxelize(cloud: np.ndarray, resolution: int, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> np.ndarray:
    """Boolean occupancy grid; a voxel is occupied iff >= 1 point is inside.

    Points exactly on the upper boundary belong to the last voxel; points
    outside the box occupy nothing.
    """
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    if (hi <= lo).any():
        raise ValueError(f"degenerate bounds: {bounds}")
    grid = np.zeros((resolution,) * 3, dtype=bool)
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.size == 0:
        return grid
    inside = ((cloud >= lo) & (cloud <= hi)).all(axis=1)
    pts = cloud[inside]
    if pts.size == 0:
        return grid
    idx = np.floor((pts - lo) / (hi - lo) * resolution).astype(np.int64)
    idx = np.minimum(idx, resolution - 1)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return grid
