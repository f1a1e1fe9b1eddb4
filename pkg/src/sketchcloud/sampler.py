"""Two-stage point cloud generation: multinomial location sampling from a
density map, then per-location depth from the generator network or from an
oracle multiset of ground-truth depths.

All sampling is driven by explicit seeds through numpy Generators, so a
given (inputs, seed) pair always produces the identical cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from .geometry import CameraModel, DensityMap, DepthMultisetMap, invproj, pixel_to_image


@dataclass
class SamplerConfig:
    n_points: int = 1024
    seed: int = 0
    source: str = "predicted-density"  # or "gt-density"
    depth_source: str = "generator"  # or "oracle-multiset"
    homogeneous: bool = False  # foreground-uniform ablation sampler
    jitter: bool = False  # intra-bin jitter; off = emit bin centers

    def __post_init__(self):
        if self.n_points < 1:
            raise ValueError(f"n_points must be >= 1, got {self.n_points}")
        if self.source not in ("predicted-density", "gt-density"):
            raise ValueError(f"unknown location source {self.source!r}")
        if self.depth_source not in ("generator", "oracle-multiset"):
            raise ValueError(f"unknown depth source {self.depth_source!r}")


def _validate_map(m: DensityMap):
    if (m.values < 0).any():
        raise ValueError("density map has negative entries")
    if m.values.sum() <= 0:
        raise ValueError("density map sums to zero")


def sample_locations(m: DensityMap, count: int, seed) -> np.ndarray:
    """Draw (u, v) bins i.i.d. with replacement, P((u,v)) = M[v,u].

    Inverse-CDF over the flattened map; zero-mass bins are never drawn.
    Returns an int array of shape (count, 2) with columns (u, v).
    """
    _validate_map(m)
    rng = np.random.default_rng(seed)
    cum = np.cumsum(m.values.reshape(-1))
    draws = rng.random(count) * cum[-1]
    flat = np.searchsorted(cum, draws, side="right")
    flat = np.minimum(flat, cum.size - 1)
    u = flat % m.grid.width
    v = flat // m.grid.width
    return np.column_stack([u, v]).astype(np.int64)


def homo_sample(m: DensityMap, count: int, seed) -> np.ndarray:
    """Ablation sampler: uniform over foreground bins (mass > 0), ignoring
    the density magnitudes."""
    _validate_map(m)
    flat = m.values.reshape(-1)
    fg = np.flatnonzero(flat > 0)
    if fg.size == 0:
        raise ValueError("density map has no foreground bins")
    rng = np.random.default_rng(seed)
    picks = fg[rng.integers(0, fg.size, size=count)]
    u = picks % m.grid.width
    v = picks // m.grid.width
    return np.column_stack([u, v]).astype(np.int64)


def oracle_depth(dm: DepthMultisetMap, u: int, v: int, seed) -> float:
    """Uniform draw from the ground-truth depth multiset of bin (u, v)."""
    zs = dm.bins.get((int(u), int(v)))
    if zs is None or len(zs) == 0:
        raise ValueError(f"bin ({u}, {v}) holds no ground-truth depths")
    rng = np.random.default_rng(seed)
    return float(zs[rng.integers(0, len(zs))])


def _oracle_depths(dm: DepthMultisetMap, locs: np.ndarray, rng) -> np.ndarray:
    out = np.empty(len(locs), dtype=np.float64)
    for i, (u, v) in enumerate(locs):
        zs = dm.bins.get((int(u), int(v)))
        if zs is None or len(zs) == 0:
            raise ValueError(f"bin ({u}, {v}) holds no ground-truth depths")
        out[i] = zs[rng.integers(0, len(zs))]
    return out


def locations_to_world_xy(locs: np.ndarray, grid, cam: CameraModel):
    """Bin indices -> world (x, y) of the bin centers."""
    x_img, y_img = pixel_to_image(locs[:, 0], locs[:, 1], grid)
    x, y, _ = invproj(x_img, y_img, np.zeros_like(x_img), cam)
    return np.column_stack([x, y])


def generate_cloud(
    m: DensityMap,
    f,
    params,
    cam: CameraModel,
    cfg: SamplerConfig,
    depth_oracle: DepthMultisetMap | None = None,
) -> np.ndarray:
    """Generate exactly cfg.n_points world points from a density map.

    `f` is the translated feature grid (Tensor or array) feeding the depth
    generator; when cfg.depth_source is "oracle-multiset", `depth_oracle`
    supplies ground-truth depth multisets instead.
    """
    ss = np.random.SeedSequence(cfg.seed)
    loc_seed, depth_seed = ss.spawn(2)

    if cfg.homogeneous:
        locs = homo_sample(m, cfg.n_points, loc_seed)
    else:
        locs = sample_locations(m, cfg.n_points, loc_seed)

    xy = locations_to_world_xy(locs, m.grid, cam)
    if cfg.jitter:
        rng_j = np.random.default_rng(ss.spawn(1)[0])
        half_u = 1.0 / (m.grid.width - 1) / cam.s
        half_v = 1.0 / (m.grid.height - 1) / cam.s
        xy = xy + rng_j.uniform(-1, 1, size=xy.shape) * [half_u, half_v]

    if cfg.depth_source == "oracle-multiset":
        if depth_oracle is None:
            raise ValueError("oracle-multiset depth source needs a DepthMultisetMap")
        z = _oracle_depths(depth_oracle, locs, np.random.default_rng(depth_seed))
    else:
        if f is None or params is None:
            raise ValueError("generator depth source needs a feature grid and params")
        if not isinstance(f, ad.Tensor):
            f = ad.Tensor(np.asarray(f, dtype=np.float32))
        rng_d = np.random.default_rng(depth_seed)
        noise = rng_d.random((cfg.n_points, params.config.noise_dim), dtype=np.float32)
        feats = model_mod.local_features(f, locs[:, 0], locs[:, 1], params)
        z = model_mod.gen_depths(feats, noise, params).values.reshape(-1)

    return np.column_stack([xy, z]).astype(np.float32)
