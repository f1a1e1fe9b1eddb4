"""Training losses and point-cloud evaluation metrics.

Chamfer uses squared L2 to the nearest neighbor, averaged per cloud and
summed over both directions. EMD is the mean (unsquared) L2 over an exact
minimum-cost bijection between equal-size clouds; unequal sizes are
reconciled by seeded uniform subsampling of the larger cloud. The Fréchet
distance fits Gaussians to two feature sets and evaluates the closed-form
2-Wasserstein distance between them.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import geometry


# ---------------------------------------------------------------------------
# Chamfer distance


def _check_cloud(c, name):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] == 0:
        raise ValueError(f"{name} must be a nonempty (N, 3) cloud, got shape {c.shape}")
    return c


def nearest_brute(queries: np.ndarray, targets: np.ndarray):
    """Nearest neighbor per query by full distance matrix; lowest index wins ties."""
    d2 = ((queries[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return d2[np.arange(len(queries)), idx], idx


def nearest_kdtree(queries: np.ndarray, targets: np.ndarray):
    d, idx = cKDTree(targets).query(queries)
    return d * d, idx


def chamfer(s, t, method="kdtree") -> float:
    """Symmetric mean squared nearest-neighbor distance between two clouds."""
    s = _check_cloud(s, "S")
    t = _check_cloud(t, "T")
    nn = nearest_kdtree if method == "kdtree" else nearest_brute
    d_st, _ = nn(s, t)
    d_ts, _ = nn(t, s)
    return float(d_st.mean() + d_ts.mean())


def chamfer_loss(z: ad.Tensor, xy: np.ndarray, gt_cloud: np.ndarray) -> ad.Tensor:
    """Chamfer as a differentiable loss in the depth column only.

    The predicted cloud is [xy, z] with xy held constant (sampled bin
    centers); nearest-neighbor assignments are computed from current values
    and the loss is assembled so gradients flow into z alone.
    """
    gt = _check_cloud(gt_cloud, "gt_cloud")
    xy = np.asarray(xy, dtype=np.float64)
    zv = z.values.reshape(-1).astype(np.float64)
    if xy.shape != (zv.size, 2):
        raise ValueError(f"xy shape {xy.shape} vs {zv.size} depths")
    pred = np.column_stack([xy, zv])
    n, m = len(pred), len(gt)

    _, nn_pg = nearest_kdtree(pred, gt)  # per predicted point: closest gt
    _, nn_gp = nearest_kdtree(gt, pred)  # per gt point: closest predicted

    zz = ad.reshape(z, (zv.size,))
    dtype = z.values.dtype

    # term 1: predicted -> gt, xy part is constant
    xy_sq1 = ((xy - gt[nn_pg, :2]) ** 2).sum()
    e1 = ad.add_const(zz, -gt[nn_pg, 2].astype(dtype))
    s1 = ad.sum_all(ad.mul(e1, e1))

    # term 2: gt -> predicted, gathered over assigned depths
    xy_sq2 = ((gt[:, :2] - xy[nn_gp]) ** 2).sum()
    zg = ad.gather_rows(zz, nn_gp)
    e2 = ad.add_const(zg, -gt[:, 2].astype(dtype))
    s2 = ad.sum_all(ad.mul(e2, e2))

    loss = ad.add(ad.scale(s1, 1.0 / n), ad.scale(s2, 1.0 / m))
    return ad.add_const(loss, np.asarray(xy_sq1 / n + xy_sq2 / m, dtype=dtype))


# ---------------------------------------------------------------------------
# density loss


def density_l1(m_hat: ad.Tensor, m) -> ad.Tensor:
    """Sum of absolute bin differences between predicted and target maps."""
    target = m.values if isinstance(m, geometry.DensityMap) else np.asarray(m)
    if m_hat.shape != target.shape:
        raise ValueError(f"grid mismatch: predicted {m_hat.shape} vs target {target.shape}")
    diff = ad.add_const(m_hat, -target.astype(m_hat.values.dtype))
    return ad.sum_all(ad.absolute(diff))


def total_loss(l_cd: float, l_d: float, lambda_cd: float = 1.0, lambda_d: float = 1e4) -> float:
    if lambda_cd < 0 or lambda_d < 0:
        raise ValueError("loss weights must be nonnegative")
    return lambda_cd * l_cd + lambda_d * l_d


# ---------------------------------------------------------------------------
# EMD


def emd(s, t, seed: int = 0) -> float:
    """Mean L2 over the optimal bijection between equal-size clouds.

    If sizes differ, the larger cloud is subsampled uniformly (seeded) to the
    smaller size before solving the assignment exactly.
    """
    s = _check_cloud(s, "S")
    t = _check_cloud(t, "T")
    if len(s) != len(t):
        rng = np.random.default_rng(seed)
        if len(s) > len(t):
            s = s[rng.choice(len(s), size=len(t), replace=False)]
        else:
            t = t[rng.choice(len(t), size=len(s), replace=False)]
    d = np.sqrt(((s[:, None, :] - t[None, :, :]) ** 2).sum(axis=2))
    rows, cols = linear_sum_assignment(d)
    return float(d[rows, cols].mean())


# ---------------------------------------------------------------------------
# voxel IoU


def voxel_iou(s, t, resolution: int = 32, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> float:
    s = _check_cloud(s, "S")
    t = _check_cloud(t, "T")
    occ_s = geometry.voxelize(s, resolution, bounds)
    occ_t = geometry.voxelize(t, resolution, bounds)
    union = int((occ_s | occ_t).sum())
    if union == 0:
        return 1.0  # both grids empty, trivially identical
    return int((occ_s & occ_t).sum()) / union


# ---------------------------------------------------------------------------
# Fréchet distance over a pluggable feature extractor


def identity_features(cloud) -> np.ndarray:
    """Default extractor: raw per-point coordinates as feature vectors."""
    return _check_cloud(cloud, "cloud")


def _sqrtm_psd(m, tol=1e-6):
    sym = (m + m.T) / 2
    eigvals, eigvecs = np.linalg.eigh(sym)
    if eigvals.min() < -tol:
        raise ValueError(f"matrix is not PSD within tolerance (min eig {eigvals.min():.3e})")
    eigvals = np.clip(eigvals, 0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2-Wasserstein distance between Gaussians fitted to two feature sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (n, D) with equal D: {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least 2 feature vectors per side")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    sqrt_a = _sqrtm_psd(cov_a)
    inner = _sqrtm_psd(sqrt_a @ cov_b @ sqrt_a)
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2 * np.trace(inner))
    return max(val, 0.0)


def fpd(s, t, feature_extractor=identity_features) -> float:
    """Fréchet distance between feature embeddings of two clouds."""
    return frechet_distance(feature_extractor(s), feature_extractor(t))
