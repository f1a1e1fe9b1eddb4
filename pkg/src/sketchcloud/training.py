"""Adam optimizer, the two-path training loop, and the evaluation loop.

Each step backpropagates one combined loss whose two terms reach disjoint
heads: the L1 density loss drives the density head (and the translator),
while the Chamfer loss drives the depth generator through the sampled
depths (and the translator through the gathered local features). Location
sampling itself is discrete and sits behind stop_gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics, model, sampler, synthdata
from .geometry import CameraModel, DensityMap, GridSpec


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    lambda_cd: float = 1.0
    lambda_d: float = 1e4
    n_points: int = 1024
    location_source: str = "gt-density"  # teacher forcing; or "predicted-density"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.lambda_cd < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.location_source not in ("gt-density", "predicted-density"):
            raise ValueError(f"unknown location source {self.location_source!r}")


class Adam:
    """Bias-corrected Adam over named parameter tensors."""

    def __init__(self, params: model.ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.values) for n, p in params.tensors.items()}
        self.v = {n: np.zeros_like(p.values) for n, p in params.tensors.items()}

    def zero_grad(self):
        self.params.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.tensors.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            elif g.shape != p.values.shape:
                raise ValueError(f"gradient shape mismatch for {name!r}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * np.square(g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.values -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.values.dtype)


def train_step(
    sample: synthdata.DatasetSample,
    params: model.ModelParams,
    opt: Adam,
    cfg: TrainConfig,
    cam: CameraModel,
    step_seed,
) -> tuple:
    """One gradient step on one sample; returns (l_cd, l_d) as floats."""
    cfg_m = params.config
    grid = GridSpec(cfg_m.grid_width, cfg_m.grid_height)

    f = model.translate(sample.sketch, params)
    m_hat = model.predict_density(f, params)
    l_d = metrics.density_l1(m_hat, sample.gt_density)

    if cfg.location_source == "gt-density":
        loc_map = sample.gt_density
    else:
        loc_map = DensityMap(grid, ad.stop_gradient(m_hat).values)
    ss = np.random.SeedSequence(step_seed)
    loc_seed, noise_seed = ss.spawn(2)
    locs = sampler.sample_locations(loc_map, cfg.n_points, loc_seed)

    feats = model.local_features(f, locs[:, 0], locs[:, 1], params)
    noise = np.random.default_rng(noise_seed).random(
        (cfg.n_points, cfg_m.noise_dim), dtype=np.float32
    )
    z = model.gen_depths(feats, noise, params)
    xy = sampler.locations_to_world_xy(locs, grid, cam)
    l_cd = metrics.chamfer_loss(z, xy, sample.gt_cloud)

    total = ad.add(ad.scale(l_cd, cfg.lambda_cd), ad.scale(l_d, cfg.lambda_d))
    if not np.isfinite(total.values):
        raise NumericalError(f"non-finite loss at step seed {step_seed}")

    opt.zero_grad()
    ad.backward(total)
    opt.step()
    return float(l_cd.values), float(l_d.values)


def train(
    manifest: dict,
    base_dir,
    cfg: TrainConfig,
    model_cfg: model.ModelConfig | None = None,
    cam: CameraModel | None = None,
    progress=None,
) -> tuple:
    """Full training run; returns (params, history).

    history rows are (epoch, mean_l_cd, mean_l_d, mean_total), one per epoch.
    Deterministic given (dataset bytes, cfg, model_cfg).
    """
    model_cfg = model_cfg or model.ModelConfig(
        image_size=manifest["image_size"],
        grid_width=manifest["grid"]["width"],
        grid_height=manifest["grid"]["height"],
    )
    cam = cam or CameraModel(s=manifest.get("camera", {}).get("s", 1.0))
    grid = GridSpec(model_cfg.grid_width, model_cfg.grid_height)

    entries = synthdata.manifest_entries(manifest, split="train")
    if not entries:
        raise ValueError("manifest has no training samples")
    samples = [synthdata.load_sample(e, base_dir, grid, cam) for e in entries]

    params = model.init_params(model_cfg, seed=cfg.seed)
    opt = Adam(params, lr=cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7, epoch)))
        order = order_rng.permutation(len(samples))
        cd_sum = d_sum = 0.0
        for pos, idx in enumerate(order):
            l_cd, l_d = train_step(
                samples[idx], params, opt, cfg, cam, (cfg.seed, epoch, pos)
            )
            cd_sum += l_cd
            d_sum += l_d
        n = len(samples)
        row = (
            epoch,
            cd_sum / n,
            d_sum / n,
            metrics.total_loss(cd_sum / n, d_sum / n, cfg.lambda_cd, cfg.lambda_d),
        )
        history.append(row)
        if progress is not None:
            progress(row)
    return params, history


# ---------------------------------------------------------------------------
# evaluation

VARIANTS = ("ours", "homo", "ours_real")
METRICS = {
    "cd": lambda gen, gt: metrics.chamfer(gen, gt),
    "emd": lambda gen, gt: metrics.emd(gen, gt),
    "iou": lambda gen, gt: metrics.voxel_iou(gen, gt),
    "fpd": lambda gen, gt: metrics.fpd(gen, gt),
}


def generate_for_sample(
    sample: synthdata.DatasetSample,
    params: model.ModelParams,
    cam: CameraModel,
    variant: str,
    n_points: int,
    seed,
) -> np.ndarray:
    """Point cloud for one sample under an evaluation variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    grid = GridSpec(params.config.grid_width, params.config.grid_height)
    f = model.translate(sample.sketch, params)
    if variant == "ours_real":
        loc_map = sample.gt_density
    else:
        loc_map = DensityMap(grid, model.predict_density(f, params).values)
    cfg_s = sampler.SamplerConfig(
        n_points=n_points,
        seed=seed,
        source="gt-density" if variant == "ours_real" else "predicted-density",
        homogeneous=(variant == "homo"),
    )
    return sampler.generate_cloud(loc_map, f, params, cam, cfg_s)


def evaluate(
    params: model.ModelParams,
    manifest: dict,
    base_dir,
    split: str = "test",
    metric_names=("cd", "emd", "iou", "fpd"),
    variant: str = "ours",
    n_points: int = 1024,
    seed: int = 0,
    cam: CameraModel | None = None,
) -> tuple:
    """Per-sample metric rows plus per-metric means.

    Returns (rows, means): rows are {sample_id, metric, value} dicts in
    sample order followed by one mean row per metric.
    """
    for name in metric_names:
        if name not in METRICS:
            raise KeyError(f"unknown metric {name!r}; available: {sorted(METRICS)}")
    cam = cam or CameraModel(s=manifest.get("camera", {}).get("s", 1.0))
    grid = GridSpec(params.config.grid_width, params.config.grid_height)
    entries = sorted(synthdata.manifest_entries(manifest, split), key=lambda e: e["id"])
    if not entries:
        raise ValueError(f"manifest has no samples in split {split!r}")

    rows = []
    sums = {name: 0.0 for name in metric_names}
    for i, entry in enumerate(entries):
        sample = synthdata.load_sample(entry, base_dir, grid, cam)
        gen = generate_for_sample(sample, params, cam, variant, n_points, (seed, i))
        for name in metric_names:
            value = METRICS[name](gen, sample.gt_cloud)
            sums[name] += value
            rows.append({"sample_id": entry["id"], "metric": name, "value": value})
    means = {name: sums[name] / len(entries) for name in metric_names}
    for name in metric_names:
        rows.append({"sample_id": "mean", "metric": name, "value": means[name]})
    return rows, means
