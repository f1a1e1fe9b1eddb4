"""The learnable parts: sketch translator, density head, depth generator.

The translator is a strided-conv encoder followed by an upsampling decoder;
feature maps from every decoder scale are resized to the finest scale and
concatenated into the fused feature grid. The density head resizes that grid
to the sampling resolution and runs three 3x3 convolutions, with a final
ReLU + sum normalization so the output is a probability map. The depth
generator is a residual MLP shared across locations that maps
(local feature, uniform noise) to a scalar depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

DENSITY_EPS = 1e-8


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    encoder_channels: tuple = (16, 32, 64, 128)
    decoder_channels: tuple = (128, 64, 32, 16)  # empty tuple = encoder-only variant
    density_hidden: tuple = (32, 16)
    depth_width: int = 128
    depth_blocks: int = 4
    noise_dim: int = 8
    grid_width: int = 64
    grid_height: int = 64
    kernel: int = 3

    @property
    def feature_channels(self) -> int:
        if self.decoder_channels:
            return sum(self.decoder_channels)
        return self.encoder_channels[-1]

    @property
    def feature_size(self) -> int:
        """Spatial side of the fused feature grid."""
        coarse = self.image_size >> len(self.encoder_channels)
        return coarse << len(self.decoder_channels)

    def simenc(self) -> "ModelConfig":
        """Encoder-only ablation with the depth MLP enlarged to keep the
        total parameter count roughly unchanged."""
        return replace(self, decoder_channels=(), depth_width=192, depth_blocks=6)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict  # name -> Tensor, insertion-ordered

    def parameters(self):
        return list(self.tensors.items())

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def _uniform_init(rng, shape, fan_in, dtype=np.float32):
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    k = cfg.kernel
    tensors = {}

    def conv(name, c_in, c_out):
        fan = c_in * k * k
        tensors[f"{name}.w"] = ad.Tensor(_uniform_init(rng, (c_out, c_in, k, k), fan), requires_grad=True)
        tensors[f"{name}.b"] = ad.Tensor(_uniform_init(rng, (c_out,), fan), requires_grad=True)

    def fc(name, d_in, d_out):
        tensors[f"{name}.w"] = ad.Tensor(_uniform_init(rng, (d_out, d_in), d_in), requires_grad=True)
        tensors[f"{name}.b"] = ad.Tensor(_uniform_init(rng, (d_out,), d_in), requires_grad=True)

    c_prev = 1
    for i, c in enumerate(cfg.encoder_channels):
        conv(f"enc{i}", c_prev, c)
        c_prev = c
    for i, c in enumerate(cfg.decoder_channels):
        conv(f"dec{i}", c_prev, c)
        c_prev = c

    c_prev = cfg.feature_channels
    for i, c in enumerate(cfg.density_hidden):
        conv(f"den{i}", c_prev, c)
        c_prev = c
    conv(f"den{len(cfg.density_hidden)}", c_prev, 1)
    # Start the density head in the active ReLU regime: with a zero-mean
    # bias the whole pre-ReLU map can come out negative, and the uniform
    # fallback it triggers carries no gradient to recover from.
    tensors[f"den{len(cfg.density_hidden)}.b"].values[:] = 0.1

    fc("depth_in", cfg.feature_channels + cfg.noise_dim, cfg.depth_width)
    for i in range(cfg.depth_blocks):
        fc(f"depth_blk{i}.a", cfg.depth_width, cfg.depth_width)
        fc(f"depth_blk{i}.b", cfg.depth_width, cfg.depth_width)
    fc("depth_out", cfg.depth_width, 1)

    return ModelParams(cfg, tensors)


def config_from_tensors(arrays: dict, image_size: int, grid_width: int, grid_height: int) -> ModelConfig:
    """Reconstruct the architecture from checkpoint tensor names and shapes."""
    enc, dec, den = [], [], []
    i = 0
    while f"enc{i}.w" in arrays:
        enc.append(arrays[f"enc{i}.w"].shape[0])
        i += 1
    i = 0
    while f"dec{i}.w" in arrays:
        dec.append(arrays[f"dec{i}.w"].shape[0])
        i += 1
    i = 0
    while f"den{i}.w" in arrays:
        den.append(arrays[f"den{i}.w"].shape[0])
        i += 1
    if not enc or not den or den[-1] != 1:
        raise ValueError("checkpoint does not contain a recognizable model")
    blocks = 0
    while f"depth_blk{blocks}.a.w" in arrays:
        blocks += 1
    width, in_dim = arrays["depth_in.w"].shape
    feature_channels = sum(dec) if dec else enc[-1]
    noise_dim = in_dim - feature_channels
    if noise_dim < 1:
        raise ValueError("inconsistent depth generator input width in checkpoint")
    kernel = arrays["enc0.w"].shape[2]
    return ModelConfig(
        image_size=image_size,
        encoder_channels=tuple(enc),
        decoder_channels=tuple(dec),
        density_hidden=tuple(den[:-1]),
        depth_width=width,
        depth_blocks=blocks,
        noise_dim=noise_dim,
        grid_width=grid_width,
        grid_height=grid_height,
        kernel=kernel,
    )


def params_from_arrays(cfg: ModelConfig, arrays: dict) -> ModelParams:
    template = init_params(cfg, seed=0)
    tensors = {}
    for name, t in template.tensors.items():
        if name not in arrays:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        arr = np.asarray(arrays[name], dtype=np.float32)
        if arr.shape != t.shape:
            raise ValueError(f"tensor {name!r} has shape {arr.shape}, expected {t.shape}")
        tensors[name] = ad.Tensor(arr, requires_grad=True)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# forward passes


def translate(sketch, params: ModelParams) -> ad.Tensor:
    """Line drawing -> fused multi-scale feature grid."""
    cfg = params.config
    t = params.tensors
    if isinstance(sketch, ad.Tensor):
        x = sketch
    else:
        x = ad.Tensor(np.asarray(sketch, dtype=np.float32))
    if x.values.ndim == 2:
        x = ad.reshape(x, (1,) + x.shape)
    if x.shape[1] != cfg.image_size or x.shape[2] != cfg.image_size:
        raise ad.ShapeError(
            f"sketch is {x.shape[1]}x{x.shape[2]}, model expects {cfg.image_size}"
        )

    pad = cfg.kernel // 2
    for i in range(len(cfg.encoder_channels)):
        x = ad.relu(ad.conv2d(x, t[f"enc{i}.w"], t[f"enc{i}.b"], stride=2, padding=pad))

    if not cfg.decoder_channels:
        return x

    scales = []
    for i in range(len(cfg.decoder_channels)):
        x = ad.bilinear_resize(x, x.shape[1] * 2, x.shape[2] * 2)
        x = ad.relu(ad.conv2d(x, t[f"dec{i}.w"], t[f"dec{i}.b"], stride=1, padding=pad))
        scales.append(x)

    finest = scales[-1]
    fused = [
        s if s.shape[1:] == finest.shape[1:] else ad.bilinear_resize(s, finest.shape[1], finest.shape[2])
        for s in scales
    ]
    return ad.concat_channels(fused)


def predict_density(f: ad.Tensor, params: ModelParams) -> ad.Tensor:
    """Feature grid -> probability map over the sampling grid (H, W)."""
    cfg = params.config
    t = params.tensors
    pad = cfg.kernel // 2
    x = f
    if x.shape[1:] != (cfg.grid_height, cfg.grid_width):
        x = ad.bilinear_resize(x, cfg.grid_height, cfg.grid_width)
    n_hidden = len(cfg.density_hidden)
    for i in range(n_hidden):
        x = ad.relu(ad.conv2d(x, t[f"den{i}.w"], t[f"den{i}.b"], stride=1, padding=pad))
    x = ad.conv2d(x, t[f"den{n_hidden}.w"], t[f"den{n_hidden}.b"], stride=1, padding=pad)
    r = ad.relu(x)
    total = float(r.values.sum())
    if total < DENSITY_EPS:
        uniform = np.full(
            (cfg.grid_height, cfg.grid_width),
            1.0 / (cfg.grid_height * cfg.grid_width),
            dtype=r.values.dtype,
        )
        return ad.Tensor(uniform, dtype=r.values.dtype)
    out = ad.div_by_scalar(r, ad.add_const(ad.sum_all(r), DENSITY_EPS))
    return ad.reshape(out, (cfg.grid_height, cfg.grid_width))


def local_features(f: ad.Tensor, us, vs, params: ModelParams) -> ad.Tensor:
    """(N, C) feature rows for density-grid bins (u, v), interpolating when
    the feature grid and the density grid differ in resolution."""
    cfg = params.config
    us = np.asarray(us)
    vs = np.asarray(vs)
    if (us < 0).any() or (us >= cfg.grid_width).any() or (vs < 0).any() or (vs >= cfg.grid_height).any():
        raise ValueError("bin index outside the density grid")
    _, fh, fw = f.shape
    if (fh, fw) == (cfg.grid_height, cfg.grid_width):
        return ad.gather_spatial(f, vs * fw + us)
    xf = us / (cfg.grid_width - 1) * (fw - 1)
    yf = vs / (cfg.grid_height - 1) * (fh - 1)
    return ad.sample_bilinear(f, xf, yf)


def local_feature(f: ad.Tensor, u: int, v: int, params: ModelParams) -> ad.Tensor:
    """Single-location feature vector of length C."""
    row = local_features(f, np.array([u]), np.array([v]), params)
    return ad.reshape(row, (f.shape[0],))


def gen_depths(feats: ad.Tensor, noise: np.ndarray, params: ModelParams) -> ad.Tensor:
    """Batched depth generator: (N, C) features + (N, d) noise -> (N, 1)."""
    cfg = params.config
    t = params.tensors
    noise = np.asarray(noise, dtype=feats.values.dtype)
    if noise.shape != (feats.shape[0], cfg.noise_dim):
        raise ad.ShapeError(
            f"noise shape {noise.shape}, expected ({feats.shape[0]}, {cfg.noise_dim})"
        )
    x = ad.concat_cols(feats, ad.Tensor(noise, dtype=feats.values.dtype))
    h = ad.relu(ad.linear(x, t["depth_in.w"], t["depth_in.b"]))
    for i in range(cfg.depth_blocks):
        inner = ad.relu(ad.linear(h, t[f"depth_blk{i}.a.w"], t[f"depth_blk{i}.a.b"]))
        h = ad.add(h, ad.linear(inner, t[f"depth_blk{i}.b.w"], t[f"depth_blk{i}.b.b"]))
    return ad.linear(h, t["depth_out.w"], t["depth_out.b"])


def gen_depth(f, noise, params: ModelParams) -> ad.Tensor:
    """Scalar depth for one local feature vector and one noise vector."""
    if not isinstance(f, ad.Tensor):
        f = ad.Tensor(np.asarray(f, dtype=np.float32))
    row = ad.reshape(f, (1, f.size))
    out = gen_depths(row, np.asarray(noise).reshape(1, -1), params)
    return ad.reshape(out, ())
