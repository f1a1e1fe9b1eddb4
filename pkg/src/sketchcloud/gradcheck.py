"""Finite-difference verification of every backward rule.

The checker rebuilds the op graph on float64 copies of the inputs (the only
place doubles are used) and compares analytic gradients against central
differences. Relative error is max|analytic - numeric| / max(1, max|numeric|).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

DEFAULT_EPS = 1e-3
DEFAULT_RTOL = 1e-4


def numeric_gradient(fn, arrays, wrt, eps=DEFAULT_EPS):
    """Central-difference d(fn)/d(arrays[wrt]), elementwise."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(arrays)
        flat[i] = orig - eps
        lo = fn(arrays)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check(build, arrays, eps=DEFAULT_EPS):
    """Max relative error of the analytic gradient of a scalar-valued graph.

    `build` maps a list of Tensors to a scalar output Tensor; `arrays` are the
    leaf values.
    """
    leaves = [ad.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(leaves)
    ad.backward(out)

    def eval_fn(vals):
        consts = [ad.Tensor(v, dtype=np.float64) for v in vals]
        return build(consts).item()

    worst = 0.0
    for i, leaf in enumerate(leaves):
        numeric = numeric_gradient(eval_fn, arrays, i, eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
        denom = max(1.0, float(np.abs(numeric).max(initial=0.0)))
        err = float(np.abs(analytic - numeric).max(initial=0.0)) / denom
        worst = max(worst, err)
    return worst


def _away_from_zero(rng, shape, margin=0.15):
    """Random values in [-2, 2] kept away from 0 (kinks of relu/abs)."""
    x = rng.uniform(margin, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _suite(seed):
    rng = np.random.default_rng(seed)
    cases = {}

    x = rng.uniform(-2, 2, (3, 4))
    y = rng.uniform(-2, 2, (3, 4))
    s = rng.uniform(0.5, 2, ())
    cases["add"] = (lambda t: ad.sum_all(ad.mul(ad.add(t[0], t[1]), t[0])), [x, y])
    cases["add_scalar_operand"] = (
        lambda t: ad.sum_all(ad.mul(ad.add(t[0], t[1]), t[0])),
        [x, s],
    )
    cases["mul"] = (lambda t: ad.sum_all(ad.mul(t[0], t[1])), [x, y])
    cases["scale"] = (lambda t: ad.sum_all(ad.scale(t[0], -1.7)), [x])
    cases["add_const"] = (
        lambda t: ad.sum_all(ad.mul(ad.add_const(t[0], y), t[0])),
        [x],
    )
    cases["sum_all"] = (lambda t: ad.sum_all(ad.mul(t[0], t[0])), [x])
    cases["absolute"] = (
        lambda t: ad.sum_all(ad.absolute(t[0])),
        [_away_from_zero(rng, (4, 5))],
    )
    cases["relu"] = (
        lambda t: ad.sum_all(ad.mul(ad.relu(t[0]), t[0])),
        [_away_from_zero(rng, (4, 5))],
    )
    cases["div_by_scalar"] = (
        lambda t: ad.sum_all(ad.mul(ad.div_by_scalar(t[0], t[1]), t[0])),
        [x, rng.uniform(0.5, 2, ())],
    )
    cases["reshape"] = (
        lambda t: ad.sum_all(ad.mul(ad.reshape(t[0], (4, 3)), ad.reshape(t[0], (4, 3)))),
        [x],
    )

    xs = rng.uniform(-1, 1, (3, 5))
    ws = rng.uniform(-1, 1, (4, 5))
    bs = rng.uniform(-1, 1, (4,))
    cases["linear"] = (
        lambda t: ad.sum_all(ad.mul(ad.linear(t[0], t[1], t[2]), ad.linear(t[0], t[1], t[2]))),
        [xs, ws, bs],
    )

    xc = rng.uniform(-1, 1, (2, 6, 6))
    wc = rng.uniform(-1, 1, (3, 2, 3, 3))
    bc = rng.uniform(-1, 1, (3,))
    for name, stride, pad in (
        ("conv2d_s1p0", 1, 0),
        ("conv2d_s1p1", 1, 1),
        ("conv2d_s2p1", 2, 1),
    ):
        cases[name] = (
            lambda t, st=stride, pd=pad: ad.sum_all(
                ad.mul(ad.conv2d(t[0], t[1], t[2], st, pd), ad.conv2d(t[0], t[1], t[2], st, pd))
            ),
            [xc, wc, bc],
        )

    xr = rng.uniform(-1, 1, (2, 4, 5))
    cases["bilinear_resize_up"] = (
        lambda t: ad.sum_all(ad.mul(ad.bilinear_resize(t[0], 7, 9), ad.bilinear_resize(t[0], 7, 9))),
        [xr],
    )
    cases["bilinear_resize_down"] = (
        lambda t: ad.sum_all(ad.mul(ad.bilinear_resize(t[0], 3, 2), ad.bilinear_resize(t[0], 3, 2))),
        [xr],
    )

    xa = rng.uniform(-1, 1, (2, 3, 4))
    xb = rng.uniform(-1, 1, (1, 3, 4))
    cases["concat_channels"] = (
        lambda t: ad.sum_all(ad.mul(ad.concat_channels(t), ad.concat_channels(t))),
        [xa, xb],
    )
    ra = rng.uniform(-1, 1, (5, 2))
    rb = rng.uniform(-1, 1, (5, 3))
    cases["concat_cols"] = (
        lambda t: ad.sum_all(ad.mul(ad.concat_cols(t[0], t[1]), ad.concat_cols(t[0], t[1]))),
        [ra, rb],
    )

    gidx = rng.integers(0, 12, size=7)
    cases["gather_spatial"] = (
        lambda t: ad.sum_all(ad.mul(ad.gather_spatial(t[0], gidx), ad.gather_spatial(t[0], gidx))),
        [rng.uniform(-1, 1, (3, 3, 4))],
    )
    ridx = rng.integers(0, 5, size=8)
    cases["gather_rows"] = (
        lambda t: ad.sum_all(ad.mul(ad.gather_rows(t[0], ridx), ad.gather_rows(t[0], ridx))),
        [rng.uniform(-1, 1, (5, 3))],
    )
    # keep sample coords away from integer lattice points (kinks of bilinear)
    sx = rng.uniform(0.2, 0.8, size=6) + rng.integers(0, 3, size=6)
    sy = rng.uniform(0.2, 0.8, size=6) + rng.integers(0, 2, size=6)
    cases["sample_bilinear"] = (
        lambda t: ad.sum_all(ad.mul(ad.sample_bilinear(t[0], sx, sy), ad.sample_bilinear(t[0], sx, sy))),
        [rng.uniform(-1, 1, (2, 3, 4))],
    )
    return cases


def _model_and_loss_cases(seed):
    """Composite graphs: miniature model paths and both training losses."""
    from . import metrics, model

    rng = np.random.default_rng(seed + 1)
    cases = {}

    mini = model.ModelConfig(
        image_size=8,
        encoder_channels=(2, 3),
        decoder_channels=(3, 2),
        density_hidden=(3, 2),
        depth_width=5,
        depth_blocks=1,
        noise_dim=2,
        grid_width=8,
        grid_height=8,
    )
    template = model.init_params(mini, seed=seed + 2)
    names = list(template.tensors)
    shapes = [template.tensors[n].shape for n in names]
    sketch = rng.uniform(0, 1, (8, 8))
    gt_density = rng.uniform(0, 1, (8, 8))
    gt_density /= gt_density.sum()

    def rebuild(leaves):
        return model.ModelParams(mini, dict(zip(names, leaves)))

    def translate_loss(leaves):
        f = model.translate(sketch, rebuild(leaves))
        return ad.sum_all(ad.mul(f, f))

    cases["translate"] = (translate_loss, [template.tensors[n].values.copy() for n in names])

    def density_path_loss(leaves):
        p = rebuild(leaves)
        f = model.translate(sketch, p)
        mhat = model.predict_density(f, p)
        return metrics.density_l1(mhat, gt_density)

    cases["density_l1_loss"] = (
        density_path_loss,
        [template.tensors[n].values.copy() for n in names],
    )

    noise = rng.uniform(0, 1, (4, mini.noise_dim))
    feat_idx = rng.integers(0, 64, size=4)

    def depth_path_loss(leaves):
        p = rebuild(leaves)
        f = model.translate(sketch, p)
        feats = ad.gather_spatial(f, feat_idx)
        z = model.gen_depths(feats, noise, p)
        return ad.sum_all(ad.mul(z, z))

    cases["gen_depth"] = (depth_path_loss, [template.tensors[n].values.copy() for n in names])

    # chamfer loss w.r.t. the depth column, xy frozen
    xy = rng.uniform(-0.8, 0.8, (5, 2))
    gt_cloud = rng.uniform(-0.9, 0.9, (6, 3))
    z0 = rng.uniform(-0.5, 0.5, (5, 1))

    def chamfer_z(leaves):
        return metrics.chamfer_loss(leaves[0], xy, gt_cloud)

    cases["chamfer_loss"] = (chamfer_z, [z0])

    def predict_density_loss(leaves):
        p = rebuild(leaves)
        f = model.translate(sketch, p)
        mhat = model.predict_density(f, p)
        return ad.sum_all(ad.mul(mhat, mhat))

    cases["predict_density"] = (
        predict_density_loss,
        [template.tensors[n].values.copy() for n in names],
    )
    return cases


def _stop_gradient_error(seed):
    """stop_gradient defines its gradient (zero) rather than matching the
    value function, so it is checked against the contract analytically:
    d/dx sum(x + stop_gradient(x)) must be exactly 1."""
    rng = np.random.default_rng(seed + 99)
    x = ad.Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True, dtype=np.float64)
    ad.backward(ad.sum_all(ad.add(x, ad.stop_gradient(x))))
    return float(np.abs(x.grad - 1.0).max())


def run_suite(seed=0, rtol=DEFAULT_RTOL, include_model=True):
    """Run every gradient check; returns {name: max relative error}."""
    cases = _suite(seed)
    if include_model:
        cases.update(_model_and_loss_cases(seed))
    report = {}
    for name, (build, arrays) in cases.items():
        report[name] = check(build, arrays)
    report["stop_gradient"] = _stop_gradient_error(seed)
    return report


def suite_passes(report, rtol=DEFAULT_RTOL):
    return all(err < rtol for err in report.values())
