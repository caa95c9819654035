"""SDF prediction, blending-weight color estimation, cascade ray sampling
and NeuS-style differentiable volume rendering.

Scene convention: geometry normalized to the unit bounding sphere. Ray
samples are parameterized by ray length t along unit directions; camera
depth z = t * dir_z converts between the two.
"""

import numpy as np

from . import autodiff as ad
from .nnlayers import MLP, Linear

ENCODING_OCTAVES = 6
SDF_HIDDEN = 128
SDF_LAYERS = 4
SOFTPLUS_BETA = 100.0
INIT_RADIUS = 0.5
INIT_SHARPNESS = 30.0
ALPHA_EPS = 1e-6


def positional_encoding(p):
    """p: Tensor (P, 3) -> (P, 3 + 3*2*ENCODING_OCTAVES).

    Concatenates p with sin/cos at octaves 2^0 .. 2^(F-1) per coordinate.
    """
    comps = [p]
    for f in range(ENCODING_OCTAVES):
        scaled = ad.multiply(p, float(2 ** f))
        comps.append(ad.sin(scaled))
        comps.append(ad.cos(scaled))
    return ad.concatenate(comps, axis=1)


def encoding_width():
    return 3 + 3 * 2 * ENCODING_OCTAVES


class SdfNetwork:
    """MLP s(p) = Phi(gamma(p), f_geo): softplus hidden layers, scalar out.

    Geometric initialization biases the initial field toward a sphere of
    radius INIT_RADIUS: encoding and feature input channels start at zero,
    hidden weights are zero-mean normal scaled by the output width, and
    the final layer starts near the mean gradient of a unit sphere SDF.
    """

    def __init__(self, store, name, feature_dim, rng, hidden=SDF_HIDDEN,
                 depth=SDF_LAYERS, radius=INIT_RADIUS, dtype=np.float32):
        self.feature_dim = feature_dim
        in_dim = encoding_width() + feature_dim
        dims = [in_dim] + [hidden] * depth + [1]
        self.layers = []
        for i in range(len(dims) - 1):
            lin = Linear(store, f"{name}.fc{i}", dims[i], dims[i + 1], rng,
                         dtype)
            cin, cout = dims[i], dims[i + 1]
            if i == len(dims) - 2:
                w = rng.normal(np.sqrt(np.pi) / np.sqrt(cin), 1e-4,
                               (cin, cout))
                b = np.full(cout, -radius)
            elif i == 0:
                w = np.zeros((cin, cout))
                w[:3, :] = rng.normal(0.0, np.sqrt(2) / np.sqrt(cout),
                                      (3, cout))
                b = np.zeros(cout)
            else:
                w = rng.normal(0.0, np.sqrt(2) / np.sqrt(cout), (cin, cout))
                b = np.zeros(cout)
            lin.w.data = w.astype(dtype)
            lin.b.data = b.astype(dtype)
            self.layers.append(lin)

    def __call__(self, encoded, features):
        """encoded: (P, enc); features: (P, feature_dim) -> sdf (P,)."""
        x = ad.concatenate([encoded, features], axis=1)
        for i, lin in enumerate(self.layers):
            x = lin(x)
            if i + 1 < len(self.layers):
                x = ad.softplus(x, SOFTPLUS_BETA)
        return ad.reshape(x, (x.shape[0],))


def predict_sdf(points, features, net):
    """points: Tensor (P, 3); features: Tensor (P, L*c) -> Tensor (P,)."""
    return net(positional_encoding(points), features)


def sdf_spatial_gradient(sdf_fn, points, method="stencil", eps=1e-3):
    """Spatial gradient of a scalar field at given points.

    points: ndarray (P, 3). 'stencil' evaluates the field at 6 offset
    points and returns differentiable central differences (a Tensor), which
    is what the Eikonal training loss consumes. 'autodiff' runs a backward
    pass through sdf_fn and returns the exact first-order gradient as an
    ndarray (verification and evaluation path).
    """
    pts = np.asarray(points)
    if pts.dtype not in (np.float32, np.float64):
        pts = pts.astype(np.float32)
    if method == "stencil":
        offsets = []
        for axis in range(3):
            e = np.zeros(3, dtype=pts.dtype)
            e[axis] = eps
            offsets.extend([pts + e, pts - e])
        batch = ad.Tensor(np.concatenate(offsets, axis=0))
        vals = sdf_fn(batch)                         # (6P,)
        n = pts.shape[0]
        comps = []
        for axis in range(3):
            hi = vals[2 * axis * n:(2 * axis + 1) * n]
            lo = vals[(2 * axis + 1) * n:(2 * axis + 2) * n]
            comps.append(ad.multiply(ad.subtract(hi, lo), 1.0 / (2 * eps)))
        return ad.stack(comps, axis=1)               # (P, 3) Tensor
    if method == "autodiff":
        t = ad.Tensor(pts)
        t.requires_grad = True
        vals = sdf_fn(t)
        ad.backward(vals.sum())
        return t.grad.copy()
    raise ValueError(f"unknown gradient method {method!r}")


class ColorBlendNetwork:
    """IBR-style blending: per-view color features plus their cross-view
    mean/variance pass through a shared MLP; blending logits combine that
    with the view-direction difference and the fused geometric feature."""

    def __init__(self, store, name, color_dim, geo_dim, rng, hidden=64,
                 dtype=np.float32):
        self.color_dim = color_dim
        self.geo_dim = geo_dim
        self.shared = MLP(store, f"{name}.shared", 3 * color_dim, hidden, 1,
                          hidden, rng, dtype)
        self.logit = MLP(store, f"{name}.logit", hidden + 3 + geo_dim,
                         hidden, 1, 1, rng, dtype)

    def __call__(self, color_feats, colors, dirs_delta, geo_features,
                 in_mask):
        """Blend per-view colors into point colors.

        color_feats: Tensor (V, P, c_col); colors: ndarray (V, P, 3)
        sampled source colors; dirs_delta: ndarray (V, P, 3) = r - r_i;
        geo_features: Tensor (P, geo_dim); in_mask: ndarray (V, P) bool.

        Returns (rgb Tensor (P, 3), covered ndarray (P,) bool, weights
        Tensor (V, P)). Uncovered points get zero color.
        """
        v, p, c = color_feats.shape
        u = ad.mean(color_feats, axis=0, keepdims=True)      # (1, P, c)
        var = ad.subtract(ad.mean(ad.multiply(color_feats, color_feats),
                                  axis=0, keepdims=True),
                          ad.multiply(u, u))
        ub = ad.broadcast_to(u, (v, p, c))
        vb = ad.broadcast_to(var, (v, p, c))
        x = ad.concatenate([color_feats, ub, vb], axis=2)
        shared = self.shared(ad.reshape(x, (v * p, 3 * c)))  # (V*P, hidden)
        geo_rep = ad.broadcast_to(
            ad.reshape(geo_features, (1, p, self.geo_dim)),
            (v, p, self.geo_dim))
        logit_in = ad.concatenate(
            [shared,
             ad.Tensor(np.ascontiguousarray(
                 dirs_delta.reshape(v * p, 3)).astype(color_feats.dtype)),
             ad.reshape(geo_rep, (v * p, self.geo_dim))], axis=1)
        logits = ad.reshape(self.logit(logit_in), (v, p))
        neg = (~in_mask).astype(logits.dtype) * -1e9
        masked = ad.add(logits, ad.Tensor(neg))
        weights = ad.softmax(masked, axis=0)                 # (V, P)
        covered = in_mask.any(axis=0)
        wmask = ad.multiply(weights, ad.Tensor(
            covered.astype(logits.dtype)[None, :]))
        colors_t = ad.Tensor(np.ascontiguousarray(colors).astype(
            logits.dtype))
        rgb = ad.sum_(ad.multiply(colors_t,
                                  ad.reshape(wmask, (v, p, 1))), axis=0)
        return rgb, covered, weights


class Sharpness:
    """Trainable inverse standard deviation of the logistic opacity
    density, kept positive through an exponential parameterization."""

    def __init__(self, store, name, init=INIT_SHARPNESS, dtype=np.float32):
        self.log_s = store.register(
            f"{name}.log_sharpness",
            np.asarray([np.log(init)], dtype=dtype))

    def value(self):
        return ad.exp(self.log_s)


def render_rays(t_vals, sdf, colors, sharpness):
    """NeuS-style rendering of ray batches.

    t_vals: ndarray (X, Y) increasing sample distances; sdf: Tensor (X, Y);
    colors: Tensor (X, Y, 3); sharpness: Tensor (1,).

    Discrete opacity: alpha_k = max((sig(s*sdf_k) - sig(s*sdf_{k+1})) /
    (sig(s*sdf_k) + eps), 0); weights are alpha * exclusive transmittance.
    Returns (color (X, 3), depth (X,), weights (X, Y-1)).
    """
    x, y = sdf.shape
    if y < 2:
        raise ad.ShapeError("render_rays needs at least 2 samples per ray")
    s = ad.reshape(sharpness, (1, 1))
    sig = ad.sigmoid(ad.multiply(sdf, ad.broadcast_to(s, sdf.shape)))
    prev = sig[:, :-1]
    nxt = sig[:, 1:]
    alpha = ad.relu(ad.divide(ad.subtract(prev, nxt),
                              ad.add(prev, ALPHA_EPS)))
    one_minus = ad.subtract(1.0, alpha)
    trans = ad.cumprod(one_minus, axis=1)
    ones = ad.Tensor(np.ones((x, 1), dtype=sdf.dtype))
    trans_excl = ad.concatenate([ones, trans[:, :-1]], axis=1)
    weights = ad.multiply(alpha, trans_excl)            # (X, Y-1)
    wexp = ad.reshape(weights, (x, y - 1, 1))
    color = ad.sum_(ad.multiply(colors[:, :-1, :], wexp), axis=1)
    tv = ad.Tensor(np.asarray(t_vals[:, :-1], dtype=sdf.dtype))
    depth = ad.sum_(ad.multiply(weights, tv), axis=1)
    return color, depth, weights


def probability_moments(prob, hypotheses):
    """Per-pixel mean/std of the depth distribution.

    prob: ndarray (d, h, w) summing to 1 over axis 0; hypotheses provides
    the per-pixel ladder. Returns (alpha (h, w), beta (h, w)).
    """
    vals = hypotheses.values()
    alpha = (prob * vals).sum(axis=0)
    beta = np.sqrt(np.maximum(((vals - alpha[None]) ** 2 * prob).sum(axis=0),
                              0.0))
    return alpha, beta


def sample_pdf(bins, weights, n_samples, rng=None):
    """Inverse-CDF sampling of n_samples positions from a piecewise-constant
    distribution over bins. bins: (X, B+1); weights: (X, B)."""
    weights = weights + 1e-5
    pdf = weights / weights.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((pdf.shape[0], 1)),
                          np.cumsum(pdf, axis=1)], axis=1)
    if rng is None:
        u = np.broadcast_to(
            np.linspace(0.5 / n_samples, 1.0 - 0.5 / n_samples, n_samples),
            (pdf.shape[0], n_samples)).copy()
    else:
        u = rng.random((pdf.shape[0], n_samples))
    rows = []
    for r in range(cdf.shape[0]):
        rows.append(np.searchsorted(cdf[r], u[r], side="right"))
    inds = np.stack(rows, axis=0)
    below = np.clip(inds - 1, 0, cdf.shape[1] - 1)
    above = np.clip(inds, 0, cdf.shape[1] - 1)
    cdf_lo = np.take_along_axis(cdf, below, axis=1)
    cdf_hi = np.take_along_axis(cdf, above, axis=1)
    bins_lo = np.take_along_axis(bins, below, axis=1)
    bins_hi = np.take_along_axis(bins, above, axis=1)
    denom = np.where(cdf_hi - cdf_lo < 1e-8, 1.0, cdf_hi - cdf_lo)
    frac = (u - cdf_lo) / denom
    return bins_lo + frac * (bins_hi - bins_lo)


def cascade_sample_ranges(alpha, beta, depth_min, depth_max, beta_floor):
    """Adaptive per-ray depth ranges [alpha - beta, alpha + beta], with
    beta floored and the result clamped to the camera depth range.
    Degenerate ranges fall back to the full range."""
    b = np.maximum(beta, beta_floor)
    t_near = np.maximum(alpha - b, depth_min)
    t_far = np.minimum(alpha + b, depth_max)
    bad = t_near >= t_far
    t_near = np.where(bad, depth_min, t_near)
    t_far = np.where(bad, depth_max, t_far)
    return t_near, t_far


def uniform_samples(t_near, t_far, n, rng=None):
    """Stratified (or midpoint when rng is None) samples in [t_near, t_far].

    Returns (X, n) increasing."""
    x = t_near.shape[0]
    edges = np.linspace(0.0, 1.0, n + 1)
    lo = edges[:-1][None, :]
    if rng is None:
        frac = lo + 0.5 / n
    else:
        frac = lo + rng.random((x, n)) / n
    return t_near[:, None] + (t_far - t_near)[:, None] * frac


def importance_samples(t_coarse, weights, n_fine, rng=None):
    """NeuS-style hierarchical sampling from coarse rendering weights.

    t_coarse: (X, Yc); weights: (X, Yc-1) ndarray. Returns (X, n_fine).
    """
    return sample_pdf(t_coarse, weights, n_fine, rng=rng)


def merge_sorted(t_a, t_b):
    """Concatenate and sort sample positions per ray."""
    return np.sort(np.concatenate([t_a, t_b], axis=1), axis=1)
