"""Per-view cost frustums, their regularization into probability volumes,
depth maps, geometric frustums and adaptive weights, and the cascade driver.

A cost frustum compares the reference view's features against all source
views warped onto the reference frustum; aggregation is the per-channel
variance across views with the reference included. Out-of-bounds warped
samples contribute zeros and still count in the denominator.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cameras as cg
from .nnlayers import Conv3d, ConvTranspose3d

LEVEL_SCALES = (0.25, 0.5, 1.0)


@dataclass
class FrustumLevel:
    """Everything one cascade level produces for one reference view."""

    level: int
    camera: cg.Camera              # scaled to this level's resolution
    hypotheses: cg.DepthHypotheses
    volume: ad.Tensor              # V: (c, d, h, w)
    prob: ad.Tensor                # P: (d, h, w), softmax over d
    depth: ad.Tensor               # D: (h, w) soft-argmax depth
    geo: ad.Tensor                 # G: (c, d, h, w)
    weight: ad.Tensor              # A: (d, h, w) in (0, 1)


@dataclass
class LevelBatch:
    """One cascade level for all reference views, kept in batch form so
    point sampling can slice a view range without per-view graph nodes."""

    level: int
    refs: list                     # view ids in batch order
    geo: ad.Tensor                 # (R, c, d, h, w)
    weight: ad.Tensor              # (R, d, h, w)
    cams: list                     # level-scaled cameras, refs order
    hyps: list                     # DepthHypotheses, refs order


class CascadeResult(dict):
    """{ref_id: [FrustumLevel] * L} plus the per-level batch tensors."""

    def __init__(self, per_view, level_batches):
        super().__init__(per_view)
        self.level_batches = level_batches


def build_cost_frustum(ref_feat, ref_cam, srcs, hypotheses):
    """Warped-feature variance cost volume.

    ref_feat: Tensor (c, h, w); srcs: list of (view_id, feat Tensor
    (c, h, w), Camera); hypotheses: DepthHypotheses at this resolution.
    Sources are accumulated in ascending view-id order so the result is
    exactly permutation-invariant. Returns Tensor (c, d, h, w).
    """
    if not srcs:
        raise ValueError("build_cost_frustum needs at least one source view")
    srcs = sorted(srcs, key=lambda s: s[0])
    c, h, w = ref_feat.shape
    d = hypotheses.count
    dtype = ref_feat.dtype

    grid = cg.pixel_grid(w, h)                       # (h*w, 2)
    pix = np.tile(grid, (d, 1))                      # (d*h*w, 2)
    depths = hypotheses.values().reshape(-1)         # (d*h*w,)
    # reference-pixel lifts are shared by every source view
    world = cg.back_project(ref_cam, pix[:, 0], pix[:, 1], depths)
    coords = np.empty((len(srcs), d * h * w, 2), dtype=dtype)
    for i, (_, _, cam) in enumerate(srcs):
        uv, z = cg.project(cam, world)
        uv = np.where((z > 0)[..., None], uv, -1e6)
        coords[i] = uv.astype(dtype)

    feats = ad.stack([f for _, f, _ in srcs], axis=0)    # (S, c, h, w)
    sampled, _ = ad.grid_sample_2d(feats, ad.Tensor(coords))  # (S, P, c)
    warped = ad.reshape(ad.transpose(sampled, (0, 2, 1)),
                        (len(srcs), c, d, h, w))

    ref_vol = ad.broadcast_to(ad.reshape(ref_feat, (1, c, 1, h, w)),
                              (1, c, d, h, w))
    all_vols = ad.concatenate([ref_vol, warped], axis=0)  # (N, c, d, h, w)
    mean = ad.mean(all_vols, axis=0)
    mean_sq = ad.mean(ad.multiply(all_vols, all_vols), axis=0)
    return ad.subtract(mean_sq, ad.multiply(mean, mean))


def _down_strides(shape):
    """Per-axis stride choice: halve only axes that are even and >= 4, so
    tiny volumes (few hypotheses, small tiles) still pass the network."""
    return tuple(2 if (s % 2 == 0 and s >= 4) else 1 for s in shape)


class CostRegularizer:
    """3-scale 3D encoder-decoder (c -> 2c -> 4c, stride-2 down,
    transposed-conv up, skip additions; the full-resolution skip is the raw
    cost volume) producing the intermediate volume V, the probability
    volume P (1x1x1 head + depth softmax) and the soft-argmax depth D."""

    def __init__(self, store, name, channels, rng, dtype=np.float32):
        c = channels
        self.enc1 = Conv3d(store, f"{name}.enc1", c, 2 * c, 3, 1, rng, dtype)
        self.enc2 = Conv3d(store, f"{name}.enc2", 2 * c, 4 * c, 3, 1, rng,
                           dtype)
        self.dec1 = ConvTranspose3d(store, f"{name}.dec1", 4 * c, 2 * c, 3,
                                    1, rng, dtype)
        self.dec0 = ConvTranspose3d(store, f"{name}.dec0", 2 * c, c, 3, 1,
                                    rng, dtype)
        self.prob_head = Conv3d(store, f"{name}.prob_head", c, 1, 1, 0, rng,
                                dtype)

    def __call__(self, cost, depth_values):
        """cost: (B, c, d, h, w); depth_values: (B, d, h, w) ndarray.

        Returns V (B, c, d, h, w), P (B, d, h, w), D (B, h, w).
        """
        s1 = _down_strides(cost.shape[2:])
        x1 = ad.relu(self.enc1(cost, stride=s1))
        s2 = _down_strides(x1.shape[2:])
        x2 = ad.relu(self.enc2(x1, stride=s2))
        op2 = tuple(s - 1 for s in s2)
        y1 = ad.add(ad.relu(self.dec1(x2, stride=s2, output_padding=op2)),
                    x1)
        op1 = tuple(s - 1 for s in s1)
        volume = ad.add(ad.relu(self.dec0(y1, stride=s1,
                                          output_padding=op1)), cost)
        logits = self.prob_head(volume)                  # (B, 1, d, h, w)
        b, _, d, h, w = logits.shape
        prob = ad.softmax(ad.reshape(logits, (b, d, h, w)), axis=1)
        vals = ad.Tensor(np.asarray(depth_values, dtype=cost.dtype))
        depth = ad.sum_(ad.multiply(prob, vals), axis=1)
        return volume, prob, depth


class GeoWeightNet:
    """Two 3x3x3 convolutions on V plus a c-channel geometric-feature head
    and a sigmoid-normalized 1-channel adaptive-weight head.

    The weight head starts at zero so the initial adaptive weight is the
    neutral 0.5 everywhere.
    """

    def __init__(self, store, name, channels, rng, dtype=np.float32):
        c = channels
        self.conv0 = Conv3d(store, f"{name}.conv0", c, c, 3, 1, rng, dtype)
        self.conv1 = Conv3d(store, f"{name}.conv1", c, c, 3, 1, rng, dtype)
        self.geo_head = Conv3d(store, f"{name}.geo_head", c, c, 1, 0, rng,
                               dtype)
        self.weight_head = Conv3d(store, f"{name}.weight_head", c, 1, 1, 0,
                                  rng, dtype, zero_init=True)

    def __call__(self, volume):
        """volume: (B, c, d, h, w) -> (G (B, c, d, h, w), A (B, d, h, w))."""
        x = ad.relu(self.conv0(volume))
        x = ad.relu(self.conv1(x))
        geo = self.geo_head(x)
        b, _, d, h, w = geo.shape
        raw = self.weight_head(x)
        weight = ad.sigmoid(ad.reshape(raw, (b, d, h, w)))
        return geo, weight


def run_cascade(pyramids, cams, ref_ids, sources_of, psi1, psi2,
                depth_counts, interval_scales, hypotheses_override=None):
    """Drive the coarse-to-fine cascade for a set of reference views.

    pyramids: {view_id: [Tensor (c, h_j, w_j)] per level}; cams: {view_id:
    Camera at full resolution}; ref_ids: iterable of reference view ids;
    sources_of: {ref_id: list of source view ids}; psi1/psi2: shared
    regularizers (same parameters for every view and level).

    Returns {ref_id: [FrustumLevel] * L}. The depth map that seeds the next
    level's hypotheses is detached: hypothesis placement is treated as
    sampling, not as a differentiable path. ``hypotheses_override``
    ({ref: [DepthHypotheses]}) replays a previously captured ladder set,
    which finite-difference checks use to hold that sampling fixed.
    """
    levels = len(depth_counts)
    ref_ids = list(ref_ids)
    out = {r: [] for r in ref_ids}
    prev_depth = {r: None for r in ref_ids}
    level_batches = []
    for j in range(levels):
        scale = LEVEL_SCALES[j] if j < len(LEVEL_SCALES) else 1.0
        costs, vals, hyps, level_cams = [], [], [], {}
        for r in ref_ids:
            ref_cam = cams[r].scaled(scale)
            level_cams[r] = ref_cam
            feat = pyramids[r][j]
            h, w = feat.shape[1:]
            if hypotheses_override is not None:
                hyp = hypotheses_override[r][j]
            else:
                hyp = cg.generate_hypotheses(
                    j, prev_depth[r], ref_cam, depth_counts,
                    interval_scales, (h, w))
            srcs = [(s, pyramids[s][j], cams[s].scaled(scale))
                    for s in sources_of[r]]
            costs.append(build_cost_frustum(feat, ref_cam, srcs, hyp))
            vals.append(hyp.values())
            hyps.append(hyp)
        batch = ad.stack(costs, axis=0)
        volume, prob, depth = psi1(batch, np.stack(vals, axis=0))
        geo, weight = psi2(volume)
        level_batches.append(LevelBatch(
            level=j, refs=list(ref_ids), geo=geo, weight=weight,
            cams=[level_cams[r] for r in ref_ids], hyps=list(hyps)))
        for i, r in enumerate(ref_ids):
            out[r].append(FrustumLevel(
                level=j, camera=level_cams[r], hypotheses=hyps[i],
                volume=volume[i], prob=prob[i], depth=depth[i],
                geo=geo[i], weight=weight[i]))
            prev_depth[r] = out[r][-1].depth.data
    return CascadeResult(out, level_batches)
