"""Sampling geometric features/weights from cascade frustums at arbitrary
3D points, and fusing them across levels (concatenation) and across views
(weight-normalized sum).

Out-of-bounds policy: a sample whose interpolation support is not fully
inside a frustum contributes zero feature and zero weight. A point outside
every view's frustum therefore fuses to the zero feature, which the SDF
network treats as position-only evidence.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cameras as cg

FUSION_EPS = 1e-8
FULL_COVER_TOL = 1e-6


@dataclass
class FrustumSample:
    """Per-view, per-level point sample."""

    g: np.ndarray        # (c,) feature
    a: float             # scalar weight
    in_bounds: bool


@dataclass
class FusedFeature:
    features: ad.Tensor      # (P, stages*c)
    total_weight: ad.Tensor  # (P,)


def _project_points(camera, points):
    """points: Tensor (P, 3) -> Tensor (P, 3) of (u, v, z)."""
    return cg.project_tensor(camera, points)


def sample_level(levels, points):
    """Sample one cascade level of several views at common 3D points.

    levels: list of FrustumLevel (same level index, one per view); points:
    Tensor (P, 3) or ndarray. Returns (g (V, P, c) Tensor, a (V, P) Tensor,
    in_bounds (V, P) bool ndarray); g and a are zeroed outside full
    interpolation support (hard mask).
    """
    if not isinstance(points, ad.Tensor):
        points = ad.Tensor(np.asarray(points, dtype=levels[0].geo.dtype))
    c = levels[0].geo.shape[0]
    vols, uvzs, starts, steps = [], [], [], []
    for lv in levels:
        _, d, h, w = lv.geo.shape
        vols.append(ad.concatenate(
            [lv.geo, ad.reshape(lv.weight, (1, d, h, w))], axis=0))
        uvzs.append(_project_points(lv.camera, points))
        starts.append(lv.hypotheses.start)
        steps.append(lv.hypotheses.step)
    vol = ad.stack(vols, axis=0)                     # (V, c+1, d, h, w)
    uvz = ad.stack(uvzs, axis=0)                     # (V, P, 3)
    start = np.stack(starts, axis=0)
    step = np.asarray(steps)
    out, cover = ad.frustum_sample(vol, uvz, start, step)
    in_bounds = cover > 1.0 - FULL_COVER_TOL
    mask = in_bounds.astype(out.dtype)
    g = ad.multiply(out[:, :, :c], ad.Tensor(mask[:, :, None]))
    a = ad.multiply(out[:, :, c], ad.Tensor(mask))
    return g, a, in_bounds


def fuse_views(per_level, mode="weighted"):
    """Cross-level concat + cross-view fusion.

    per_level: list over levels of (g (V, P, c), a (V, P)) Tensors for the
    same V views in ascending view-id order. Weighted mode normalizes by
    the summed per-view weights (with a small epsilon); 'addition' is the
    ablation baseline, an unweighted mean over views.
    """
    g_cat = ad.concatenate([g for g, _ in per_level], axis=2)  # (V,P,L*c)
    a_sum = per_level[0][1]
    for _, a in per_level[1:]:
        a_sum = ad.add(a_sum, a)                               # (V, P)
    v = g_cat.shape[0]
    if mode == "weighted":
        weighted = ad.multiply(g_cat, ad.reshape(
            a_sum, (v, a_sum.shape[1], 1)))
        num = ad.sum_(weighted, axis=0)                        # (P, L*c)
        den = ad.add(ad.sum_(a_sum, axis=0), FUSION_EPS)       # (P,)
        features = ad.divide(num, ad.reshape(den, (den.shape[0], 1)))
    elif mode == "addition":
        features = ad.mean(g_cat, axis=0)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    total = ad.sum_(a_sum, axis=0)
    return FusedFeature(features=features, total_weight=total)


def sample_level_batch(batch, n_views, points):
    """Fast path of sample_level over a LevelBatch view prefix.

    Slices the first n_views entries of the batched G/A tensors directly
    (one graph node instead of per-view stacks). Semantics are identical
    to sample_level on the matching FrustumLevel list.
    """
    if not isinstance(points, ad.Tensor):
        points = ad.Tensor(np.asarray(points, dtype=batch.geo.dtype))
    k = n_views
    _, c, d, h, w = batch.geo.shape
    vol = ad.concatenate(
        [batch.geo[0:k],
         ad.reshape(batch.weight[0:k], (k, 1, d, h, w))], axis=1)
    uvz = ad.stack([_project_points(batch.cams[i], points)
                    for i in range(k)], axis=0)
    start = np.stack([hyp.start for hyp in batch.hyps[:k]], axis=0)
    step = np.asarray([hyp.step for hyp in batch.hyps[:k]])
    out, cover = ad.frustum_sample(vol, uvz, start, step)
    in_bounds = cover > 1.0 - FULL_COVER_TOL
    mask = in_bounds.astype(out.dtype)
    g = ad.multiply(out[:, :, :c], ad.Tensor(mask[:, :, None]))
    a = ad.multiply(out[:, :, c], ad.Tensor(mask))
    return g, a, in_bounds


def _batch_prefix(frustums_by_view, ids):
    """LevelBatch list when ids are exactly a prefix of the batch refs."""
    batches = getattr(frustums_by_view, "level_batches", None)
    if batches and batches[0].refs[:len(ids)] == ids:
        return batches
    return None


def sample_and_fuse(frustums_by_view, points, stages=None, mode="weighted",
                    view_ids=None):
    """Full fusion for points against the given views' cascade frustums.

    frustums_by_view: {view_id: [FrustumLevel] * L} (a CascadeResult enables
    the batched fast path); ``stages`` limits the fused levels to the first
    ``stages`` ones (ablation axis); views are processed in ascending id
    order. ``view_ids`` restricts fusion to a subset of views.
    """
    ids = sorted(frustums_by_view) if view_ids is None else sorted(view_ids)
    n_levels = len(frustums_by_view[ids[0]])
    stages = n_levels if stages is None else int(stages)
    if not 1 <= stages <= n_levels:
        raise ValueError(f"stages must be in 1..{n_levels}")
    batches = _batch_prefix(frustums_by_view, ids)
    per_level = []
    for j in range(stages):
        if batches is not None:
            g, a, _ = sample_level_batch(batches[j], len(ids), points)
        else:
            levels = [frustums_by_view[i][j] for i in ids]
            g, a, _ = sample_level(levels, points)
        per_level.append((g, a))
    return fuse_views(per_level, mode=mode)


# ---------------------------------------------------------------------------
# single-point contract surface (used by tests and debugging tools)
# ---------------------------------------------------------------------------

def sample_frustum(level, camera, point):
    """Sample one frustum level at one 3D point. Returns a FrustumSample.

    ``camera`` is accepted for interface symmetry; the level carries its
    own resolution-matched camera.
    """
    del camera
    pts = np.asarray(point, dtype=np.float32).reshape(1, 3)
    g, a, in_bounds = sample_level([level], pts)
    return FrustumSample(g=g.data[0, 0].copy(), a=float(a.data[0, 0]),
                         in_bounds=bool(in_bounds[0, 0]))


def fuse(samples, mode="weighted"):
    """Fuse per-view, per-level FrustumSamples for a single point.

    samples: {view_id: [FrustumSample] * L}. Returns (f_geo ndarray, total
    weight float); mirrors fuse_views on plain arrays.
    """
    ids = sorted(samples)
    cats, weights = [], []
    for i in ids:
        cats.append(np.concatenate([s.g for s in samples[i]]))
        weights.append(sum(float(s.a) for s in samples[i]))
    cats = np.stack(cats, axis=0)
    weights = np.asarray(weights)
    if mode == "weighted":
        f = (weights[:, None] * cats).sum(axis=0) / (weights.sum()
                                                     + FUSION_EPS)
    elif mode == "addition":
        f = cats.mean(axis=0)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return f, float(weights.sum())
