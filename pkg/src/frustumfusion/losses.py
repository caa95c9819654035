"""Training objectives: unsupervised multi-view depth supervision for the
cascade (photometric + smoothness), and the SDF-side terms (color
consistency, Eikonal, sparseness, pseudo-depth, pseudo-point SDF) with the
two-phase weight schedule."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import cameras as cg
from .frustum import LEVEL_SCALES

LEVEL_WEIGHTS = (0.5, 1.0, 2.0)     # coarse -> fine
SMOOTHNESS_WEIGHT = 0.1
TAU_SPARSE = 100.0
LAMBDA_CC = 1.0
LAMBDA_EIK = 0.1
LAMBDA_SPA = 0.02
LAMBDA_PDC_AFTER = 0.05
LAMBDA_PGS_AFTER = 1.0


@dataclass
class LossSchedule:
    """Step schedule for the pseudo-geometry terms: both weights are zero
    before ``boundary`` iterations and jump to their target values at it."""

    boundary: int
    pdc_after: float = LAMBDA_PDC_AFTER
    pgs_after: float = LAMBDA_PGS_AFTER

    def weights(self, iteration):
        if iteration >= self.boundary:
            return self.pdc_after, self.pgs_after
        return 0.0, 0.0


@dataclass
class LossReport:
    dep: float = 0.0
    cc: float = 0.0
    eik: float = 0.0
    spa: float = 0.0
    pdc: float = 0.0
    pgs: float = 0.0
    total: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        out = {k: getattr(self, k)
               for k in ("dep", "cc", "eik", "spa", "pdc", "pgs", "total")}
        out.update(self.extras)
        return out


def downsample_image(img, factor):
    """Average-pool an image (3, h, w) by an integer factor."""
    if factor == 1:
        return img
    c, h, w = img.shape
    return img.reshape(c, h // factor, factor, w // factor,
                       factor).mean(axis=(2, 4))


def photometric_term(level, ref_image, src_images, src_cams):
    """Min-over-sources L1 photometric error for one view at one level.

    ref_image: (3, h, w) ndarray at level resolution; src_images: list of
    full-resolution-consistent (3, h, w) source images (same level);
    src_cams: matching level-scaled cameras. The predicted depth inverse-
    warps each source onto the reference; occlusions are handled by taking
    the per-pixel minimum over sources.
    """
    h, w = level.depth.shape
    grid = cg.pixel_grid(w, h)
    depth_flat = ad.reshape(level.depth, (h * w,))
    ref_flat = ref_image.reshape(3, -1).T.astype(level.depth.dtype)
    coords = ad.stack([cg.warp_tensor(level.camera, cam, grid, depth_flat)
                       for cam in src_cams], axis=0)      # (S, P, 2)
    vols = ad.Tensor(np.ascontiguousarray(
        np.stack(src_images)).astype(level.depth.dtype))
    sampled, _ = ad.grid_sample_2d(vols, coords)          # (S, P, 3)
    diff = ad.absolute(ad.subtract(sampled, ad.Tensor(ref_flat[None])))
    per_src = ad.mean(diff, axis=2)                       # (S, P)
    best = ad.reduce_min(per_src, axis=0)
    return ad.mean(best)


def smoothness_term(level, ref_image):
    """Edge-aware first-order depth smoothness at one level."""
    depth = level.depth
    img = np.asarray(ref_image, dtype=depth.dtype)
    gx_img = np.abs(np.diff(img, axis=2)).mean(axis=0)    # (h, w-1)
    gy_img = np.abs(np.diff(img, axis=1)).mean(axis=0)    # (h-1, w)
    wx = ad.Tensor(np.exp(-gx_img))
    wy = ad.Tensor(np.exp(-gy_img))
    dx = ad.absolute(ad.subtract(depth[:, 1:], depth[:, :-1]))
    dy = ad.absolute(ad.subtract(depth[1:, :], depth[:-1, :]))
    return ad.add(ad.mean(ad.multiply(dx, wx)), ad.mean(ad.multiply(dy, wy)))


def multi_view_depth_loss(frustums_by_view, images, cams, sources_of,
                          level_weights=LEVEL_WEIGHTS,
                          smoothness_weight=SMOOTHNESS_WEIGHT):
    """Unsupervised depth supervision summed over views and levels.

    frustums_by_view: {view: [FrustumLevel] * L}; images: {view: (3, h, w)
    float ndarray at full resolution}; cams: {view: Camera}; sources_of:
    {view: [source ids]}.
    """
    total = None
    n_levels = len(next(iter(frustums_by_view.values())))
    pooled = {}
    for vid, img in images.items():
        pooled[vid] = {j: downsample_image(img,
                                           int(round(1 / LEVEL_SCALES[j])))
                       for j in range(n_levels)}
    for vid in sorted(frustums_by_view):
        for j, level in enumerate(frustums_by_view[vid]):
            srcs = sources_of[vid]
            term = photometric_term(
                level, pooled[vid][j],
                [pooled[s][j] for s in srcs],
                [cams[s].scaled(LEVEL_SCALES[j]) for s in srcs])
            term = ad.add(term, ad.multiply(
                smoothness_term(level, pooled[vid][j]), smoothness_weight))
            term = ad.multiply(term, float(level_weights[j]))
            total = term if total is None else ad.add(total, term)
    return total


def color_loss(rendered, gt_colors, covered):
    """Mean per-ray L1 between rendered and ground-truth colors over
    covered rays; zero (disabled) when nothing is covered."""
    n_valid = int(covered.sum())
    if n_valid == 0:
        return ad.Tensor(np.zeros((), dtype=rendered.dtype)), False
    diff = ad.mean(ad.absolute(ad.subtract(
        rendered, ad.Tensor(np.asarray(gt_colors,
                                       dtype=rendered.dtype)))), axis=1)
    masked = ad.multiply(diff, ad.Tensor(
        covered.astype(rendered.dtype)))
    return ad.multiply(ad.sum_(masked), 1.0 / n_valid), True


def eikonal_loss(gradients):
    """gradients: Tensor (P, 3) of spatial SDF gradients."""
    sq = ad.sum_(ad.multiply(gradients, gradients), axis=1)
    norm = ad.sqrt(ad.add(sq, 1e-12))
    dev = ad.subtract(norm, 1.0)
    return ad.mean(ad.multiply(dev, dev))


def sparseness_loss(sdf_values, tau=TAU_SPARSE):
    """Mean exp(-tau * |s|) over ray samples."""
    return ad.mean(ad.exp(ad.multiply(ad.absolute(sdf_values), -tau)))


def pseudo_depth_loss(rendered_depth, labels, validity):
    """Masked mean L1 between rendered depth and the pseudo-depth label."""
    n_valid = int(validity.sum())
    if n_valid == 0:
        return ad.Tensor(np.zeros((), dtype=rendered_depth.dtype)), False
    diff = ad.absolute(ad.subtract(
        rendered_depth,
        ad.Tensor(np.asarray(labels, dtype=rendered_depth.dtype))))
    masked = ad.multiply(diff, ad.Tensor(
        validity.astype(rendered_depth.dtype)))
    return ad.multiply(ad.sum_(masked), 1.0 / n_valid), True


def pseudo_point_sdf_loss(sdf_values):
    """Mean |s| over points sampled from the pseudo point cloud."""
    if sdf_values is None or sdf_values.size == 0:
        return ad.Tensor(np.zeros((), dtype=np.float32)), False
    return ad.mean(ad.absolute(sdf_values)), True


def total_loss(terms, schedule, iteration, lambda_cc=LAMBDA_CC,
               lambda_eik=LAMBDA_EIK, lambda_spa=LAMBDA_SPA):
    """Combine term Tensors into the training scalar plus a LossReport.

    terms: dict with keys dep/cc/eik/spa/pdc/pgs mapping to scalar Tensors
    (missing or None entries are treated as disabled).
    """
    lam_pdc, lam_pgs = schedule.weights(iteration)
    weights = {"dep": 1.0, "cc": lambda_cc, "eik": lambda_eik,
               "spa": lambda_spa, "pdc": lam_pdc, "pgs": lam_pgs}
    report = LossReport()
    total = None
    for name, lam in weights.items():
        term = terms.get(name)
        if term is None:
            continue
        setattr(report, name, float(term.item()))
        if lam == 0.0:
            continue
        contrib = ad.multiply(term, float(lam))
        total = contrib if total is None else ad.add(total, contrib)
    if total is None:
        total = ad.Tensor(np.zeros((), dtype=np.float32))
    report.total = float(total.item())
    return total, report
