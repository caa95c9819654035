"""Mesh extraction from a trained model and metric evaluation against the
synthetic ground truth."""

import numpy as np

from . import autodiff as ad
from . import io_formats as iof
from . import meshing as mg


def build_eval_frustums(trainer, view_ids=None):
    """Frustums from a fixed set of input views (default: the training
    input set of iteration 0), detached for evaluation."""
    if view_ids is None:
        view_ids, _ = trainer.select_views(0)
    view_ids = list(view_ids)
    sources_of = {v: [s for s in view_ids if s != v] for v in view_ids}
    with ad.no_grad():
        frustums = trainer.model.build_frustums(
            trainer.images, trainer.cams, view_ids, sources_of)
    return frustums


def extract_mesh(trainer, resolution=None, view_ids=None, bbox=(-1.0, 1.0)):
    """Marching cubes over the learned SDF evaluated through fusion."""
    res = resolution or trainer.config.extract_resolution
    frustums = build_eval_frustums(trainer, view_ids)
    sdf_fn = trainer.model.sdf_fn(frustums)

    def field(pts):
        with ad.no_grad():
            return sdf_fn(pts).data

    grid = mg.sample_sdf_grid(field, bbox, res)
    return mg.marching_cubes(grid), frustums


def eikonal_metric(trainer, frustums, n_points=4096, seed=123):
    """Mean (|grad s| - 1)^2 over uniform bounding-sphere samples, using
    the exact autodiff spatial gradient."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n_points, 3))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    r = rng.random(n_points) ** (1.0 / 3.0)
    pts = (d * r[:, None]).astype(trainer.model.dtype)
    sdf_fn = trainer.model.sdf_fn(frustums)
    from .rendering import sdf_spatial_gradient
    grads = sdf_spatial_gradient(sdf_fn, pts, method="autodiff")
    norms = np.linalg.norm(grads, axis=1)
    return float(((norms - 1.0) ** 2).mean())


def chamfer_to_gt(mesh, dataset, n_samples=100_000, seed=7):
    """Chamfer distance between surface samples of the extracted mesh and
    of the ground-truth mesh."""
    gt_v, gt_f = iof.read_ply(dataset.gt_mesh_path)
    gt_mesh = mg.TriangleMesh(gt_v, gt_f)
    rng = np.random.default_rng(seed)
    a = mg.sample_mesh_points(mesh, n_samples, rng)
    b = mg.sample_mesh_points(gt_mesh, n_samples, rng)
    if len(a) == 0:
        return float("inf")
    return float(mg.chamfer(a, b))


def depth_mae(trainer, view_ids=None):
    """Mean absolute error of the finest cascade depth maps against the
    dataset's ground-truth depths, per view (invalid GT pixels excluded)."""
    ids = list(view_ids) if view_ids is not None \
        else list(range(trainer.dataset.n_views))
    depths, _ = trainer.finest_depths(ids)
    out = {}
    for v in ids:
        gt = trainer.dataset.gt_depths[v]
        valid = gt > 0
        if not valid.any():
            out[v] = float("nan")
            continue
        out[v] = float(np.abs(depths[v][valid] - gt[valid]).mean())
    return out


def evaluate(trainer, mesh, n_samples=None, seed=7):
    """Metrics dict: chamfer to GT plus per-view depth MAE."""
    n = n_samples or trainer.config.chamfer_samples
    metrics = {
        "chamfer": (float("inf") if mesh.is_empty()
                    else chamfer_to_gt(mesh, trainer.dataset, n, seed)),
        "mesh_vertices": int(len(mesh.vertices)),
        "mesh_faces": int(len(mesh.faces)),
        "depth_mae": {str(k): v for k, v in depth_mae(trainer).items()},
    }
    return metrics
