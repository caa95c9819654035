"""Geometric-consistency filtering of depth maps, fusion into a pseudo
point cloud, and pseudo-depth labels for the query view.

These run on detached snapshots of the finest-level cascade depth maps and
feed the pseudo-depth and pseudo-point SDF losses.
"""

from dataclasses import dataclass

import numpy as np

from . import cameras as cg
from ._kernels import active as _K

TAU_PX = 1.0
TAU_DEPTH = 0.01
N_MIN_CONSISTENT = 1
MERGE_RADIUS = 0.005


@dataclass
class ConsistencyMask:
    mask: np.ndarray    # (h, w) bool
    count: np.ndarray   # (h, w) int, consistent-view count


def _sample_depth(depth, uv):
    """Bilinear depth lookup; returns (values (P,), in_image (P,) bool)."""
    h, w = depth.shape
    vol = np.ascontiguousarray(depth[None, None].astype(np.float64))
    coords = np.ascontiguousarray(uv[None].astype(np.float64))
    vals, cover = _K.bilinear_gather(vol, coords)
    return vals[0, :, 0], cover[0].astype(bool)


def check_pair(depth_i, cam_i, depth_k, cam_k, tau_px=TAU_PX,
               tau_depth=TAU_DEPTH):
    """Forward-backward reprojection agreement of view i against view k.

    For each pixel p of view i: lift with depth_i, project into k, look up
    depth_k there, lift back and project into i again; consistent iff the
    round trip lands within tau_px pixels and tau_depth relative depth.
    Out-of-image or non-positive lookups are inconsistent.
    """
    h, w = depth_i.shape
    grid = cg.pixel_grid(w, h)
    d = depth_i.reshape(-1)
    ok = d > 0
    world = cg.back_project(cam_i, grid[:, 0], grid[:, 1],
                            np.where(ok, d, 1.0))
    uv_k, z_k = cg.project(cam_k, world)
    ok &= z_k > 0
    ok &= ((uv_k[:, 0] >= 0) & (uv_k[:, 0] <= w - 1)
           & (uv_k[:, 1] >= 0) & (uv_k[:, 1] <= h - 1))
    d_k, in_img = _sample_depth(depth_k, uv_k)
    ok &= in_img & (d_k > 0)
    world_back = cg.back_project(cam_k, uv_k[:, 0], uv_k[:, 1],
                                 np.where(ok, d_k, 1.0))
    uv_i, z_i = cg.project(cam_i, world_back)
    ok &= z_i > 0
    px_err = np.linalg.norm(uv_i - grid, axis=1)
    rel_err = np.abs(z_i - d) / np.where(d > 0, d, 1.0)
    consistent = ok & (px_err <= tau_px) & (rel_err <= tau_depth)
    return consistent.reshape(h, w)


def geometric_consistency(depths, cams, tau_px=TAU_PX, tau_depth=TAU_DEPTH,
                          n_min=N_MIN_CONSISTENT):
    """Per-view consistency masks against every other view.

    depths: {view_id: (h, w) ndarray}; cams: {view_id: Camera at the depth
    maps' resolution}. Returns {view_id: ConsistencyMask}; a pixel is kept
    when at least n_min other views agree with it.
    """
    ids = sorted(depths)
    out = {}
    for i in ids:
        count = np.zeros(depths[i].shape, dtype=np.int32)
        for k in ids:
            if k == i:
                continue
            count += check_pair(depths[i], cams[i], depths[k], cams[k],
                                tau_px, tau_depth)
        out[i] = ConsistencyMask(mask=(count >= n_min) & (depths[i] > 0),
                                 count=count)
    return out


@dataclass
class PseudoPointCloud:
    points: np.ndarray   # (n, 3)
    sources: np.ndarray  # (n,) view id of the first contributing view

    def __len__(self):
        return len(self.points)


def fuse_point_cloud(depths, cams, masks, merge_radius=MERGE_RADIUS):
    """Back-project every masked pixel and merge near-duplicates.

    Points falling in the same merge_radius voxel cell are averaged (their
    source tag is the smallest contributing view id); merge_radius=0 keeps
    the raw observations, each of which back-projects exactly to its
    masked depth.
    """
    pts, tags = [], []
    for i in sorted(depths):
        m = masks[i].mask
        if not m.any():
            continue
        h, w = depths[i].shape
        vs, us = np.nonzero(m)
        d = depths[i][vs, us]
        world = cg.back_project(cams[i], us.astype(np.float64),
                                vs.astype(np.float64), d)
        pts.append(world)
        tags.append(np.full(len(world), i, dtype=np.int32))
    if not pts:
        return PseudoPointCloud(points=np.zeros((0, 3)),
                                sources=np.zeros(0, dtype=np.int32))
    pts = np.concatenate(pts, axis=0)
    tags = np.concatenate(tags, axis=0)
    if merge_radius <= 0:
        return PseudoPointCloud(points=pts, sources=tags)
    cells = np.floor(pts / merge_radius).astype(np.int64)
    # stable order: first occurrence keeps the smallest (view, pixel) tag
    _, first_idx, inverse = np.unique(
        cells, axis=0, return_index=True, return_inverse=True)
    n = len(first_idx)
    sums = np.zeros((n, 3))
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    for ax in range(3):
        sums[:, ax] = np.bincount(inverse, weights=pts[:, ax], minlength=n)
    merged = sums / counts[:, None]
    return PseudoPointCloud(points=merged, sources=tags[first_idx])


def pseudo_depth_for_query(depth_query, mask_query):
    """Masked depth map as a pseudo-depth label with validity flags."""
    validity = mask_query.mask & (depth_query > 0)
    labels = np.where(validity, depth_query, 0.0)
    return labels, validity
