"""Synthetic multi-view datasets with exact ground truth.

Scenes are unions of analytic SDF primitives textured with value noise and
rendered by sphere tracing, so images, depth maps and the surface itself
are all exact oracles for the pipeline.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import cameras as cg
from . import io_formats as iof
from . import meshing as mg

TRACE_MAX_STEPS = 256
TRACE_EPS = 1e-5
GT_MESH_RESOLUTION = 256
BACKGROUND = (0.12, 0.12, 0.15)
AMBIENT = 0.25


@dataclass(frozen=True)
class Primitive:
    kind: str                    # sphere | box | rounded_box
    center: tuple
    size: tuple                  # sphere: (radius,); box: half extents;
    #                              rounded_box: half extents + (radius,)
    rotation_z: float = 0.0      # yaw in radians, boxes only

    def sdf(self, p):
        q = np.asarray(p, dtype=np.float64) - np.asarray(self.center)
        if self.rotation_z:
            ca, sa = np.cos(-self.rotation_z), np.sin(-self.rotation_z)
            q = q @ np.array([[ca, -sa, 0.0], [sa, ca, 0.0],
                              [0.0, 0.0, 1.0]]).T
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            half = np.asarray(self.size)
            a = np.abs(q) - half
            outside = np.linalg.norm(np.maximum(a, 0.0), axis=-1)
            inside = np.minimum(a.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "rounded_box":
            half = np.asarray(self.size[:3])
            rr = self.size[3]
            a = np.abs(q) - half
            outside = np.linalg.norm(np.maximum(a, 0.0), axis=-1)
            inside = np.minimum(a.max(axis=-1), 0.0)
            return outside + inside - rr
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def bounding_radius(self):
        c = np.linalg.norm(self.center)
        if self.kind == "sphere":
            return c + self.size[0]
        if self.kind == "box":
            return c + np.linalg.norm(self.size)
        return c + np.linalg.norm(self.size[:3]) + self.size[3]


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    noise_seed: int = 7
    noise_octaves: int = 3
    noise_base_res: int = 6
    light_dir: tuple = (0.35, -0.5, 0.8)
    camera_count: int = 6
    ring_radius: float = 2.2
    ring_elevation: float = 0.35      # radians above the equator
    image_size: int = 96

    def __post_init__(self):
        worst = max(p.bounding_radius() for p in self.primitives)
        if worst > 1.0 + 1e-9:
            raise ValueError(f"scene leaves the unit sphere (radius {worst})")
        if self.ring_radius <= 1.0:
            raise ValueError("camera ring must be outside the unit sphere")

    def sdf(self, p):
        vals = [prim.sdf(p) for prim in self.primitives]
        out = vals[0]
        for v in vals[1:]:
            out = np.minimum(out, v)
        return out

    def normals(self, p, eps=1e-5):
        p = np.asarray(p, dtype=np.float64)
        grads = np.empty_like(p)
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = eps
            grads[:, ax] = self.sdf(p + e) - self.sdf(p - e)
        n = np.linalg.norm(grads, axis=1, keepdims=True)
        return grads / np.maximum(n, 1e-12)


def default_scene(image_size=96, camera_count=6):
    """Desk-scale sphere-union-box scene inside the unit sphere."""
    return SceneSpec(
        primitives=(
            Primitive("sphere", (-0.18, 0.02, 0.08), (0.34,)),
            Primitive("box", (0.26, -0.02, -0.08), (0.22, 0.2, 0.22),
                      rotation_z=0.4),
        ),
        camera_count=camera_count,
        image_size=image_size,
    )


class ValueNoise:
    """Seeded multi-octave trilinear lattice noise over [-1, 1]^3, one
    independent channel per RGB component."""

    def __init__(self, seed, octaves, base_res):
        rng = np.random.default_rng(seed)
        self.levels = []
        for o in range(octaves):
            res = base_res * 2 ** o
            self.levels.append((rng.random((3, res, res, res)),
                                0.5 ** o))

    def __call__(self, p):
        p = np.asarray(p, dtype=np.float64)
        out = np.zeros((len(p), 3))
        wsum = 0.0
        for lattice, amp in self.levels:
            res = lattice.shape[1]
            x = (p + 1.0) * 0.5 * (res - 1)
            x = np.clip(x, 0.0, res - 1 - 1e-9)
            i0 = x.astype(np.int64)
            f = x - i0
            i1 = np.minimum(i0 + 1, res - 1)
            for c in range(3):
                lat = lattice[c]
                acc = np.zeros(len(p))
                for dz in (0, 1):
                    for dy in (0, 1):
                        for dx in (0, 1):
                            ii = i1[:, 0] if dx else i0[:, 0]
                            jj = i1[:, 1] if dy else i0[:, 1]
                            kk = i1[:, 2] if dz else i0[:, 2]
                            wx = f[:, 0] if dx else 1 - f[:, 0]
                            wy = f[:, 1] if dy else 1 - f[:, 1]
                            wz = f[:, 2] if dz else 1 - f[:, 2]
                            acc += lat[ii, jj, kk] * wx * wy * wz
                out[:, c] += amp * acc
            wsum += amp
        out /= wsum
        return 0.25 + 0.7 * out           # keep albedo mid-range


def ring_cameras(spec):
    """Evenly spaced cameras on a tilted ring, all looking at the origin.

    Field of view and depth range are framed against the scene's bounding
    radius (with margin), not the whole unit sphere, so the object fills a
    useful fraction of the image."""
    n = spec.camera_count
    size = spec.image_size
    radius = spec.ring_radius
    elev = spec.ring_elevation
    scene_r = max(p.bounding_radius() for p in spec.primitives)
    half_fov = np.arcsin(min(scene_r * 1.3 / radius, 0.999))
    focal = 0.5 * (size - 1) / np.tan(half_fov)
    depth_min = max(radius - 1.25 * scene_r, 0.1)
    depth_max = radius + 1.25 * scene_r
    cams = []
    for i in range(n):
        ang = 2.0 * np.pi * i / n
        pos = np.array([radius * np.cos(elev) * np.cos(ang),
                        radius * np.cos(elev) * np.sin(ang),
                        radius * np.sin(elev)])
        cams.append(cg.make_lookat_camera(pos, (0.0, 0.0, 0.0), (0, 0, 1),
                                          focal, size, size, depth_min,
                                          depth_max))
    return cams


def analytic_sdf(spec, points):
    """Exact SDF of the scene at arbitrary points (..., 3)."""
    return spec.sdf(points)


def render_view(spec, cam, noise=None):
    """Sphere-trace one view.

    Returns (image (3, h, w) float in [0, 1], depth (h, w) camera-frame z,
    0 where the ray misses)."""
    noise = noise or ValueNoise(spec.noise_seed, spec.noise_octaves,
                                spec.noise_base_res)
    h, w = cam.height, cam.width
    pix = cg.pixel_grid(w, h)
    origins, dirs, dir_z = cg.rays_for_pixels(cam, pix)
    t = np.full(len(pix), cam.depth_min / np.maximum(dir_z, 1e-6))
    t_max = cam.depth_max / np.maximum(dir_z, 1e-6)
    alive = np.ones(len(pix), dtype=bool)
    hit = np.zeros(len(pix), dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        if not alive.any():
            break
        p = origins[alive] + t[alive, None] * dirs[alive]
        d = spec.sdf(p)
        close = d < TRACE_EPS
        idx = np.nonzero(alive)[0]
        hit[idx[close]] = True
        alive[idx[close]] = False
        t[idx[~close]] += d[~close]
        overshoot = t[idx] > t_max[idx]
        alive[idx[overshoot]] = False
    img = np.empty((len(pix), 3))
    img[:] = np.asarray(BACKGROUND)
    depth = np.zeros(len(pix))
    if hit.any():
        p_hit = origins[hit] + t[hit, None] * dirs[hit]
        n = spec.normals(p_hit)
        light = np.asarray(spec.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        lamb = np.maximum((n * light).sum(axis=1), 0.0)
        albedo = noise(p_hit)
        img[hit] = albedo * (AMBIENT + (1.0 - AMBIENT) * lamb)[:, None]
        depth[hit] = t[hit] * dir_z[hit]
    img = np.clip(img, 0.0, 1.0)
    return (img.T.reshape(3, h, w), depth.reshape(h, w))


def quantize_image(img):
    """Float image -> the exact float values an 8-bit PNG round-trips."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def texture_coverage(image, depth):
    """Fraction of foreground pixels with a nonzero image gradient."""
    fg = depth > 0
    if not fg.any():
        return 0.0
    lum = image.mean(axis=0)
    gx = np.zeros_like(lum)
    gy = np.zeros_like(lum)
    gx[:, 1:] = np.abs(np.diff(lum, axis=1))
    gy[1:, :] = np.abs(np.diff(lum, axis=0))
    grad = np.maximum(gx, gy)
    return float((grad[fg] > 1e-6).mean())


@dataclass
class Dataset:
    images: np.ndarray        # (N, 3, h, w) float in [0, 1]
    cameras: list
    gt_depths: np.ndarray     # (N, h, w), 0 where invalid
    gt_mesh_path: str
    scene_scale: float
    background: tuple
    manifest: dict = field(default_factory=dict)

    @property
    def n_views(self):
        return len(self.cameras)


def generate_dataset(spec, out_dir, gt_mesh_resolution=GT_MESH_RESOLUTION,
                     min_texture_coverage=0.8):
    """Render, write and return the dataset (quantized exactly as stored).

    Layout: images/0000.png ..., cams/0000_cam.txt ..., depths/0000.pfm ...,
    gt_mesh.ply, manifest.json.
    """
    cams = ring_cameras(spec)
    noise = ValueNoise(spec.noise_seed, spec.noise_octaves,
                       spec.noise_base_res)
    images, depths = [], []
    for cam in cams:
        img, dep = render_view(spec, cam, noise)
        img = quantize_image(img)
        cov = texture_coverage(img, dep)
        if cov < min_texture_coverage:
            raise ValueError(
                f"albedo texture too flat: only {cov:.0%} of foreground "
                "pixels have nonzero gradient")
        images.append(img)
        depths.append(dep)
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "cams", "depths"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    for i, (img, dep, cam) in enumerate(zip(images, depths, cams)):
        arr = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(
            os.path.join(out_dir, "images", f"{i:04d}.png"))
        cg.write_camera_file(
            os.path.join(out_dir, "cams", f"{i:04d}_cam.txt"), cam)
        iof.write_pfm(os.path.join(out_dir, "depths", f"{i:04d}.pfm"), dep)
    grid = mg.sample_sdf_grid(lambda p: spec.sdf(p.astype(np.float64)),
                              (-1.0, 1.0), gt_mesh_resolution)
    gt_mesh = mg.marching_cubes(grid)
    mesh_path = os.path.join(out_dir, "gt_mesh.ply")
    iof.write_ply_mesh(mesh_path, gt_mesh.vertices, gt_mesh.faces)
    manifest = {
        "n_views": spec.camera_count,
        "image_size": spec.image_size,
        "scene_scale": 1.0,
        "background": list(BACKGROUND),
        "gt_mesh_resolution": gt_mesh_resolution,
        "spec": {
            "primitives": [
                {"kind": p.kind, "center": list(p.center),
                 "size": list(p.size), "rotation_z": p.rotation_z}
                for p in spec.primitives],
            "noise_seed": spec.noise_seed,
            "noise_octaves": spec.noise_octaves,
            "noise_base_res": spec.noise_base_res,
            "light_dir": list(spec.light_dir),
            "camera_count": spec.camera_count,
            "ring_radius": spec.ring_radius,
            "ring_elevation": spec.ring_elevation,
            "image_size": spec.image_size,
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return Dataset(images=np.stack(images), cameras=cams,
                   gt_depths=np.stack(depths), gt_mesh_path=mesh_path,
                   scene_scale=1.0, background=BACKGROUND,
                   manifest=manifest)


def spec_from_manifest(manifest):
    s = manifest["spec"]
    prims = tuple(Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]),
                            p.get("rotation_z", 0.0))
                  for p in s["primitives"])
    return SceneSpec(primitives=prims, noise_seed=s["noise_seed"],
                     noise_octaves=s["noise_octaves"],
                     noise_base_res=s["noise_base_res"],
                     light_dir=tuple(s["light_dir"]),
                     camera_count=s["camera_count"],
                     ring_radius=s["ring_radius"],
                     ring_elevation=s["ring_elevation"],
                     image_size=s["image_size"])


def load_dataset(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as f:
        manifest = json.load(f)
    n = manifest["n_views"]
    size = manifest["image_size"]
    images, cams, depths = [], [], []
    for i in range(n):
        arr = np.asarray(Image.open(
            os.path.join(out_dir, "images", f"{i:04d}.png")))
        images.append(arr.astype(np.float64).transpose(2, 0, 1) / 255.0)
        cam, _ = cg.read_camera_file(
            os.path.join(out_dir, "cams", f"{i:04d}_cam.txt"), size, size)
        cams.append(cam)
        depths.append(iof.read_pfm(
            os.path.join(out_dir, "depths", f"{i:04d}.pfm")))
    return Dataset(images=np.stack(images), cameras=cams,
                   gt_depths=np.stack(depths).astype(np.float64),
                   gt_mesh_path=os.path.join(out_dir, "gt_mesh.ply"),
                   scene_scale=manifest["scene_scale"],
                   background=tuple(manifest["background"]),
                   manifest=manifest)
