"""Pinhole cameras, projection, plane-sweep warping and cascade depth
hypotheses.

Conventions: world-to-camera extrinsics (x_cam = R @ X + T), pixel
coordinates at pixel centers (integer coordinates hit centers, so a
self-warp is exactly the identity), depth = z component in the camera
frame. Depth ladders are linear in depth.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

HYPOTHESIS_MARGIN = 0.05


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera with a bounded depth range."""

    k: np.ndarray          # (3, 3) intrinsics, pixels
    r: np.ndarray          # (3, 3) world-to-camera rotation
    t: np.ndarray          # (3,) translation, scene units
    width: int
    height: int
    depth_min: float
    depth_max: float

    def __post_init__(self):
        k = np.asarray(self.k, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)
        if k.shape != (3, 3) or r.shape != (3, 3):
            raise CameraError("K and R must be 3x3")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-6:
            raise CameraError("R is not orthonormal within 1e-6")
        lower = np.abs(k[np.tril_indices(3, -1)]).max()
        if lower > 1e-9:
            raise CameraError("K must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise CameraError("K focal entries must be positive")
        if abs(k[2, 2] - 1.0) > 1e-9:
            raise CameraError("K[2,2] must be 1")
        if not (0 < self.depth_min < self.depth_max):
            raise CameraError("need 0 < depth_min < depth_max")

    @property
    def k_inv(self):
        return np.linalg.inv(self.k)

    def center(self):
        """Camera center in world coordinates."""
        return -self.r.T @ self.t

    def scaled(self, factor):
        """Camera for an image rescaled by ``factor`` (e.g. 0.5 for a
        half-resolution feature map). Principal point and focals scale; the
        pixel-center origin shift keeps centers aligned."""
        k = self.k.copy()
        k[0, :] *= factor
        k[1, :] *= factor
        # center of pixel (0,0) at scale f sits at f*(x+0.5)-0.5 in the
        # scaled grid
        k[0, 2] += 0.5 * factor - 0.5
        k[1, 2] += 0.5 * factor - 0.5
        return Camera(k, self.r, self.t,
                      int(round(self.width * factor)),
                      int(round(self.height * factor)),
                      self.depth_min, self.depth_max)


def project(cam, points):
    """World points (..., 3) -> (uv (..., 2), z (...)).

    z is camera-frame depth; points with z <= 0 are behind the camera and
    the caller must treat them as out-of-frustum (uv is then meaningless).
    """
    pts = np.asarray(points, dtype=np.float64)
    xc = pts @ cam.r.T + cam.t
    z = xc[..., 2]
    h = xc @ cam.k.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = h[..., :2] / z[..., None]
    return uv, z


def back_project(cam, u, v, depth):
    """Pixel coordinates (+ camera-frame depth) -> world points (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise CameraError("back_project needs positive depth")
    ones = np.ones_like(u)
    pix = np.stack([u, v, ones], axis=-1)
    ray = pix @ cam.k_inv.T
    return (ray * depth[..., None] - cam.t) @ cam.r


def project_tensor(cam, points):
    """Differentiable projection: Tensor (P, 3) -> Tensor (P, 3) = (u, v, z).

    Behind-camera points yield z <= 0; consumers (the samplers) treat those
    as out-of-bounds, so no masking is needed here.
    """
    dt = points.dtype
    rt = ad.Tensor(np.ascontiguousarray(cam.r.T, dtype=dt))
    tt = ad.Tensor(cam.t.astype(dt))
    kt = ad.Tensor(np.ascontiguousarray(cam.k.T, dtype=dt))
    xc = points @ rt + tt
    h = xc @ kt
    z = xc[:, 2:3]
    uv = h[:, 0:2] / z
    return ad.concatenate([uv, z], axis=1)


def pixel_grid(width, height):
    """(H*W, 2) array of pixel-center coordinates, row-major."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=-1)


def warp_to_source(ref, src, pixels, depths):
    """Plane-sweep warp: reference pixels at hypothesis depths -> source
    image coordinates.

    pixels: (P, 2) reference pixel coordinates; depths: (P,) positive
    per-pixel depths. Returns (uv_src (P, 2), valid (P,) bool); invalid
    entries (behind the source camera) carry coordinates far outside the
    image so bilinear sampling misses.
    """
    depths = np.asarray(depths, dtype=np.float64)
    if np.any(depths <= 0):
        raise CameraError("warp_to_source needs positive depths")
    world = back_project(ref, pixels[..., 0], pixels[..., 1], depths)
    uv, z = project(src, world)
    valid = z > 0
    uv = np.where(valid[..., None], uv, -1e6)
    return uv, valid


def warp_tensor(ref, src, pixels, depths):
    """Differentiable twin of warp_to_source for loss paths.

    pixels: (P, 2) constant ndarray; depths: Tensor (P,). Returns a Tensor
    (P, 2) of source coordinates (invalid ones pushed far out of bounds,
    with zero gradient there).
    """
    dt = depths.dtype
    ray = np.concatenate([pixels, np.ones((pixels.shape[0], 1))],
                         axis=1) @ ref.k_inv.T
    ray_world = ray @ ref.r                       # rows: K^-1 pix rotated
    center = ref.center()
    d2 = depths.reshape((-1, 1))
    world = ad.multiply(ad.Tensor(ray_world.astype(dt)), d2) + \
        ad.Tensor(center.astype(dt))
    uvz = project_tensor(src, world)
    z = uvz.data[:, 2]
    mask = (z > 1e-6).astype(dt)[:, None]
    uv = uvz[:, 0:2]
    return ad.add(ad.multiply(uv, ad.Tensor(mask)),
                  ad.Tensor((1.0 - mask) * -1e6))


@dataclass(frozen=True)
class DepthHypotheses:
    """Per-level ladder of candidate depths.

    Every pixel's ladder is uniform: value_k(p) = start(p) + k * step. At
    the coarsest level ``start`` is constant (a shared ladder over the full
    depth range); finer levels center the ladder on the upsampled previous
    depth map.
    """

    level: int
    count: int
    start: np.ndarray      # (h, w) float64
    step: float
    replaced: np.ndarray   # (h, w) bool, True where prev depth was invalid

    @property
    def shape(self):
        return self.start.shape

    def values(self):
        """(count, h, w) strictly increasing depth ladder."""
        ks = np.arange(self.count, dtype=np.float64)[:, None, None]
        return self.start[None] + ks * self.step

    def ladder_1d(self):
        """The shared ladder (only meaningful for uniform levels)."""
        return self.start.reshape(-1)[0] + \
            np.arange(self.count, dtype=np.float64) * self.step

    def is_uniform(self):
        flat = self.start.reshape(-1)
        return bool(np.all(flat == flat[0]))

    def fractional_index(self, u, v, z):
        """Fractional ladder index of depth z at integer pixel (u, v)."""
        return (z - self.start[v, u]) / self.step


def upsample_bilinear(img, out_h, out_w):
    """Bilinear 2D upsampling with endpoint-aligned coordinates."""
    in_h, in_w = img.shape
    ys = np.linspace(0.0, in_h - 1.0, out_h)
    xs = np.linspace(0.0, in_w - 1.0, out_w)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 2) \
        if in_h > 1 else np.zeros(out_h, np.int64)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 2) \
        if in_w > 1 else np.zeros(out_w, np.int64)
    fy = (ys - y0) if in_h > 1 else np.zeros(out_h)
    fx = (xs - x0) if in_w > 1 else np.zeros(out_w)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    top = a * (1 - fx)[None, :] + b * fx[None, :]
    bot = c * (1 - fx)[None, :] + d * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def generate_hypotheses(level, prev_depth, cam, counts, interval_scales,
                        out_shape, margin=HYPOTHESIS_MARGIN):
    """Build the depth ladder for one cascade level.

    level 0 ignores prev_depth and spans [depth_min, depth_max] uniformly.
    Finer levels center a narrower ladder (interval_scales[level] of the
    full range) on the bilinearly upsampled previous depth map, shifting
    the window where needed to stay inside
    [depth_min*(1-margin), depth_max*(1+margin)]. Non-positive previous
    depths are replaced by the range midpoint and flagged.
    """
    h, w = out_shape
    count = int(counts[level])
    if count < 2:
        raise ValueError("need at least 2 depth hypotheses per level")
    full = cam.depth_max - cam.depth_min
    if level == 0:
        step = full / (count - 1)
        start = np.full((h, w), cam.depth_min, dtype=np.float64)
        return DepthHypotheses(0, count, start, step,
                               np.zeros((h, w), dtype=bool))
    if prev_depth is None:
        raise ValueError(f"level {level} needs the previous depth map")
    prev = np.asarray(prev_depth, dtype=np.float64)
    replaced_prev = prev <= 0
    mid = 0.5 * (cam.depth_min + cam.depth_max)
    prev = np.where(replaced_prev, mid, prev)
    center = upsample_bilinear(prev, h, w)
    replaced = upsample_bilinear(replaced_prev.astype(np.float64),
                                 h, w) > 0
    span = interval_scales[level] * full
    step = span / (count - 1)
    lo = cam.depth_min * (1.0 - margin)
    hi = cam.depth_max * (1.0 + margin)
    start = np.clip(center - 0.5 * span, lo, hi - span)
    return DepthHypotheses(level, count, start, step, replaced)


@dataclass(frozen=True)
class Ray:
    """A viewing ray through a pixel center."""

    origin: np.ndarray      # (3,)
    direction: np.ndarray   # (3,), unit norm
    pixel: tuple            # (u, v)

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise CameraError("ray direction must be unit length")


def rays_for_pixels(cam, pixels):
    """Rays through pixel centers.

    Returns (origins (P, 3), dirs (P, 3) unit, dir_z (P,)) where dir_z is the
    camera-frame z component of the unit direction: camera depth z along a
    ray equals ray length t times dir_z.
    """
    pix = np.asarray(pixels, dtype=np.float64)
    ones = np.ones((pix.shape[0], 1))
    ray_cam = np.concatenate([pix, ones], axis=1) @ cam.k_inv.T
    ray_world = ray_cam @ cam.r
    norms = np.linalg.norm(ray_world, axis=1, keepdims=True)
    dirs = ray_world / norms
    dir_z = (dirs @ cam.r.T)[:, 2]
    origins = np.broadcast_to(cam.center(), dirs.shape).copy()
    return origins, dirs, dir_z


def make_lookat_camera(position, target, up, focal, width, height,
                       depth_min, depth_max):
    """World-to-camera look-at construction (+z forward, +y down image)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up_hint = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up_hint)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    r = np.stack([right, down, forward], axis=0)
    t = -r @ position
    k = np.array([[focal, 0.0, (width - 1) / 2.0],
                  [0.0, focal, (height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return Camera(k, r, t, width, height, depth_min, depth_max)


# ---------------------------------------------------------------------------
# camera text files (CasMVSNet-style layout)
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def camera_to_text(cam, depth_count=48):
    """Serialize to the interchange text format. Floats use shortest
    round-trip decimal form so write -> read -> write is bit-identical."""
    e = np.eye(4)
    e[:3, :3] = cam.r
    e[:3, 3] = cam.t
    lines = ["extrinsic"]
    for row in e:
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append("")
    lines.append("intrinsic")
    for row in cam.k:
        lines.append(" ".join(_fmt(v) for v in row))
    lines.append("")
    interval = (cam.depth_max - cam.depth_min) / (depth_count - 1)
    lines.append(" ".join([_fmt(cam.depth_min), _fmt(interval),
                           _fmt(float(depth_count)), _fmt(cam.depth_max)]))
    return "\n".join(lines) + "\n"


def camera_from_text(text, width, height):
    """Parse the interchange format; image size is carried separately."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if lines[0] != "extrinsic" or lines[5] != "intrinsic":
        raise CameraError("malformed camera file")
    e = np.array([[float(v) for v in lines[1 + i].split()]
                  for i in range(4)])
    k = np.array([[float(v) for v in lines[6 + i].split()]
                  for i in range(3)])
    tail = [float(v) for v in lines[9].split()]
    depth_min, _, depth_count, depth_max = tail
    cam = Camera(k, e[:3, :3], e[:3, 3], width, height, depth_min, depth_max)
    return cam, int(depth_count)


def write_camera_file(path, cam, depth_count=48):
    with open(path, "w") as f:
        f.write(camera_to_text(cam, depth_count))


def read_camera_file(path, width, height):
    with open(path) as f:
        return camera_from_text(f.read(), width, height)
