"""Finite-difference verification of every autodiff primitive.

Each case builds a small seeded float64 instance, reduces the primitive's
output to a scalar through a fixed random linear functional, and compares
analytic gradients against central differences. Inputs are positioned away
from the kinks of piecewise primitives (relu, abs, clamps, interpolation
lattices) so the derivative is well-defined at every probe.
"""

import time

import numpy as np

from . import autodiff as ad


def _rng(seed):
    return np.random.default_rng(seed)


def _scalarize(out, seed):
    """Reduce a tensor to a scalar via a fixed random weighting."""
    w = _rng(seed ^ 0xABCDEF).standard_normal(out.shape)
    return (out * ad.Tensor(w)).sum()


def _offset_from_zero(x, margin=0.15):
    """Push values away from zero while keeping their sign."""
    return x + np.sign(x) * margin + (x == 0) * margin


def _lattice_safe(rng, shape, lo, hi):
    """Coordinates whose fractional parts stay away from 0/1."""
    base = rng.integers(int(np.floor(lo)), int(np.ceil(hi)) - 1, shape)
    frac = rng.uniform(0.2, 0.8, shape)
    return np.clip(base + frac, lo, hi)


def _check(fn, arrays, eps=1e-5):
    tensors = [ad.Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]
    return ad.finite_diff_check(fn, tensors, eps=eps)


def _case_elementwise(name, sampler, attrs=None):
    def run(seed):
        rng = _rng(seed)
        x = sampler(rng, (3, 4))

        def fn(ts):
            return _scalarize(ad.apply_primitive(name, ts, attrs), seed)
        return _check(fn, [x])
    return run


def _binary_case(name, sampler_b=None):
    def run(seed):
        rng = _rng(seed)
        a = rng.standard_normal((3, 4))
        b = (sampler_b(rng, (3, 4)) if sampler_b
             else rng.standard_normal((3, 4)))

        def fn(ts):
            return _scalarize(ad.apply_primitive(name, ts), seed)
        return _check(fn, [a, b])
    return run


def _reduction_case(name, axis=1, **kw):
    def run(seed):
        rng = _rng(seed)
        x = rng.standard_normal((3, 5)) * 0.7

        def fn(ts):
            return _scalarize(
                ad.apply_primitive(name, ts, {"axis": axis, **kw}), seed)
        return _check(fn, [x])
    return run


def _case_matmul(seed):
    rng = _rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))

    def fn(ts):
        return _scalarize(ad.matmul(ts[0], ts[1]), seed)
    return _check(fn, [a, b])


def _case_conv2d(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 2, 5, 6)) * 0.5
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3) * 0.5

    def fn(ts):
        return _scalarize(ad.conv2d(ts[0], ts[1], ts[2], stride=2,
                                    padding=1), seed)
    return _check(fn, [x, w, b])


def _case_conv3d(seed):
    rng = _rng(seed)
    x = rng.standard_normal((1, 2, 4, 5, 4)) * 0.5
    w = rng.standard_normal((2, 2, 3, 3, 3)) * 0.5
    b = rng.standard_normal(2) * 0.5

    def fn(ts):
        return _scalarize(ad.conv3d(ts[0], ts[1], ts[2], stride=2,
                                    padding=1), seed)
    return _check(fn, [x, w, b])


def _case_conv_transpose3d(seed):
    rng = _rng(seed)
    x = rng.standard_normal((1, 2, 3, 3, 4)) * 0.5
    w = rng.standard_normal((2, 2, 3, 3, 3)) * 0.5
    b = rng.standard_normal(2) * 0.5

    def fn(ts):
        return _scalarize(ad.conv_transpose3d(ts[0], ts[1], ts[2], stride=2,
                                              padding=1, output_padding=1),
                          seed)
    return _check(fn, [x, w, b])


def _case_upsample(seed):
    rng = _rng(seed)
    x = rng.standard_normal((1, 2, 3, 4))

    def fn(ts):
        return _scalarize(ad.upsample_nearest_2d(ts[0], 2), seed)
    return _check(fn, [x])


def _case_grid_sample_2d(seed):
    rng = _rng(seed)
    vol = rng.standard_normal((2, 3, 5, 6))
    xy = np.stack([_lattice_safe(rng, (2, 7), -0.5, 5.5),
                   _lattice_safe(rng, (2, 7), -0.5, 4.5)], axis=-1)

    def fn(ts):
        out, _ = ad.grid_sample_2d(ts[0], ts[1])
        return _scalarize(out, seed)
    return _check(fn, [vol, xy])


def _case_grid_sample_3d(seed):
    rng = _rng(seed)
    vol = rng.standard_normal((2, 2, 4, 5, 6))
    xyz = np.stack([_lattice_safe(rng, (2, 7), -0.5, 5.5),
                    _lattice_safe(rng, (2, 7), -0.5, 4.5),
                    _lattice_safe(rng, (2, 7), -0.5, 3.5)], axis=-1)

    def fn(ts):
        out, _ = ad.grid_sample_3d(ts[0], ts[1])
        return _scalarize(out, seed)
    return _check(fn, [vol, xyz])


def _case_frustum_sample(seed):
    rng = _rng(seed)
    s, d, h, w = 2, 4, 5, 6
    vol = rng.standard_normal((s, 3, d, h, w))
    start = rng.uniform(1.0, 1.2, (s, h, w))
    step = np.array([0.25, 0.3])
    u = _lattice_safe(rng, (s, 9), 0.0, w - 1.0)
    v = _lattice_safe(rng, (s, 9), 0.0, h - 1.0)
    # depths mid-ladder so the fractional index avoids lattice points
    z = rng.uniform(1.5, 1.8, (s, 9))

    def fn(ts):
        out, _ = ad.frustum_sample(ts[0], ts[1], start, step)
        return _scalarize(out, seed)
    uvz = np.stack([u, v, z], axis=-1)
    return _check(fn, [vol, uvz])


def _case_shape(name, attrs_fn):
    def run(seed):
        rng = _rng(seed)
        x = rng.standard_normal((3, 4))

        def fn(ts):
            return _scalarize(ad.apply_primitive(name, ts, attrs_fn()), seed)
        return _check(fn, [x])
    return run


def _case_concat(seed):
    rng = _rng(seed)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 2))

    def fn(ts):
        return _scalarize(ad.concatenate(ts, axis=1), seed)
    return _check(fn, [a, b])


def _case_stack(seed):
    rng = _rng(seed)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))

    def fn(ts):
        return _scalarize(ad.stack(ts, axis=1), seed)
    return _check(fn, [a, b])


def _case_slice(seed):
    rng = _rng(seed)
    x = rng.standard_normal((4, 5))

    def fn(ts):
        return _scalarize(ts[0][1:3, ::2], seed)
    return _check(fn, [x])


CASES = {
    "add": _binary_case("add"),
    "subtract": _binary_case("subtract"),
    "multiply": _binary_case("multiply"),
    "divide": _binary_case(
        "divide", lambda rng, s: _offset_from_zero(rng.standard_normal(s), 0.5)),
    "negative": _case_elementwise("negative",
                                  lambda rng, s: rng.standard_normal(s)),
    "power": _case_elementwise(
        "power", lambda rng, s: rng.uniform(0.5, 2.0, s),
        {"exponent": 1.7}),
    "exp": _case_elementwise("exp", lambda rng, s: rng.uniform(-1, 1, s)),
    "log": _case_elementwise("log", lambda rng, s: rng.uniform(0.5, 2.0, s)),
    "sqrt": _case_elementwise("sqrt", lambda rng, s: rng.uniform(0.5, 2.0, s)),
    "absolute": _case_elementwise(
        "absolute", lambda rng, s: _offset_from_zero(rng.standard_normal(s))),
    "sin": _case_elementwise("sin", lambda rng, s: rng.standard_normal(s)),
    "cos": _case_elementwise("cos", lambda rng, s: rng.standard_normal(s)),
    "relu": _case_elementwise(
        "relu", lambda rng, s: _offset_from_zero(rng.standard_normal(s))),
    "sigmoid": _case_elementwise("sigmoid",
                                 lambda rng, s: rng.standard_normal(s)),
    "softplus": _case_elementwise("softplus",
                                  lambda rng, s: rng.standard_normal(s)),
    "clamp_min": _case_elementwise(
        "clamp_min",
        lambda rng, s: _offset_from_zero(rng.standard_normal(s)),
        {"lo": 0.0}),
    "clamp_max": _case_elementwise(
        "clamp_max",
        lambda rng, s: _offset_from_zero(rng.standard_normal(s)),
        {"hi": 0.0}),
    "sum": _reduction_case("sum"),
    "mean": _reduction_case("mean"),
    "variance": _reduction_case("variance"),
    "reduce_max": _reduction_case("reduce_max"),
    "reduce_min": _reduction_case("reduce_min"),
    "softmax": _reduction_case("softmax"),
    "cumprod": _case_elementwise(
        "cumprod", lambda rng, s: rng.uniform(0.5, 1.5, s), {"axis": 1}),
    "reshape": _case_shape("reshape", lambda: {"shape": (4, 3)}),
    "transpose": _case_shape("transpose", lambda: {"axes": (1, 0)}),
    "broadcast_to": _case_shape("broadcast_to",
                                lambda: {"shape": (2, 3, 4)}),
    "concatenate": _case_concat,
    "stack": _case_stack,
    "slice": _case_slice,
    "matmul": _case_matmul,
    "conv2d": _case_conv2d,
    "conv3d": _case_conv3d,
    "conv_transpose3d": _case_conv_transpose3d,
    "upsample_nearest_2d": _case_upsample,
    "grid_sample_2d": _case_grid_sample_2d,
    "grid_sample_3d": _case_grid_sample_3d,
    "frustum_sample": _case_frustum_sample,
}

# cumprod's backward divides by its input, hence the positive sampler above.
_MISSING = set(ad.PRIMITIVES) - set(CASES)
assert not _MISSING, f"primitives without gradcheck case: {_MISSING}"


def run_all(seed=0, eps=1e-5, tol=1e-4):
    """Run every case; returns (report dict, all_passed bool).

    Report maps primitive name -> {error, passed, seconds}.
    """
    report = {}
    ok = True
    for name in sorted(CASES):
        t0 = time.perf_counter()
        err = CASES[name](seed)
        dt = time.perf_counter() - t0
        passed = bool(err < tol)
        ok = ok and passed
        report[name] = {"error": float(err), "passed": passed,
                        "seconds": round(dt, 4)}
    return report, ok


def tiny_trainer(seed=0, tmpdir=None):
    """A float64 trainer on a miniature in-memory scene (3 views, 8x8
    images, hypothesis counts (4, 2, 2)) for end-to-end derivative checks."""
    import tempfile

    from . import scene as sc
    from .config import RunConfig
    from .train import Trainer

    cfg = RunConfig(seed=seed, dtype="float64", n_input_views=2,
                    depth_counts=(4, 2, 2), interval_scales=(1.0, 0.5, 0.25),
                    iterations=30, rays_per_batch=16, n_coarse=8, n_fine=4,
                    eik_points=8, pseudo_points_per_batch=16,
                    schedule_boundary=0, checkpoint_interval=1000)
    spec = sc.default_scene(image_size=8, camera_count=3)
    cams = sc.ring_cameras(spec)
    noise = sc.ValueNoise(spec.noise_seed, spec.noise_octaves,
                          spec.noise_base_res)
    images, depths = [], []
    for cam in cams:
        img, dep = sc.render_view(spec, cam, noise)
        images.append(img)
        depths.append(dep)
    ds = sc.Dataset(images=np.stack(images), cameras=cams,
                    gt_depths=np.stack(depths), gt_mesh_path="",
                    scene_scale=1.0, background=sc.BACKGROUND)
    tmpdir = tmpdir or tempfile.mkdtemp(prefix="ffgradcheck_")
    return Trainer(cfg, ds, tmpdir)


def end_to_end_check(seed=0, eps=1e-4, tol=1e-3, n_params=8):
    """Central-difference check of the total training loss w.r.t. a seeded
    selection of parameters on the miniature configuration."""
    from . import autodiff as ad

    t0 = time.perf_counter()
    trainer = tiny_trainer(seed)
    trainer.maybe_refresh_pseudo(0)

    trainer.rng = np.random.default_rng(seed + 99)
    trainer.model.store.zero_grad()
    total, _, _, plan = trainer.compute_losses(0)

    def loss_value():
        value, _, _, _ = trainer.compute_losses(0, plan=plan)
        return value

    ad.backward(total)

    rng = _rng(seed ^ 0x5EED)
    names = trainer.model.store.names()
    picks = []
    for _ in range(n_params):
        name = names[rng.integers(len(names))]
        p = trainer.model.store[name]
        picks.append((name, int(rng.integers(p.size))))
    worst = 0.0
    per_param = {}
    for name, flat_idx in picks:
        p = trainer.model.store[name]
        analytic = 0.0 if p.grad is None else float(
            p.grad.reshape(-1)[flat_idx])
        view = p.data.reshape(-1)
        orig = view[flat_idx]
        view[flat_idx] = orig + eps
        hi = loss_value().item()
        view[flat_idx] = orig - eps
        lo = loss_value().item()
        view[flat_idx] = orig
        fd = (hi - lo) / (2 * eps)
        err = abs(analytic - fd) / max(1.0, abs(fd))
        per_param[f"{name}[{flat_idx}]"] = {"analytic": analytic, "fd": fd,
                                            "error": err}
        worst = max(worst, err)
    return {"error": float(worst), "passed": bool(worst < tol),
            "seconds": round(time.perf_counter() - t0, 2),
            "params": per_param}
