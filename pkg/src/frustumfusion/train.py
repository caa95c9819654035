"""Training loop: per-iteration cascade + fusion + rendering + losses, Adam
with warm-up/cosine decay, pseudo-geometry refresh on a cadence, newline-
delimited JSON loss logs, and bit-exact checkpoint/resume."""

import json
import os
import shutil

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:                                 # pragma: no cover
    threadpool_limits = None

from . import autodiff as ad
from . import cameras as cg
from . import io_formats as iof
from . import losses as ls
from . import pseudo as ps
from . import rendering as rd
from .model import ReconstructionModel

CHECKPOINT_PREFIX = "iter_"


class TrainingAborted(RuntimeError):
    """Raised when the loss goes non-finite; the last finite checkpoint on
    disk is left untouched."""


class IterationPlan:
    """Non-differentiable sampling state of one iteration: hypothesis
    ladders, ray pixels, merged sample distances, point subsets and the
    color-coverage mask. Replaying a plan makes the loss a deterministic
    differentiable function of parameters only."""

    __slots__ = ("hypotheses", "ray_flat", "t_all", "ray_valid",
                 "eik_points", "pgs_points")

    def __init__(self):
        self.hypotheses = None
        self.ray_flat = None
        self.t_all = None
        self.ray_valid = None
        self.eik_points = None
        self.pgs_points = None


class AdamOptimizer:
    """Adam over a ParameterStore with externally scheduled learning rate."""

    def __init__(self, store, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.store.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            step = lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data = (p.data - step).astype(p.data.dtype, copy=False)

    def state_arrays(self):
        out = {"t": np.asarray([float(self.t)], dtype=np.float64)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for k in self.m:
            self.m[k] = np.asarray(arrays[f"m.{k}"],
                                   dtype=self.m[k].dtype).copy()
            self.v[k] = np.asarray(arrays[f"v.{k}"],
                                   dtype=self.v[k].dtype).copy()


def learning_rate(it, total, peak, end, warmup_frac):
    """Linear warm-up to ``peak`` then cosine decay to ``end``."""
    warm = max(int(total * warmup_frac), 1)
    if it < warm:
        return float(peak * (it + 1) / warm)
    span = max(total - warm, 1)
    progress = min((it - warm) / span, 1.0)
    return float(end + 0.5 * (peak - end) * (1.0 + np.cos(np.pi * progress)))


class PseudoState:
    """Snapshot of consistency masks, pseudo-depth labels and the fused
    pseudo point cloud, refreshed on a fixed cadence."""

    def __init__(self):
        self.labels = {}       # view -> (h, w) depth labels
        self.validity = {}     # view -> (h, w) bool
        self.points = np.zeros((0, 3))
        self.refreshed_at = -1

    def refresh(self, depths, cams, config, iteration):
        masks = ps.geometric_consistency(
            depths, cams, config.tau_px, config.tau_depth,
            config.n_min_consistent)
        cloud = ps.fuse_point_cloud(depths, cams, masks,
                                    config.merge_radius)
        self.labels = {}
        self.validity = {}
        for vid in depths:
            lab, val = ps.pseudo_depth_for_query(depths[vid], masks[vid])
            self.labels[vid] = lab
            self.validity[vid] = val
        self.points = cloud.points
        self.refreshed_at = iteration

    def state_arrays(self):
        out = {"points": self.points.astype(np.float64),
               "refreshed_at": np.asarray([float(self.refreshed_at)])}
        for vid in sorted(self.labels):
            out[f"labels.{vid}"] = self.labels[vid].astype(np.float64)
            out[f"validity.{vid}"] = \
                self.validity[vid].astype(np.float64)
        return out

    def load_state_arrays(self, arrays):
        self.points = arrays["points"].astype(np.float64)
        self.refreshed_at = int(arrays["refreshed_at"][0])
        self.labels = {}
        self.validity = {}
        for key, arr in arrays.items():
            if key.startswith("labels."):
                self.labels[int(key.split(".")[1])] = arr
            elif key.startswith("validity."):
                self.validity[int(key.split(".")[1])] = arr > 0.5


class Trainer:
    """Owns the model, optimizer, RNG and pseudo-geometry state."""

    def __init__(self, config, dataset, out_dir):
        self.config = config
        self.dataset = dataset
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        # BLAS thread pools lose to their own sync overhead at these GEMM
        # sizes, and a fixed thread count keeps results machine-independent
        if threadpool_limits is not None:
            threadpool_limits(limits=1, user_api="blas")
        if dataset.n_views < config.n_input_views + 1:
            raise ValueError(
                f"dataset has {dataset.n_views} views; need at least "
                f"{config.n_input_views + 1}")
        self.model = ReconstructionModel(config)
        self.optimizer = AdamOptimizer(self.model.store, config.adam_beta1,
                                       config.adam_beta2, config.adam_eps)
        self.rng = np.random.default_rng(config.seed)
        self.schedule = ls.LossSchedule(config.boundary,
                                        config.lambda_pdc_after,
                                        config.lambda_pgs_after)
        self.pseudo = PseudoState()
        self.iteration = 0
        self.log_path = os.path.join(out_dir, "loss_log.jsonl")
        self.images = {i: dataset.images[i].astype(np.float64)
                       for i in range(dataset.n_views)}
        self.cams = {i: c for i, c in enumerate(dataset.cameras)}
        self.background = np.asarray(dataset.background)
        config.echo(os.path.join(out_dir, "resolved_config.json"))

    # -- view selection ------------------------------------------------------

    def select_views(self, iteration):
        """Rotate the query view; inputs are the other views (first N)."""
        n = self.dataset.n_views
        query = iteration % n
        inputs = [i for i in range(n) if i != query]
        return inputs[:self.config.n_input_views], query

    # -- the per-iteration computation ----------------------------------------

    def compute_losses(self, iteration, plan=None):
        """Build the full graph for one iteration.

        Returns (total Tensor, LossReport, frustums, IterationPlan). The
        plan captures every non-differentiable sampling decision (ray
        pixels, hypothesis ladders, merged sample positions, point
        subsets, coverage masks); passing it back in replays the iteration
        as a pure differentiable function of the parameters, which is what
        finite-difference checks probe. Without a plan, RNG draws are
        consumed in a fixed order.
        """
        cfg = self.config
        capture = plan is None
        inputs, query = self.select_views(iteration)
        ref_ids = inputs + [query]
        sources_of = {v: [s for s in inputs if s != v] for v in inputs}
        sources_of[query] = list(inputs)
        frustums = self.model.build_frustums(
            self.images, self.cams, ref_ids, sources_of,
            hypotheses_override=None if capture else plan.hypotheses)
        if capture:
            plan = IterationPlan()
            plan.hypotheses = {r: [lv.hypotheses for lv in frustums[r]]
                               for r in ref_ids}

        terms = {}
        terms["dep"] = ls.multi_view_depth_loss(
            frustums, {v: self.images[v] for v in ref_ids}, self.cams,
            sources_of, smoothness_weight=cfg.smoothness_weight)

        # --- rays through the query view
        qcam = self.cams[query]
        h, w = qcam.height, qcam.width
        sdf_fn = self.model.sdf_fn(frustums, inputs)
        if capture:
            n_rays = min(cfg.rays_per_batch, h * w)
            flat = self.rng.choice(h * w, size=n_rays, replace=False)
            plan.ray_flat = flat
        else:
            flat = plan.ray_flat
            n_rays = len(flat)
        pix = np.stack([flat % w, flat // w], axis=1).astype(np.float64)
        origins, dirs, dir_z = cg.rays_for_pixels(qcam, pix)

        if capture:
            # adaptive ranges from the query's coarsest probability volume
            q0 = frustums[query][0]
            alpha_map, beta_map = rd.probability_moments(q0.prob.data,
                                                         q0.hypotheses)
            lv_cam = q0.camera
            scale = lv_cam.width / qcam.width
            lv_pix = (pix + 0.5) * scale - 0.5
            alpha = _bilinear_map(alpha_map, lv_pix)
            beta = _bilinear_map(beta_map, lv_pix)
            beta_floor = 2.0 * (qcam.depth_max - qcam.depth_min) \
                / (cfg.depth_counts[0] - 1)
            z_near, z_far = rd.cascade_sample_ranges(
                alpha, beta, qcam.depth_min, qcam.depth_max, beta_floor)
            t_near = z_near / dir_z
            t_far = z_far / dir_z
            t_coarse = rd.uniform_samples(t_near, t_far, cfg.n_coarse,
                                          self.rng)
            fine_rng_draw = self.rng.random((n_rays, cfg.n_fine))
            with ad.no_grad():
                pts_c = (origins[:, None, :]
                         + t_coarse[..., None] * dirs[:, None, :])
                sdf_c = sdf_fn(pts_c.reshape(-1, 3).astype(
                    self.model.dtype))
                sdf_c = sdf_c.data.reshape(n_rays, cfg.n_coarse)
                sharp = float(np.exp(self.model.sharpness.log_s.data[0]))
                w_c = _render_weights_np(sdf_c, sharp)
            t_fine = rd.sample_pdf(t_coarse, w_c, cfg.n_fine,
                                   rng=_FixedDraw(fine_rng_draw))
            plan.t_all = rd.merge_sorted(t_coarse, t_fine)
        t_all = plan.t_all                              # (X, Y)
        n_samples = t_all.shape[1]

        # --- full differentiable pass over merged samples
        pts = (origins[:, None, :] + t_all[..., None] * dirs[:, None, :])
        pts_flat = pts.reshape(-1, 3).astype(self.model.dtype)
        pts_t = ad.Tensor(pts_flat)
        fused = self.model.fuse_at(frustums, pts_t, inputs)
        sdf_all = rd.predict_sdf(pts_t, fused.features, self.model.sdf_net)
        sdf_mat = ad.reshape(sdf_all, (n_rays, n_samples))

        colors, color_feats, deltas, in_mask = self._per_view_samples(
            inputs, pts_flat, dirs, n_samples)
        rgb, covered, _ = self.model.blend_net(
            color_feats, colors, deltas, fused.features, in_mask)
        colors_mat = ad.reshape(rgb, (n_rays, n_samples, 3))

        color_out, depth_out, weights = rd.render_rays(
            t_all, sdf_mat, colors_mat, self.model.sharpness.value())
        wsum = ad.sum_(weights, axis=1)
        bg = ad.Tensor(np.broadcast_to(
            self.background, (n_rays, 3)).astype(self.model.dtype))
        comp = ad.add(color_out,
                      ad.multiply(bg, ad.reshape(
                          ad.subtract(1.0, wsum), (n_rays, 1))))

        if capture:
            # a ray's color is trustworthy when little rendering weight
            # sits on samples that no input view covers
            cov_mat = covered.reshape(n_rays, n_samples)[:, :-1]
            uncov_w = (weights.data * (~cov_mat)).sum(axis=1)
            plan.ray_valid = uncov_w < 0.1
        gt_cols = self.images[query].reshape(3, -1)[:, flat].T
        terms["cc"], _ = ls.color_loss(comp, gt_cols, plan.ray_valid)

        terms["spa"] = ls.sparseness_loss(sdf_all, cfg.tau_sparse)

        # --- Eikonal points: ray samples + uniform ball samples (1:1)
        if capture:
            n_eik = min(cfg.eik_points, pts_flat.shape[0])
            sel = self.rng.choice(pts_flat.shape[0], size=n_eik,
                                  replace=False)
            plan.eik_points = np.concatenate(
                [pts_flat[sel], self._ball_samples(n_eik)], axis=0)
        grads = rd.sdf_spatial_gradient(sdf_fn, plan.eik_points, "stencil",
                                        cfg.stencil_eps)
        terms["eik"] = ls.eikonal_loss(grads)

        # --- pseudo-geometry terms
        lam_pdc, lam_pgs = self.schedule.weights(iteration)
        if lam_pdc > 0 and query in self.pseudo.labels:
            labels = self.pseudo.labels[query].reshape(-1)[flat]
            valid = self.pseudo.validity[query].reshape(-1)[flat]
            depth_z = ad.multiply(depth_out, ad.Tensor(
                dir_z.astype(self.model.dtype)))
            terms["pdc"], _ = ls.pseudo_depth_loss(depth_z, labels, valid)
        if lam_pgs > 0 and len(self.pseudo.points):
            if capture:
                k = min(cfg.pseudo_points_per_batch,
                        len(self.pseudo.points))
                idx = self.rng.choice(len(self.pseudo.points), size=k,
                                      replace=False)
                plan.pgs_points = \
                    self.pseudo.points[idx].astype(self.model.dtype)
            if plan.pgs_points is not None:
                terms["pgs"], _ = ls.pseudo_point_sdf_loss(
                    sdf_fn(plan.pgs_points))

        total, report = ls.total_loss(terms, self.schedule, iteration,
                                      cfg.lambda_cc, cfg.lambda_eik,
                                      cfg.lambda_spa)
        self._last_terms = terms
        return total, report, frustums, plan

    def _per_view_samples(self, inputs, pts_flat, dirs, n_samples):
        """Per-input-view sampled colors, color features, direction deltas
        and in-bounds masks for the blending network."""
        imgs = np.stack([self.images[v] for v in inputs])
        cfeat_map = self.model.color_features(imgs, inputs)
        p = pts_flat.shape[0]
        v = len(inputs)
        coords = np.empty((v, p, 2), dtype=self.model.dtype)
        in_mask = np.zeros((v, p), dtype=bool)
        deltas = np.empty((v, p, 3))
        ray_dirs = np.repeat(dirs, n_samples, axis=0)
        for i, vid in enumerate(inputs):
            uv, z = cg.project(self.cams[vid], pts_flat.astype(np.float64))
            ok = z > 0
            coords[i] = np.where(ok[:, None], uv, -1e6).astype(
                self.model.dtype)
            cam = self.cams[vid]
            in_mask[i] = (ok & (uv[:, 0] >= 0) & (uv[:, 0] <= cam.width - 1)
                          & (uv[:, 1] >= 0) & (uv[:, 1] <= cam.height - 1))
            to_pt = pts_flat - cam.center()
            to_pt /= np.maximum(np.linalg.norm(to_pt, axis=1,
                                               keepdims=True), 1e-12)
            deltas[i] = ray_dirs - to_pt
        feats_t = ad.stack([cfeat_map[vid] for vid in inputs], axis=0)
        cfeat, _ = ad.grid_sample_2d(feats_t, ad.Tensor(coords))
        img_t = ad.Tensor(imgs.astype(self.model.dtype))
        with ad.no_grad():
            cols, _ = ad.grid_sample_2d(img_t, ad.Tensor(coords))
        return cols.data, cfeat, deltas, in_mask

    def _ball_samples(self, n):
        """Uniform samples inside the unit bounding sphere."""
        d = self.rng.standard_normal((n, 3))
        d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
        r = self.rng.random(n) ** (1.0 / 3.0)
        return (d * r[:, None]).astype(self.model.dtype)

    # -- pseudo refresh -------------------------------------------------------

    def maybe_refresh_pseudo(self, iteration):
        cfg = self.config
        lam_pdc, lam_pgs = self.schedule.weights(iteration)
        if lam_pdc == 0 and lam_pgs == 0:
            return False
        due = (self.pseudo.refreshed_at < 0
               or iteration - self.pseudo.refreshed_at
               >= cfg.pseudo_interval)
        if not due:
            return False
        depths, cams = self.finest_depths(range(self.dataset.n_views))
        self.pseudo.refresh(depths, cams, cfg, iteration)
        return True

    def finest_depths(self, view_ids):
        """Detached finest-level cascade depth maps for the given views."""
        view_ids = list(view_ids)
        sources_of = {}
        for v in view_ids:
            sources_of[v] = [s for s in view_ids if s != v][
                :self.config.n_input_views]
        with ad.no_grad():
            frustums = self.model.build_frustums(
                self.images, self.cams, view_ids, sources_of)
        depths = {v: frustums[v][-1].depth.data.astype(np.float64)
                  for v in view_ids}
        cams = {v: frustums[v][-1].camera for v in view_ids}
        return depths, cams

    # -- the outer loop ---------------------------------------------------------

    def train(self, log_every=1, on_iteration=None):
        cfg = self.config
        if self.iteration == 0:
            self.save_checkpoint()          # iteration-0 snapshot
            if os.path.exists(self.log_path):
                os.remove(self.log_path)
        while self.iteration < cfg.iterations:
            it = self.iteration
            self.maybe_refresh_pseudo(it)
            self.model.store.zero_grad()
            total, report, _, _ = self.compute_losses(it)
            if not np.isfinite(report.total):
                raise TrainingAborted(
                    f"non-finite loss at iteration {it}; last checkpoint "
                    "retained")
            ad.backward(total)
            lr = learning_rate(it, cfg.iterations, cfg.lr_peak, cfg.lr_end,
                               cfg.warmup_frac)
            self.optimizer.step(lr)
            self.iteration = it + 1
            if it % log_every == 0 or self.iteration == cfg.iterations:
                self.append_log(it, lr, report)
            if on_iteration is not None:
                on_iteration(self, it, report)
            if (self.iteration % cfg.checkpoint_interval == 0
                    or self.iteration == cfg.iterations):
                self.save_checkpoint()
        return self.iteration

    def append_log(self, it, lr, report):
        entry = {"iteration": it, "lr": float(lr)}
        entry.update(report.to_dict())
        with open(self.log_path, "a") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- checkpointing -----------------------------------------------------------

    def checkpoint_dir(self, iteration=None):
        it = self.iteration if iteration is None else iteration
        return os.path.join(self.out_dir, "checkpoints",
                            f"{CHECKPOINT_PREFIX}{it:06d}")

    def save_checkpoint(self):
        final = self.checkpoint_dir()
        tmp = final + ".tmp"
        if os.path.exists(tmp):
            shutil.rmtree(tmp)
        os.makedirs(tmp, exist_ok=True)
        iof.save_tensor_store(os.path.join(tmp, "params"),
                              self.model.state_arrays())
        iof.save_tensor_store(os.path.join(tmp, "optim"),
                              self.optimizer.state_arrays())
        iof.save_tensor_store(os.path.join(tmp, "pseudo"),
                              self.pseudo.state_arrays())
        state = {"iteration": self.iteration,
                 "rng_state": _rng_state_to_json(self.rng),
                 "config_hash": self.config.config_hash()}
        with open(os.path.join(tmp, "state.json"), "w") as f:
            json.dump(state, f)
        if os.path.exists(final):
            shutil.rmtree(final)
        os.rename(tmp, final)
        return final

    def load_checkpoint(self, path):
        with open(os.path.join(path, "state.json")) as f:
            state = json.load(f)
        if state["config_hash"] != self.config.config_hash():
            raise ValueError("checkpoint config hash does not match the "
                             "current configuration")
        self.model.load_state_arrays(
            iof.load_tensor_store(os.path.join(path, "params")))
        self.optimizer.load_state_arrays(
            iof.load_tensor_store(os.path.join(path, "optim")))
        self.pseudo.load_state_arrays(
            iof.load_tensor_store(os.path.join(path, "pseudo")))
        self.iteration = state["iteration"]
        _rng_state_from_json(self.rng, state["rng_state"])


class _FixedDraw:
    """Mimics a Generator for sample_pdf with a pre-drawn uniform block (so
    the RNG consumption order stays fixed across code paths)."""

    def __init__(self, block):
        self.block = block

    def random(self, shape):
        assert tuple(shape) == self.block.shape
        return self.block


def _bilinear_map(img, pix):
    """Bilinear lookup of a (h, w) map at (P, 2) pixel coords (clamped)."""
    h, w = img.shape
    x = np.clip(pix[:, 0], 0.0, w - 1.0)
    y = np.clip(pix[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else \
        np.zeros(len(x), np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else \
        np.zeros(len(y), np.int64)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, np.minimum(x0 + 1, w - 1)] * fx
    bot = (img[np.minimum(y0 + 1, h - 1), x0] * (1 - fx)
           + img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)] * fx)
    return top * (1 - fy) + bot * fy


def _render_weights_np(sdf, sharpness):
    """Plain-numpy twin of render_rays used for the no-grad coarse pass."""
    sig = 1.0 / (1.0 + np.exp(-np.clip(sharpness * sdf, -60, 60)))
    alpha = np.maximum((sig[:, :-1] - sig[:, 1:])
                       / (sig[:, :-1] + rd.ALPHA_EPS), 0.0)
    trans = np.cumprod(1.0 - alpha, axis=1)
    trans_excl = np.concatenate(
        [np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
    return alpha * trans_excl


def _rng_state_to_json(rng):
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _rng_state_from_json(rng, state):
    s = dict(state)
    s["state"] = {k: int(v) for k, v in state["state"].items()}
    rng.bit_generator.state = s
