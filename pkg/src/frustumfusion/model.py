"""Bundle of every trainable network plus the shared parameter store, and
the model-level helpers the trainer, extractor and evaluator build on."""

import numpy as np

from . import autodiff as ad
from . import frustum as fr
from . import fusion as fu
from . import rendering as rd
from .backbone import ColorFeatureNet, GeoFeatureNet


class ReconstructionModel:
    """All networks of the pipeline behind one parameter store.

    The cost/geometric regularizers are shared across views and levels; the
    SDF input width is set by the number of fused stages.
    """

    def __init__(self, config, seed=None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.stages = config.fusion_stages
        self.feature_dim = self.stages * config.feature_channels
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.store = ad.ParameterStore()
        c = config.feature_channels
        dt = self.dtype
        self.geo_net = GeoFeatureNet(self.store, "geo_backbone", rng, c, dt)
        self.color_net = ColorFeatureNet(self.store, "color_backbone", rng,
                                         c, dt)
        self.cost_reg = fr.CostRegularizer(self.store, "cost_reg", c, rng,
                                           dt)
        self.geo_reg = fr.GeoWeightNet(self.store, "geo_reg", c, rng, dt)
        self.sdf_net = rd.SdfNetwork(self.store, "sdf", self.feature_dim,
                                     rng, dtype=dt)
        self.blend_net = rd.ColorBlendNetwork(self.store, "blend", c,
                                              self.feature_dim, rng,
                                              dtype=dt)
        self.sharpness = rd.Sharpness(self.store, "render", dtype=dt)

    # -- forward helpers ----------------------------------------------------

    def feature_pyramids(self, images, view_ids):
        """images: (B, 3, h, w) ndarray; returns {view_id: [Tensor]*L}."""
        batch = ad.Tensor(np.ascontiguousarray(images, dtype=self.dtype))
        levels = self.geo_net(batch)
        return {vid: [lv[i] for lv in levels]
                for i, vid in enumerate(view_ids)}

    def color_features(self, images, view_ids):
        batch = ad.Tensor(np.ascontiguousarray(images, dtype=self.dtype))
        feats = self.color_net(batch)
        return {vid: feats[i] for i, vid in enumerate(view_ids)}

    def build_frustums(self, images, cams, ref_ids, sources_of,
                       hypotheses_override=None):
        """Full cascade for the given reference views.

        images: {view_id: (3, h, w) float ndarray}; cams: {view_id: Camera}.
        """
        ids = sorted(set(ref_ids) | {s for v in sources_of.values()
                                     for s in v})
        batch = np.stack([images[i] for i in ids])
        pyramids = self.feature_pyramids(batch, ids)
        return fr.run_cascade(pyramids, cams, ref_ids, sources_of,
                              self.cost_reg, self.geo_reg,
                              self.config.depth_counts,
                              self.config.interval_scales,
                              hypotheses_override=hypotheses_override)

    def fuse_at(self, frustums_by_view, points, view_ids=None):
        return fu.sample_and_fuse(frustums_by_view, points,
                                  stages=self.stages,
                                  mode=self.config.fusion_mode,
                                  view_ids=view_ids)

    def sdf_fn(self, frustums_by_view, view_ids=None):
        """Closure evaluating s(p) through fusion; accepts ndarray or
        Tensor points and returns a Tensor (P,)."""
        def fn(points):
            if not isinstance(points, ad.Tensor):
                points = ad.Tensor(np.asarray(points, dtype=self.dtype))
            fused = self.fuse_at(frustums_by_view, points, view_ids)
            return rd.predict_sdf(points, fused.features, self.sdf_net)
        return fn

    # -- persistence ----------------------------------------------------------

    def state_arrays(self):
        return self.store.state_arrays()

    def load_state_arrays(self, arrays):
        self.store.load_state_arrays(arrays)
