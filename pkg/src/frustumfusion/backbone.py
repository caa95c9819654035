"""2D feature extraction: a 9-layer geometry backbone emitting a 3-level
feature pyramid, and a separate full-resolution color-feature network."""

import numpy as np

from . import autodiff as ad
from .nnlayers import Conv2d

GEO_CHANNELS = 8
COLOR_CHANNELS = 8


class GeoFeatureNet:
    """Nine 3x3 convolutions in three blocks (strides 1, 2, 2), relu after
    every conv; 1x1 lateral heads emit 8-channel maps at strides 4/2/1 with
    top-down nearest-upsample additions (feature-pyramid style).

    Pyramid level 0 is the coarsest (stride 4) and feeds cascade level 0.
    """

    def __init__(self, store, name, rng, channels=GEO_CHANNELS,
                 dtype=np.float32):
        c = channels
        mk = lambda nm, cin, cout, s: Conv2d(store, f"{name}.{nm}", cin,
                                             cout, 3, s, 1, rng, dtype)
        self.convs = [
            mk("conv0", 3, c, 1), mk("conv1", c, c, 1), mk("conv2", c, c, 1),
            mk("conv3", c, 2 * c, 2), mk("conv4", 2 * c, 2 * c, 1),
            mk("conv5", 2 * c, 2 * c, 1),
            mk("conv6", 2 * c, 4 * c, 2), mk("conv7", 4 * c, 4 * c, 1),
            mk("conv8", 4 * c, 4 * c, 1),
        ]
        self.head0 = Conv2d(store, f"{name}.head0", 4 * c, c, 1, 1, 0, rng,
                            dtype)
        self.head1 = Conv2d(store, f"{name}.head1", 2 * c, c, 1, 1, 0, rng,
                            dtype)
        self.head2 = Conv2d(store, f"{name}.head2", c, c, 1, 1, 0, rng,
                            dtype)
        self.channels = c

    def __call__(self, images):
        """images: (B, 3, H, W) with H, W divisible by 4. Returns
        [level0 (B, c, H/4, W/4), level1 (B, c, H/2, W/2),
        level2 (B, c, H, W)]."""
        _, _, h, w = images.shape
        if h % 4 or w % 4:
            need_h = (4 - h % 4) % 4
            need_w = (4 - w % 4) % 4
            raise ad.ShapeError(
                f"image size {h}x{w} not divisible by 4; pad by "
                f"({need_h}, {need_w})")
        x = images
        taps = []
        for i, conv in enumerate(self.convs):
            x = ad.relu(conv(x))
            if i in (2, 5, 8):
                taps.append(x)
        f_full, f_half, f_quarter = taps
        lv0 = self.head0(f_quarter)
        lv1 = ad.add(self.head1(f_half), ad.upsample_nearest_2d(lv0, 2))
        lv2 = ad.add(self.head2(f_full), ad.upsample_nearest_2d(lv1, 2))
        return [lv0, lv1, lv2]


class ColorFeatureNet:
    """Distinct shallow network producing one full-resolution 8-channel
    color-feature map per image."""

    def __init__(self, store, name, rng, channels=COLOR_CHANNELS,
                 dtype=np.float32):
        c = channels
        self.conv0 = Conv2d(store, f"{name}.conv0", 3, 2 * c, 3, 1, 1, rng,
                            dtype)
        self.conv1 = Conv2d(store, f"{name}.conv1", 2 * c, c, 3, 1, 1, rng,
                            dtype)
        self.channels = c

    def __call__(self, images):
        x = ad.relu(self.conv0(images))
        return self.conv1(x)
