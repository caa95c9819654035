"""Thin trainable-layer wrappers over the autodiff primitives.

Layers register their parameters in a ParameterStore under dotted names so
checkpoints stay flat and deterministic.
"""

import numpy as np

from . import autodiff as ad


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(dtype)


class Linear:
    def __init__(self, store, name, cin, cout, rng, dtype=np.float32):
        self.w = store.register(
            f"{name}.weight", he_uniform(rng, (cin, cout), cin, dtype))
        self.b = store.register(
            f"{name}.bias", np.zeros(cout, dtype=dtype))

    def __call__(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)


class Conv2d:
    def __init__(self, store, name, cin, cout, k=3, stride=1, padding=1,
                 rng=None, dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.w = store.register(f"{name}.weight", w)
        self.b = store.register(f"{name}.bias", np.zeros(cout, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, self.stride, self.padding)


class Conv3d:
    def __init__(self, store, name, cin, cout, k=3, padding=1, rng=None,
                 dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((cout, cin, k, k, k), dtype=dtype)
        else:
            w = he_uniform(rng, (cout, cin, k, k, k), cin * k ** 3, dtype)
        self.w = store.register(f"{name}.weight", w)
        self.b = store.register(f"{name}.bias", np.zeros(cout, dtype=dtype))
        self.padding = padding

    def __call__(self, x, stride=1):
        return ad.conv3d(x, self.w, self.b, stride, self.padding)


class ConvTranspose3d:
    def __init__(self, store, name, cin, cout, k=3, padding=1, rng=None,
                 dtype=np.float32):
        w = he_uniform(rng, (cin, cout, k, k, k), cin * k ** 3, dtype)
        self.w = store.register(f"{name}.weight", w)
        self.b = store.register(f"{name}.bias", np.zeros(cout, dtype=dtype))
        self.padding = padding

    def __call__(self, x, stride=1, output_padding=0):
        return ad.conv_transpose3d(x, self.w, self.b, stride, self.padding,
                                   output_padding)


class MLP:
    """relu MLP: cin -> hidden x (depth) -> cout, no output activation."""

    def __init__(self, store, name, cin, hidden, depth, cout, rng,
                 dtype=np.float32):
        dims = [cin] + [hidden] * depth + [cout]
        self.layers = [Linear(store, f"{name}.fc{i}", dims[i], dims[i + 1],
                              rng, dtype) for i in range(len(dims) - 1)]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = ad.relu(x)
        return x
