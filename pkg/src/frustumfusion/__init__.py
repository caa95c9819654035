"""Multi-view neural SDF surface reconstruction via cascaded cost-frustum
fusion, with an exact-ground-truth synthetic scene harness."""

__version__ = "0.1.0"
