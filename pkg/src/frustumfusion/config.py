"""Run configuration: every tunable of the pipeline with defaults, TOML
loading, command-line overrides and validation. Unknown keys are rejected
and the fully resolved config is echoed to disk next to the run outputs."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:                      # Python 3.10
    import tomli as tomllib


@dataclass
class RunConfig:
    # reproducibility
    seed: int = 0
    dtype: str = "float32"

    # scene / views
    n_input_views: int = 5
    levels: int = 3
    feature_channels: int = 8

    # cascade
    depth_counts: tuple = (48, 32, 8)
    interval_scales: tuple = (1.0, 0.5, 0.125)

    # rays and sampling
    rays_per_batch: int = 512
    n_coarse: int = 64
    n_fine: int = 64

    # fusion
    fusion_mode: str = "weighted"        # weighted | addition
    fusion_stages: int = 3               # 1..levels

    # losses
    lambda_cc: float = 1.0
    lambda_eik: float = 0.1
    lambda_spa: float = 0.02
    lambda_pdc_after: float = 0.05
    lambda_pgs_after: float = 1.0
    schedule_boundary: int = -1          # -1: iterations // 30
    tau_sparse: float = 100.0
    smoothness_weight: float = 0.1
    eik_points: int = 1024               # ray subset; matched by ball samples
    stencil_eps: float = 1e-3

    # pseudo geometry
    tau_px: float = 1.0
    tau_depth: float = 0.01
    n_min_consistent: int = 1
    pseudo_interval: int = 250
    merge_radius: float = 0.005
    pseudo_points_per_batch: int = 512

    # optimization
    iterations: int = 2000
    lr_peak: float = 5e-4
    lr_end: float = 2.5e-5
    warmup_frac: float = 1.0 / 60.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 500

    # extraction
    extract_resolution: int = 128
    chamfer_samples: int = 100_000

    def __post_init__(self):
        self.depth_counts = tuple(int(v) for v in self.depth_counts)
        self.interval_scales = tuple(float(v) for v in self.interval_scales)
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.levels != len(self.depth_counts):
            raise ValueError("depth_counts length must equal levels")
        if self.levels != len(self.interval_scales):
            raise ValueError("interval_scales length must equal levels")
        if any(d < 2 for d in self.depth_counts):
            raise ValueError("every level needs at least 2 hypotheses")
        if self.fusion_mode not in ("weighted", "addition"):
            raise ValueError("fusion_mode must be weighted or addition")
        if not 1 <= self.fusion_stages <= self.levels:
            raise ValueError("fusion_stages out of range")
        if self.n_input_views < 2:
            raise ValueError("need at least 2 input views")
        if self.iterations < 1:
            raise ValueError("iterations must be positive")

    @property
    def boundary(self):
        if self.schedule_boundary >= 0:
            return self.schedule_boundary
        return self.iterations // 30

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["depth_counts"] = list(self.depth_counts)
        out["interval_scales"] = list(self.interval_scales)
        return out

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def echo(self, path):
        with open(path, "w") as f:
            json.dump({"config": self.to_dict(),
                       "hash": self.config_hash()}, f, indent=1)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, value):
    if name not in _FIELDS:
        raise KeyError(f"unknown config key {name!r}")
    default = _FIELDS[name].default
    if isinstance(default, bool):
        return value in (True, "true", "1", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple) or name in ("depth_counts",
                                              "interval_scales"):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(float(v) if "." in str(v) else int(v) for v in value)
    return value


def load_config(toml_path=None, overrides=None):
    """Build a RunConfig from an optional TOML file plus key=value
    overrides (applied in order)."""
    data = {}
    if toml_path:
        with open(toml_path, "rb") as f:
            raw = tomllib.load(f)
        for k, v in raw.items():
            data[k] = _coerce(k, v)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        data[k.strip()] = _coerce(k.strip(), v.strip())
    return RunConfig(**data)
