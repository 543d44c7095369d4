"""Pipeline configuration: a YAML tree mapped onto nested dataclasses, with presets and overrides."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

CLAHE_POLICIES = ("features_only", "features_and_dark_clusters")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data_root: str = "data/synth"
    output_root: str = "out"
    checkpoint: str = "out/checkpoints"


@dataclass
class SynthBlock:
    num_domains: int = 6
    images_per_domain: int = 50
    image_size: int = 64
    nuclei_count_range: list = field(default_factory=lambda: [3, 9])
    nuclei_radius_range: list = field(default_factory=lambda: [3.0, 7.0])
    styles: Optional[list] = None
    seed: int = 0


@dataclass
class ClusteringBlock:
    k: int = 6
    bins: int = 16
    clahe_policy: str = "features_only"
    clip_limit: float = 0.01
    tile_grid: list = field(default_factory=lambda: [8, 8])
    dark_threshold: float = 0.25
    n_init: int = 10
    seed: int = 0
    exemplars: int = 4


@dataclass
class NetBlock:
    image_size: int = 64
    content_channels: int = 64
    attr_dim: int = 8
    width: int = 16
    dis_width: int = 16
    n_res: int = 3
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    n_iter: int = 2000
    seed: int = 0


@dataclass
class WeightsBlock:
    w_cc: float = 10.0
    w_c: float = 1.0
    w_d: float = 1.0
    w_recon: float = 10.0
    w_latent: float = 10.0
    w_kl: float = 0.01


@dataclass
class GanBlock:
    net: NetBlock = field(default_factory=NetBlock)
    weights: WeightsBlock = field(default_factory=WeightsBlock)
    checkpoint_every: int = 500
    log_every: int = 100


@dataclass
class AugmentBlock:
    style_prob: float = 0.5
    # geometric ops are meant for on-the-fly training augmentation; the exported
    # corpus keeps masks identical to its sources
    standard_ops: list = field(default_factory=list)
    copies: int = 1
    seed: int = 0
    exclude_self_domain: bool = False
    grid_rows: int = 4


@dataclass
class TtaBlock:
    rot90: list = field(default_factory=lambda: [0, 1, 2, 3])
    flips: list = field(default_factory=lambda: ["h", "v"])
    scales: list = field(default_factory=list)
    jitter_draws: int = 0
    merge_iou_threshold: float = 0.5
    vote_fraction: float = 0.5
    seed: int = 0


@dataclass
class EvaluateBlock:
    predictor: str = "blob"
    blob_threshold: float = 0.25
    blob_sigma: float = 1.0
    blob_min_size: int = 6


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    synth: SynthBlock = field(default_factory=SynthBlock)
    clustering: ClusteringBlock = field(default_factory=ClusteringBlock)
    gan: GanBlock = field(default_factory=GanBlock)
    augment: AugmentBlock = field(default_factory=AugmentBlock)
    tta: TtaBlock = field(default_factory=TtaBlock)
    evaluate: EvaluateBlock = field(default_factory=EvaluateBlock)

    def validate(self):
        if self.clustering.clahe_policy not in CLAHE_POLICIES:
            raise ConfigError(f"clustering.clahe_policy must be one of {CLAHE_POLICIES}")
        if self.clustering.k < 1:
            raise ConfigError("clustering.k must be >= 1")
        if self.gan.net.image_size % 4 or self.gan.net.image_size < 8:
            raise ConfigError("gan.net.image_size must be a multiple of 4 and >= 8")
        if not 0 <= self.augment.style_prob <= 1:
            raise ConfigError("augment.style_prob must lie in [0, 1]")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


PRESETS = {
    # sized to train in well under half an hour on a single CPU core
    "toy": {"gan": {"net": {"n_iter": 500}, "checkpoint_every": 250, "log_every": 50}},
    "paper": {
        "synth": {"image_size": 256},
        "gan": {"net": {"image_size": 216, "content_channels": 256, "width": 64, "dis_width": 64,
                        "batch_size": 2, "n_iter": 100000},
                "checkpoint_every": 5000, "log_every": 500},
    },
}


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = known[name].type
        sub = _SECTIONS.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    return cls(**kwargs)


_SECTIONS = {c.__name__: c for c in (Paths, SynthBlock, ClusteringBlock, NetBlock, WeightsBlock,
                                      GanBlock, AugmentBlock, TtaBlock, EvaluateBlock)}


def deep_merge(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text):
    """``a.b.c=value`` -> nested dict; the value is parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def load_config(path=None, preset=None, overrides=()):
    """Defaults, then preset, then file, then ``--set`` overrides. Unknown keys are rejected."""
    tree = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        tree = deep_merge(tree, PRESETS[preset])
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        data = yaml.safe_load(p.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        tree = deep_merge(tree, data)
    for ov in overrides:
        tree = deep_merge(tree, parse_override(ov))
    try:
        cfg = _build(PipelineConfig, tree, "config")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def dump_config(cfg: PipelineConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
