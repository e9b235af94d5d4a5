"""Run configuration: flat ``key=value`` files with documented defaults.

Precedence is command-line flag > config file > profile default. Unknown
keys are rejected so that typos fail loudly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import NoiseSpec
from .inference import InferenceConfig
from .kvfile import ConfigError, coerce, parse_kv
from .network import NetworkConfig
from .training import PROFILES, TrainConfig


@dataclass
class DataConfig:
    count: int = 200
    height: int = 64
    width: int = 64
    classes: int = 5
    seed: int = 0
    smoothness: float = 8.0
    noise_base_count: int = 2
    noise_block_size: int = 8
    noise_seed: int = 0
    resolution_um: float = 3.87

    def noise(self, level: int, seed: int | None = None) -> NoiseSpec:
        return NoiseSpec(level, self.noise_base_count, self.noise_block_size,
                         self.noise_seed if seed is None else seed)


@dataclass
class PathsConfig:
    data: str = ""
    val_data: str = ""
    model: str = ""
    out: str = ""


@dataclass
class InferSection:
    t: int = 50
    dropout_rate: float = 0.4
    threads: int = 1
    seed: int = 0


# one-line documentation per key, shown by ``bayesseg config-keys``
KEY_DOCS = {
    "network.num_classes": "number of classes C (taken from the dataset when unset)",
    "network.growth_rate": "channels added by each dense-block layer",
    "network.layers_per_dense_block": "convolutions per dense block",
    "network.num_pool_levels": "down/up-sampling levels; input H, W must divide 2**levels",
    "network.initial_channels": "channels of the first convolution",
    "network.dropout_rate": "dropout probability before every convolution",
    "network.kernel_size": "odd spatial kernel size of dense-block convolutions",
    "network.input_dropout_rate": "dropout probability on the raw image before the first convolution",
    "train.profile": "named preset for train.* defaults: desk or paper",
    "train.iterations": "optimisation steps",
    "train.batch_size": "images per minibatch",
    "train.lr": "initial Adam learning rate",
    "train.lr_decay_factor": "learning-rate multiplier applied once at lr_decay_at",
    "train.lr_decay_at": "iteration at which the learning rate decays",
    "train.t_train": "Gaussian logit perturbations per pixel in the Bayesian loss",
    "train.dropout_rate": "dropout probability during training",
    "train.bayesian": "false trains the class-weighted cross-entropy baseline",
    "train.seed": "seed for initialisation, sampling, augmentation and dropout",
    "train.checkpoint_every": "iterations between checkpoints/validation",
    "train.augmentation": "random mirror and +-15 degree rotation",
    "infer.t": "MC-dropout forward passes at prediction time",
    "infer.dropout_rate": "dropout probability at prediction time",
    "infer.threads": "worker threads for MC passes",
    "infer.seed": "seed of the MC-dropout pass streams",
    "data.count": "images to generate",
    "data.height": "image rows",
    "data.width": "image columns",
    "data.classes": "classes C of generated data",
    "data.seed": "generator seed",
    "data.smoothness": "boundary smoothing length in columns (inf = flat)",
    "data.noise_base_count": "blocks at noise level 1; doubles per level",
    "data.noise_block_size": "side length of noise blocks in pixels",
    "data.noise_seed": "seed for block-noise placement",
    "data.resolution_um": "axial resolution in micrometres per pixel row",
    "paths.data": "training or evaluation dataset directory",
    "paths.val_data": "optional validation dataset directory",
    "paths.model": "checkpoint path",
    "paths.out": "output path",
}


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferSection = field(default_factory=InferSection)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    profile: str = "desk"
    explicit: set = field(default_factory=set)

    def inference(self, bayesian: bool = True) -> InferenceConfig:
        return InferenceConfig(self.infer.t, self.infer.dropout_rate, bayesian)

    def to_kv(self) -> dict:
        out = {"train.profile": self.profile}
        for section in ("network", "train", "infer", "data", "paths"):
            for k, v in asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return out


_SECTIONS = {
    "network": NetworkConfig,
    "train": TrainConfig,
    "infer": InferSection,
    "data": DataConfig,
    "paths": PathsConfig,
}


def parse_run_config(text: str = "", source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from config text plus flag ``overrides`` (``{key: value}``)."""
    items = parse_kv(text, source)
    for key, value in (overrides or {}).items():
        if value is not None:
            items[key] = (str(value) if not isinstance(value, bool) else ("true" if value else "false"), None)
    for key, (_, line) in items.items():
        if key not in KEY_DOCS:
            raise ConfigError(f"unknown key {key!r}", line, source)

    profile = items.pop("train.profile", ("desk", None))
    if profile[0] not in PROFILES:
        raise ConfigError(f"unknown train.profile {profile[0]!r}; choose from {sorted(PROFILES)}", profile[1], source)
    train_defaults = PROFILES[profile[0]]()

    sections = {}
    for name, cls in _SECTIONS.items():
        defaults = train_defaults if name == "train" else cls()
        kwargs = {}
        for f in fields(cls):
            key = f"{name}.{f.name}"
            if key in items:
                raw, line = items[key]
                kwargs[f.name] = coerce(raw, getattr(defaults, f.name), key, line, source)
        if name == "train" and "lr_decay_at" not in kwargs:
            # a shortened run keeps a valid schedule unless the decay point is set explicitly
            iters = kwargs.get("iterations", defaults.iterations)
            kwargs["lr_decay_at"] = min(defaults.lr_decay_at, iters)
        try:
            sections[name] = type(defaults)(**{**asdict(defaults), **kwargs})
            if hasattr(sections[name], "validate"):
                sections[name].validate()
        except ValueError as exc:
            raise ConfigError(str(exc), None, source) from None
    return RunConfig(**sections, profile=profile[0], explicit=set(items))


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return parse_run_config("", overrides=overrides)
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config file not found", None, str(path))
    return parse_run_config(path.read_text(), str(path), overrides)
