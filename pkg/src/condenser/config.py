"""Experiment configuration: INI parsing, recipe defaults, and hashing.

A config file only needs to state what deviates from the recipe for its
resolution; everything else is filled in before hashing, so the stored
hash pins the fully resolved configuration.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .hashing import mapping_hash
from .recover import RecoverConfig
from .squeeze import SqueezeConfig

STAGE_ORDER = ("squeeze", "recover", "relabel", "eval", "continual")

ARCH_CHOICES = ("convnet4", "resnet18_adapted", "resnet50_adapted", "bnvit_tiny")


@dataclass
class RelabelSettings:
    tau: float = 20.0
    epochs: int = 100
    precision: str = "float16"
    topk: int = 0  # 0 stores dense labels
    crop_scale_range: tuple[float, float] = (0.08, 1.0)
    crop_ratio_range: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    hflip_prob: float = 0.5


@dataclass
class EvalSettings:
    arch: str = "convnet4"
    epochs: int = 100
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 64
    cutmix_prob: float = 0.0
    cutmix_beta: float = 1.0


@dataclass
class ContinualSettings:
    steps: int = 5
    classes_per_step: int = 0  # 0 derives an even split
    memory_per_class: int = 0  # 0 means unlimited
    epochs: int = 0  # 0 reuses eval epochs


def recipe_defaults(resolution: int) -> dict:
    """Stage hyperparameters by input resolution.

    32 px: long schedule, small batches, temperature 30, light BN weight.
    64 px: short 50-epoch squeeze budget, BN weight 1.0, temperature 20.
    224 px: 2k recovery iterations and an AdamW student with CutMix.
    """
    if resolution == 32:
        return {
            "squeeze": dict(optimizer="sgd", lr=0.1, momentum=0.9, weight_decay=5e-4,
                            batch_size=128, epochs=200),
            "recover": dict(alpha_bn=0.01, lr=0.25, iterations=1000, batch_size=100),
            "relabel": dict(tau=30.0, epochs=400),
            "eval": dict(optimizer="sgd", lr=0.1, momentum=0.9, weight_decay=5e-4,
                         batch_size=128, epochs=400, cutmix_prob=0.0),
        }
    if resolution == 64:
        return {
            "squeeze": dict(optimizer="sgd", lr=0.2, momentum=0.9, weight_decay=1e-4,
                            batch_size=256, epochs=50),
            "recover": dict(alpha_bn=1.0, lr=0.1, iterations=1000, batch_size=100),
            "relabel": dict(tau=20.0, epochs=100),
            "eval": dict(optimizer="sgd", lr=0.2, momentum=0.9, weight_decay=1e-4,
                         batch_size=256, epochs=100, cutmix_prob=0.0),
        }
    if resolution == 224:
        return {
            "squeeze": dict(optimizer="sgd", lr=0.1, momentum=0.9, weight_decay=1e-4,
                            batch_size=256, epochs=90),
            "recover": dict(alpha_bn=0.01, lr=0.25, iterations=2000, batch_size=100),
            "relabel": dict(tau=20.0, epochs=300),
            "eval": dict(optimizer="adamw", lr=1e-3, betas=(0.9, 0.999), weight_decay=0.01,
                         batch_size=1024, epochs=300, cutmix_prob=1.0, cutmix_beta=1.0),
        }
    raise ConfigurationError(f"no recipe for resolution {resolution}")


@dataclass
class ExperimentConfig:
    name: str
    dataset: str
    data_root: str
    resolution: int
    output_root: str = "runs"
    seed: int = 0
    stages: tuple[str, ...] = ("squeeze", "recover", "relabel", "eval")
    squeeze_arch: str = "convnet4"
    squeeze: SqueezeConfig = field(default_factory=SqueezeConfig)
    provided_checkpoint: str | None = None
    recover: RecoverConfig = field(default_factory=RecoverConfig)
    provided_condensed: str | None = None
    relabel: RelabelSettings = field(default_factory=RelabelSettings)
    provided_archive: str | None = None
    eval: EvalSettings = field(default_factory=EvalSettings)
    continual: ContinualSettings = field(default_factory=ContinualSettings)

    def validate(self):
        if not self.name:
            raise ConfigurationError("experiment name must be non-empty")
        if not self.stages:
            raise ConfigurationError("stages must be non-empty")
        seen_order = [STAGE_ORDER.index(s) for s in self.stages if s in STAGE_ORDER]
        unknown = [s for s in self.stages if s not in STAGE_ORDER]
        if unknown:
            raise ConfigurationError(f"unknown stages {unknown}; valid: {STAGE_ORDER}")
        if len(set(self.stages)) != len(self.stages):
            raise ConfigurationError("stages must be unique")
        if seen_order != sorted(seen_order):
            raise ConfigurationError(f"stages must follow the order {STAGE_ORDER}")
        if self.squeeze_arch not in ARCH_CHOICES or self.eval.arch not in ARCH_CHOICES:
            raise ConfigurationError(f"arch must be one of {ARCH_CHOICES}")
        if self.relabel.precision not in ("float16", "float32"):
            raise ConfigurationError("relabel precision must be float16 or float32")
        if "eval" in self.stages and self.eval.epochs > self.relabel.epochs and \
                self.provided_archive is None:
            raise ConfigurationError(
                f"eval needs {self.eval.epochs} epochs but relabel only generates "
                f"{self.relabel.epochs}"
            )
        self.squeeze.validate()
        self.recover.validate()

    def flat_dict(self) -> dict:
        flat = {}
        own = {
            "name": self.name, "dataset": self.dataset, "data_root": self.data_root,
            "resolution": self.resolution, "output_root": self.output_root,
            "seed": self.seed, "stages": list(self.stages),
            "squeeze_arch": self.squeeze_arch,
            "provided_checkpoint": self.provided_checkpoint,
            "provided_condensed": self.provided_condensed,
            "provided_archive": self.provided_archive,
        }
        for k, v in own.items():
            flat[f"experiment.{k}"] = v
        for section, cfg in (
            ("squeeze", self.squeeze), ("recover", self.recover),
            ("relabel", self.relabel), ("eval", self.eval), ("continual", self.continual),
        ):
            for k, v in asdict(cfg).items():
                flat[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        return flat

    def config_hash(self) -> str:
        return mapping_hash(self.flat_dict())


def _apply_section(parser, section, target, skip=()):
    """Overlay INI keys onto a dataclass instance; returns the new instance."""
    if not parser.has_section(section):
        return target
    updates = {}
    valid = {f.name for f in fields(target)}
    for key, raw in parser.items(section):
        if key in skip:
            continue
        if key not in valid:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        current = getattr(target, key)
        try:
            if key == "augmentations":
                parts = [p for p in raw.replace(",", " ").split() if p and p != "none"]
                updates[key] = tuple(parts)
            elif isinstance(current, tuple):
                parts = [p for p in raw.replace(",", " ").split() if p]
                updates[key] = tuple(float(p) for p in parts)
            elif isinstance(current, bool):
                updates[key] = parser.getboolean(section, key)
            elif isinstance(current, int):
                updates[key] = int(raw)
            elif isinstance(current, float):
                updates[key] = float(raw)
            else:
                updates[key] = raw
        except ValueError as e:
            raise ConfigurationError(
                f"bad value for {key!r} in section [{section}]: {raw!r} ({e})"
            ) from e
    return replace(target, **updates)


def from_ini(path) -> ExperimentConfig:
    """Parse a config file, layering it over the resolution recipe."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e
    if not parser.has_section("experiment"):
        raise ConfigurationError(f"{path} is missing the [experiment] section")
    exp = dict(parser.items("experiment"))
    for required in ("name", "dataset", "data_root", "resolution"):
        if required not in exp:
            raise ConfigurationError(f"[experiment] must define {required!r}")
    try:
        resolution = int(exp["resolution"])
        seed = int(exp.get("seed", "0"))
    except ValueError as e:
        raise ConfigurationError(f"bad numeric value in [experiment]: {e}") from e
    recipe = recipe_defaults(resolution)
    squeeze = replace(SqueezeConfig(seed=seed), **recipe["squeeze"])
    recover = replace(RecoverConfig(seed=seed), **recipe["recover"])
    relabel = replace(RelabelSettings(), **recipe["relabel"])
    eval_settings = replace(EvalSettings(), **recipe["eval"])
    stages = tuple(
        s.strip() for s in exp.get("stages", "squeeze,recover,relabel,eval").split(",")
        if s.strip()
    )
    cfg = ExperimentConfig(
        name=exp["name"],
        dataset=exp["dataset"],
        data_root=exp["data_root"],
        resolution=resolution,
        output_root=exp.get("output_root", "runs"),
        seed=seed,
        stages=stages,
        squeeze_arch=exp.get("squeeze_arch", "convnet4"),
        squeeze=squeeze,
        recover=recover,
        relabel=relabel,
        eval=eval_settings,
        continual=ContinualSettings(),
    )
    if "augmentations" in exp:
        raise ConfigurationError("augmentations belong in the [squeeze] section")
    cfg.squeeze = _apply_section(parser, "squeeze", cfg.squeeze, skip=("checkpoint", "arch"))
    cfg.recover = _apply_section(parser, "recover", cfg.recover, skip=("condensed",))
    cfg.relabel = _apply_section(parser, "relabel", cfg.relabel, skip=("archive",))
    cfg.eval = _apply_section(parser, "eval", cfg.eval)
    cfg.continual = _apply_section(parser, "continual", cfg.continual)
    if parser.has_option("squeeze", "arch"):
        cfg.squeeze_arch = parser.get("squeeze", "arch")
    if parser.has_option("squeeze", "checkpoint"):
        cfg.provided_checkpoint = parser.get("squeeze", "checkpoint")
    if parser.has_option("recover", "condensed"):
        cfg.provided_condensed = parser.get("recover", "condensed")
    if parser.has_option("relabel", "archive"):
        cfg.provided_archive = parser.get("relabel", "archive")
    cfg.squeeze = replace(cfg.squeeze, seed=seed)
    cfg.recover = replace(cfg.recover, seed=seed)
    cfg.validate()
    return cfg


def to_ini(cfg: ExperimentConfig, path) -> Path:
    """Write the fully resolved config; from_ini(to_ini(cfg)) round-trips."""
    parser = configparser.ConfigParser()
    parser["experiment"] = {
        "name": cfg.name,
        "dataset": cfg.dataset,
        "data_root": cfg.data_root,
        "resolution": str(cfg.resolution),
        "output_root": cfg.output_root,
        "seed": str(cfg.seed),
        "stages": ",".join(cfg.stages),
        "squeeze_arch": cfg.squeeze_arch,
    }

    def fmt(v):
        if isinstance(v, (tuple, list)):
            return " ".join(str(x) for x in v)
        return str(v)

    for section, sub in (
        ("squeeze", cfg.squeeze), ("recover", cfg.recover),
        ("relabel", cfg.relabel), ("eval", cfg.eval), ("continual", cfg.continual),
    ):
        parser[section] = {k: fmt(v) for k, v in asdict(sub).items()}
    if cfg.provided_checkpoint:
        parser["squeeze"]["checkpoint"] = cfg.provided_checkpoint
    if cfg.provided_condensed:
        parser["recover"]["condensed"] = cfg.provided_condensed
    if cfg.provided_archive:
        parser["relabel"]["archive"] = cfg.provided_archive
    path = Path(path)
    with open(path, "w") as f:
        parser.write(f)
    return path
