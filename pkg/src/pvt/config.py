"""Run configuration: a TOML file with one section per pipeline stage.

Every field has a default; unknown sections or keys are rejected so typos
fail loudly before any work starts.
"""

import dataclasses
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .detector import DetectorConfig
from .features import FbankConfig
from .kws_train import KwsTrainConfig
from .mdtc import MdtcConfig
from .sv import SvConfig, SvTrainConfig, named_stages


class ConfigError(ValueError):
    pass


@dataclass
class FeaturesSection:
    n_mels: int = 80
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    fmin: float = 20.0
    fmax: float = 7600.0
    log_floor: float = 1e-10
    cmn: bool = True

    def fbank_config(self):
        return FbankConfig(n_mels=self.n_mels, win_ms=self.win_ms,
                           hop_ms=self.hop_ms, fft_size=self.fft_size,
                           fmin=self.fmin, fmax=self.fmax,
                           log_floor=self.log_floor)


@dataclass
class MdtcSection:
    input_dim: int = 80
    channels: int = 64
    stacks: int = 4
    dilations: tuple = (1, 2, 4, 8)
    kernel: int = 5
    se_reduction: int = 8
    se_window: int = 60
    causal: bool = True

    def mdtc_config(self):
        return MdtcConfig(**dataclasses.asdict(self))


@dataclass
class KwsTrainSection:
    lr: float = 0.002
    batch_size: int = 150
    decay_factor: float = 0.7
    min_epochs: int = 15
    max_epochs: int = 100
    loss_clamp: float = 1e-7
    grad_clip: float = 0.0
    val_fraction: float = 0.10

    def train_config(self, seed=0):
        return KwsTrainConfig(seed=seed, **dataclasses.asdict(self))


@dataclass
class DetectorSection:
    gamma: float = 0.01
    smoothing_window: int = 1

    def detector_config(self):
        return DetectorConfig(**dataclasses.asdict(self))


@dataclass
class SvSection:
    extractor: str = "resnet34se"  # named preset, or per-stage triples below
    stages: list = None  # optional [[channels, blocks, stride], ...]
    input_dim: int = 80
    embedding_dim: int = 128
    pooling: str = "ASP"
    attention_dim: int = 32
    se_reduction: int = 8
    arcface_scale: float = 32.0
    arcface_margin: float = 0.2
    supcon_temperature: float = 0.07
    supcon_weight: float = 1.0
    n_classes: int = 0
    initial_lr: float = 0.1
    lr_decay_factor: float = 10.0
    lr_decay_every: int = 5
    epochs: int = 30
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 0.0
    train_frames: int = 100
    finetune_loss_threshold: float = 0.2

    def sv_config(self):
        stages = (tuple(tuple(s) for s in self.stages) if self.stages
                  else named_stages(self.extractor))
        return SvConfig(stages=stages, input_dim=self.input_dim,
                        embedding_dim=self.embedding_dim, pooling=self.pooling,
                        attention_dim=self.attention_dim,
                        se_reduction=self.se_reduction,
                        arcface_scale=self.arcface_scale,
                        arcface_margin=self.arcface_margin,
                        supcon_temperature=self.supcon_temperature,
                        supcon_weight=self.supcon_weight,
                        n_classes=self.n_classes)

    def sv_train_config(self, seed=0):
        return SvTrainConfig(initial_lr=self.initial_lr,
                             lr_decay_factor=self.lr_decay_factor,
                             lr_decay_every=self.lr_decay_every,
                             epochs=self.epochs, batch_size=self.batch_size,
                             momentum=self.momentum,
                             weight_decay=self.weight_decay,
                             train_frames=self.train_frames,
                             finetune_loss_threshold=self.finetune_loss_threshold,
                             seed=seed)


@dataclass
class EvalSection:
    alpha: float = 19.0


_SECTIONS = {
    "features": FeaturesSection,
    "mdtc": MdtcSection,
    "kws_train": KwsTrainSection,
    "detector": DetectorSection,
    "sv": SvSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    features: FeaturesSection
    mdtc: MdtcSection
    kws_train: KwsTrainSection
    detector: DetectorSection
    sv: SvSection
    eval: EvalSection

    def section_hash(self, name):
        from .container import config_hash
        return config_hash(dataclasses.asdict(getattr(self, name)))

    def validate(self):
        """Construct every stage config so value errors surface at load time."""
        checks = (
            ("features", self.features.fbank_config),
            ("mdtc", self.mdtc.mdtc_config),
            ("kws_train", self.kws_train.train_config),
            ("detector", self.detector.detector_config),
            ("sv", self.sv.sv_config),
        )
        for name, fn in checks:
            try:
                fn()
            except ValueError as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        return self


def _build_section(cls, values, section_name):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - fields
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section_name}]: {', '.join(sorted(unknown))}")
    kwargs = dict(values)
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) \
                and isinstance(f.default, tuple):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section_name}] section: {exc}") from exc


def default_config():
    return RunConfig(**{name: cls() for name, cls in _SECTIONS.items()})


def load_config(path=None):
    """Parse, validate and freeze a TOML run config; None gives defaults."""
    if path is None:
        return default_config()
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, doc.get(name, {}), name)
    return RunConfig(**sections).validate()
