"""Experiment config files: INI sections [data], [model], [modulator], [train], [eval].

Scalars are written bare, lists as JSON. Unknown sections or keys are
errors, so a typo cannot silently fall back to a default.
"""
import configparser
import io
import json
from dataclasses import dataclass, field, fields, replace

from .metatrain import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | idx
    num_classes: int = 10
    n_max: int = 500
    imbalance_factor: float = 100.0
    seed: int = 0
    dim: int = 2
    separation: float = 4.0
    rotation: float = 0.0
    test_per_class: int = 100
    meta_strategy: str = "development"
    meta_per_class: int = 20
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self):
        if not self.imbalance_factor >= 1:
            raise ConfigError(f"[data] imbalance_factor must be >= 1, got {self.imbalance_factor}")
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"[data] source must be synthetic or idx, got {self.source!r}")
        if self.meta_strategy not in ("meta", "development"):
            raise ConfigError(f"[data] meta_strategy must be meta or development, got {self.meta_strategy!r}")


@dataclass
class ModelConfig:
    arch: str = "mlp"  # mlp | lenet
    hidden: list = field(default_factory=lambda: [32])

    def __post_init__(self):
        if self.arch not in ("mlp", "lenet"):
            raise ConfigError(f"[model] arch must be mlp or lenet, got {self.arch!r}")


@dataclass
class ModulatorConfig:
    kind: str = "network"
    hidden_dim: int = 100
    variant: str = "paper_default"
    constraint: str = "full"
    sites: list = field(default_factory=list)  # empty -> the net's last site
    wh: bool = False
    wh_dim: int = 256
    wh_seed: int = 0


@dataclass
class EvalConfig:
    test_profile: str = "uniform"
    test_imbalance_factor: float = 10.0
    test_n_max: int = 0  # 0 -> largest count the test split supports
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    transfer_target_ifs: list = field(default_factory=lambda: [10.0, 100.0])
    transfer_source_if: float = 200.0
    transfer_rotation: float = 1.0


SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "modulator": ModulatorConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    modulator: ModulatorConfig = field(default_factory=ModulatorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(section, key, typ, text):
    try:
        if typ is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is list:
            val = json.loads(text)
            if not isinstance(val, list):
                raise ValueError(text)
            return val
        return text.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot read {text!r} as {typ.__name__}") from None


def _types(cls):
    return {f.name: f.type for f in fields(cls)}


def _fmt(value):
    if isinstance(value, (list, tuple)):
        return json.dumps([list(v) if isinstance(v, tuple) else v for v in value])
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(section, values):
    cls = SECTIONS[section]
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def parse_config(text, overrides=()):
    """Parse INI text; ``overrides`` are ``section.key=value`` strings that win over the file."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(text)
    raw = {s: dict(cp[s]) for s in cp.sections()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, val = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        raw.setdefault(sec, {})[key] = val
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    built = {}
    for sec, cls in SECTIONS.items():
        types = _types(cls)
        vals = {}
        for key, text in raw.get(sec, {}).items():
            if key not in types:
                raise ConfigError(f"[{sec}] unknown key {key!r}")
            vals[key] = _coerce(sec, key, types[key], text)
        built[sec] = _build(sec, vals)
    return ExperimentConfig(**built)


def load_config(path, overrides=()):
    with open(path) as f:
        return parse_config(f.read(), overrides)


def serialize_config(cfg):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def with_train(cfg, **changes):
    return replace(cfg, train=replace(cfg.train, **changes))
