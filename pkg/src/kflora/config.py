"""Experiment configuration: INI files with typed sections.

A config fully determines a run: model stack and parameterization, optimizer
settings, stream source and all three seeds (model init, variance init,
shuffle). `to_text` serializes the resolved config deterministically, which
is what gets hashed into the run manifest; a manifest is itself a loadable
config, so replaying one reproduces the run byte-for-byte.

Environment overrides exist for paths only: KFLORA_TRAIN_IMAGES,
KFLORA_TRAIN_LABELS, KFLORA_TEST_IMAGES, KFLORA_TEST_LABELS, KFLORA_OUT_DIR.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import asdict, dataclass, field, replace

SCHEMA_VERSION = 1

PRESETS = {
    "lenet5": ((1, 28, 28),
               "conv:6:5:2 tanh pool:2 conv:16:5:0 tanh pool:2 flatten "
               "dense:120 tanh dense:84 tanh dense:10 softmax"),
    "small_cnn": ((1, 28, 28),
                  "conv:8:5:2 relu pool:2 conv:16:5:0 relu pool:2 flatten "
                  "dense:64 relu dense:10 softmax"),
    "pool_mlp": ((1, 28, 28), "pool:4 flatten dense:8 tanh dense:10 softmax"),
}

_PATH_ENV = {
    ("stream", "images"): "KFLORA_TRAIN_IMAGES",
    ("stream", "labels"): "KFLORA_TRAIN_LABELS",
    ("stream", "test_images"): "KFLORA_TEST_IMAGES",
    ("stream", "test_labels"): "KFLORA_TEST_LABELS",
    ("run", "out_dir"): "KFLORA_OUT_DIR",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "lenet5"
    layers: str = ""                 # explicit stack; overrides the preset
    input_shape: tuple = (1, 28, 28)
    weight_init: str = "xavier_uniform"
    parameterization: str = "full"   # full | frozen | lora
    lora_targets: tuple = ("conv",)
    lora_rank: int = 4
    lora_sigma: float = 0.01
    full_targets: tuple = ()         # layers trained fully alongside adapters
    init_weights: str = ""           # weight-file path, blank = fresh init
    save_weights: bool = False

    def layer_text(self) -> str:
        if self.layers:
            return self.layers
        if self.arch not in PRESETS:
            raise ConfigError(f"unknown arch {self.arch!r} and no explicit layers")
        return PRESETS[self.arch][1]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "kalman"             # kalman | adamw | adagrad | dense_ekf
    beta: float = 0.95
    r_method: str = "ema_residual_plus_hph"
    p0_method: str = "uniform"
    p0_value: float = 0.2
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class StreamSpec:
    source: str = "mnist_idx"        # mnist_idx | synthetic_linear | synthetic_logistic
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    epochs: int = 1
    max_samples: int = 0             # 0 = whole file
    class_filter: tuple = ()
    n_features: int = 8              # synthetic sources only
    n_outputs: int = 10
    noise_std: float = 0.0
    count: int = 1000


@dataclass(frozen=True)
class RunSpec:
    seed: int = 0
    model_seed: int = -1             # -1 = derive from seed
    p0_seed: int = -1
    shuffle_seed: int = -1
    out_dir: str = "runs/exp"
    max_steps: int = 0               # 0 = full stream
    snapshot_every: int = 0          # dense-ekf covariance snapshot cadence
    figures: bool = True


@dataclass(frozen=True)
class SweepSpec:
    beta_values: tuple = (0.5, 0.9, 0.95, 0.98, 0.999)
    grid_min: float = 1e-4
    grid_max: float = 10.0
    points_per_decade: int = 3
    init_schemes: tuple = ("xavier_uniform", "xavier_normal",
                           "kaiming_uniform", "kaiming_normal")
    p0_methods: tuple = ("constant", "uniform")
    probe_steps: int = 1000


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    stream: StreamSpec = field(default_factory=StreamSpec)
    run: RunSpec = field(default_factory=RunSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)


def resolve_seeds(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill derived seeds so the manifest lists every seed explicitly."""
    run = cfg.run
    if run.model_seed < 0:
        run = replace(run, model_seed=run.seed)
    if run.p0_seed < 0:
        run = replace(run, p0_seed=run.seed + 10000)
    if run.shuffle_seed < 0:
        run = replace(run, shuffle_seed=run.seed + 20000)
    return replace(cfg, run=run)


_TUPLE_ELEMENT_TYPES = {
    "lora_targets": str, "full_targets": str, "init_schemes": str,
    "p0_methods": str, "beta_values": float, "class_filter": int,
    "input_shape": int,
}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean for {key}, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        if not raw:
            return ()
        cast = _TUPLE_ELEMENT_TYPES[key]
        return tuple(cast(item.strip()) for item in raw.split(","))
    return raw


def _fill(section_name, cls, parser):
    spec = cls()
    if not parser.has_section(section_name):
        return spec
    values = {}
    for key in parser.options(section_name):
        if not hasattr(spec, key):
            raise ConfigError(f"unknown key [{section_name}] {key}")
        default = getattr(spec, key)
        values[key] = _parse_value(key, parser.get(section_name, key), default)
    return replace(spec, **values)


def load_config(path) -> ExperimentConfig:
    """Parse an INI config (or a run manifest, which is a superset)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config {path}")
    if parser.has_section("meta"):
        version = parser.getint("meta", "schema_version", fallback=SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version} unsupported (expected {SCHEMA_VERSION})")
    cfg = ExperimentConfig(
        model=_fill("model", ModelSpec, parser),
        optimizer=_fill("optimizer", OptimizerSpec, parser),
        stream=_fill("stream", StreamSpec, parser),
        run=_fill("run", RunSpec, parser),
        sweep=_fill("sweep", SweepSpec, parser),
    )
    cfg = _apply_env_overrides(cfg)
    return resolve_seeds(cfg)


def _apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    updates: dict[str, dict] = {}
    for (section, key), env in _PATH_ENV.items():
        value = os.environ.get(env)
        if value:
            updates.setdefault(section, {})[key] = value
    if not updates:
        return cfg
    parts = {name: getattr(cfg, name) for name in ("model", "optimizer", "stream", "run", "sweep")}
    for section, kv in updates.items():
        parts[section] = replace(parts[section], **kv)
    return ExperimentConfig(**parts)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_text(cfg: ExperimentConfig) -> str:
    """Deterministic INI serialization of a resolved config."""
    lines = [f"[meta]\nschema_version = {SCHEMA_VERSION}\n"]
    for section in ("model", "optimizer", "stream", "run", "sweep"):
        lines.append(f"[{section}]")
        for key, value in asdict(getattr(cfg, section)).items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode()).hexdigest()[:16]


def write_manifest(cfg: ExperimentConfig, path, extra: dict) -> None:
    """Resolved config plus a [manifest] section (hash, timing, versions)."""
    with open(path, "w") as fh:
        fh.write(to_text(cfg))
        fh.write("[manifest]\n")
        fh.write(f"config_hash = {config_hash(cfg)}\n")
        for key, value in extra.items():
            fh.write(f"{key} = {value}\n")
