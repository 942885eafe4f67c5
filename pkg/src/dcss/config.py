"""Flat, typed experiment configuration.

The file is a flat TOML document (no tables). Every key must be a field of
:class:`ExperimentConfig`; unknown keys and type mismatches are errors. The
key ``lambda`` maps to the ``lam`` field.
"""

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .models import ModelSpec
from .search import SearchConfig


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # search / training
    lam: float = 1.0
    warmup_epochs: int = 4
    search_epochs: int = 4
    finetune_epochs: int = 8
    batch_size: int = 32
    lr: float = 0.1
    warmup_decay_epochs: list = field(default_factory=list)
    search_decay_epochs: list = field(default_factory=list)
    finetune_decay_epochs: list = field(default_factory=lambda: [6])
    search_lr_ratio: float = 0.1
    gate_lr_ratio: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    val_fraction: float = 0.1
    seed: int = 0
    n_groups: int = 8
    tau_start: float = 10.0
    tau_end: float = 0.1
    weight_steps_per_gate_step: int = 1
    warmup_noise: bool = True
    cost_uses_sampled_probs: bool = True
    scale_before_bn: bool = False
    finetune_mode: str = "inherit"
    check_invariants: bool = True
    # model
    architecture: str = "plain_cnn6"
    base_channels: int = 8
    blocks_per_stage: int = 1
    dtype: str = "float32"
    conv_impl: str = "im2col"
    # data
    task: str = "classify"
    data_path: str = ""
    test_data_path: str = ""
    test_fraction: float = 0.2
    num_classes: int = 10
    image_size: int = 12
    in_channels: int = 3
    synthetic_train: int = 1000
    synthetic_test: int = 1000
    synthetic_noise: float = 0.5
    # outputs
    out_dir: str = "runs/default"
    report_format: str = "json"
    train_baseline: bool = True

    def validate(self):
        self.search_config().validate()
        if self.report_format not in ("json", "csv"):
            raise ConfigError(f"report_format must be json or csv, got {self.report_format!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.conv_impl not in ("im2col", "direct"):
            raise ConfigError(f"conv_impl must be im2col or direct, got {self.conv_impl!r}")
        if self.task not in ("classify", "regress"):
            raise ConfigError(f"task must be classify or regress, got {self.task!r}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must be in (0, 1)")
        return self

    def search_config(self):
        names = {f.name for f in fields(SearchConfig)}
        return SearchConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def model_spec(self):
        return ModelSpec(
            arch=self.architecture, base_channels=self.base_channels, in_channels=self.in_channels,
            image_size=self.image_size, task=self.task, num_classes=self.num_classes,
            blocks_per_stage=self.blocks_per_stage, n_groups=self.n_groups, gated=True,
            scale_before_bn=self.scale_before_bn, dtype=self.dtype,
        )

    def echo(self):
        """Config as a plain dict, without the output location."""
        d = asdict(self)
        d.pop("out_dir")
        d["lambda"] = d.pop("lam")
        return dict(sorted(d.items()))

    def hash(self):
        """Short digest of every setting that can change results (not output location or format)."""
        d = self.echo()
        d.pop("report_format")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name, value):
    default = getattr(ExperimentConfig(), name)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name}: expected a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def from_mapping(mapping):
    kwargs = {}
    for key, value in mapping.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat; {key!r} is a table")
        name = "lam" if key == "lambda" else key
        if name not in _FIELD_TYPES or key == "lam":
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[name] = _coerce(name, value)
    return ExperimentConfig(**kwargs).validate()


def parse_config(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config parse error: {e}") from e
    return from_mapping(raw)


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def dump_config(cfg):
    """Flat TOML text for ``cfg`` (round-trips through parse_config)."""
    lines = []
    for key, value in cfg.echo().items():
        lines.append(f"{key} = {_toml_value(value)}")
    lines.append(f"out_dir = {_toml_value(cfg.out_dir)}")
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(repr(x) for x in v) + "]"
    return json.dumps(v)
