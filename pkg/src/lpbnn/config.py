"""Experiment configuration and the flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment; list values are
comma-separated. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

MODEL_KINDS = ("deterministic", "meanfield", "batchensemble", "lpbnn", "deepensemble")
DATASET_KINDS = ("blobs", "rings", "file")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "blobs"
    n_train: int = 1024
    n_test: int = 1000
    n_classes: int = 3
    input_dim: int = 2
    class_std: float = 1.0
    center_spread: float = 2.5
    ood_shift: float = 10.0
    corruption_severities: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    corruption_noise: list[float] = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0, 1.5])
    path: str = ""

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "file":
            if not self.path:
                raise ConfigError("dataset kind 'file' needs data_path")
            return
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        if self.input_dim < 1 or (self.kind == "rings" and self.input_dim < 2):
            raise ConfigError("input_dim too small for this dataset kind")
        if len(self.corruption_severities) != len(self.corruption_noise):
            raise ConfigError("corruption_severities and corruption_noise must have equal length")
        if any(s < 1 for s in self.corruption_severities):
            raise ConfigError("corruption severities must be >= 1")
        pairs = sorted(zip(self.corruption_severities, self.corruption_noise))
        for (s0, n0), (s1, n1) in zip(pairs, pairs[1:]):
            if s0 == s1 or n1 <= n0:
                raise ConfigError("noise std must strictly increase with severity")
        if any(n < 0 for n in self.corruption_noise):
            raise ConfigError("corruption noise std must be non-negative")


@dataclass
class ExperimentConfig:
    model_kind: str = "lpbnn"
    J: int = 4
    latent_dim: int = 32
    layer_widths: list[int] = field(default_factory=lambda: [64, 64])
    learning_rate: float = 0.1
    lr_decay_epochs: list[int] = field(default_factory=lambda: [20, 25])
    lr_decay_ratio: float = 0.1
    epochs: int = 30
    batch_size: int = 128
    weight_decay_slow: float = 1e-4
    weight_decay_fast: float = 0.0
    weight_decay_variational: float = 1e-4
    prior_sigma: float = 1.0
    init_log_var: float = -4.0
    freeze_fast: bool = False
    seed: int = 0
    eval_seed: int = 1
    extra_samples: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    @property
    def ensemble_size(self) -> int:
        return 1 if self.model_kind == "deterministic" else self.J

    def validate(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.J < 1:
            raise ConfigError("J must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs non-negative")
        if self.model_kind in ("batchensemble", "lpbnn") and self.batch_size % self.J:
            raise ConfigError(f"batch_size {self.batch_size} must be a multiple of J={self.J}")
        if self.learning_rate < 0 or self.lr_decay_ratio < 0:
            raise ConfigError("learning rate and decay ratio must be non-negative")
        if min(self.weight_decay_slow, self.weight_decay_fast, self.weight_decay_variational) < 0:
            raise ConfigError("weight decay coefficients must be non-negative")
        if self.latent_dim < 1 or any(w < 1 for w in self.layer_widths):
            raise ConfigError("latent_dim and layer widths must be positive")
        if self.extra_samples < 0:
            raise ConfigError("extra_samples must be non-negative")
        self.dataset.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> ExperimentConfig:
        ds_changes = {k: changes.pop(k) for k in list(changes) if k in _DATASET_KEYS.values()}
        cfg = dataclasses.replace(self, **changes)
        if ds_changes:
            cfg.dataset = dataclasses.replace(self.dataset, **ds_changes)
        return cfg


# file key -> DatasetSpec field
_DATASET_KEYS = {
    "dataset": "kind",
    "n_train": "n_train",
    "n_test": "n_test",
    "n_classes": "n_classes",
    "input_dim": "input_dim",
    "class_std": "class_std",
    "center_spread": "center_spread",
    "ood_shift": "ood_shift",
    "corruption_severities": "corruption_severities",
    "corruption_noise": "corruption_noise",
    "data_path": "path",
}


def _convert(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin is list:
        (inner,) = typing.get_args(tp)
        return [_convert(p.strip(), inner) for p in raw.split(",") if p.strip()]
    if tp is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def _field_types(cls) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_pairs(text: str, source: str = "<string>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def config_from_pairs(pairs: dict[str, str], source: str = "<string>") -> ExperimentConfig:
    exp_types = _field_types(ExperimentConfig)
    ds_types = _field_types(DatasetSpec)
    exp_kw, ds_kw = {}, {}
    for key, raw in pairs.items():
        try:
            if key in _DATASET_KEYS:
                name = _DATASET_KEYS[key]
                ds_kw[name] = _convert(raw, ds_types[name])
            elif key in exp_types and key != "dataset":
                exp_kw[key] = _convert(raw, exp_types[key])
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")
        except ValueError as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"{source}: bad value for {key!r}: {err}") from None
    cfg = ExperimentConfig(**exp_kw, dataset=DatasetSpec(**ds_kw))
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return config_from_pairs(parse_pairs(path.read_text(), str(path)), str(path))


def load_dataset_spec(path) -> tuple[DatasetSpec, int]:
    """Dataset keys plus an optional ``seed`` from a spec file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"dataset spec not found: {path}")
    pairs = parse_pairs(path.read_text(), str(path))
    seed = int(pairs.pop("seed", "0"))
    unknown = set(pairs) - set(_DATASET_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown dataset keys {sorted(unknown)}")
    cfg = config_from_pairs(pairs, str(path))
    return cfg.dataset, seed


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    d = cfg.to_dict()
    ds = d.pop("dataset")
    for key, value in d.items():
        lines.append(f"{key} = {_fmt(value)}")
    for key, name in _DATASET_KEYS.items():
        lines.append(f"{key} = {_fmt(ds[name])}")
    return "\n".join(lines) + "\n"


def _fmt(value) -> str:
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
