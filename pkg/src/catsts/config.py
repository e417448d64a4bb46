"""Run configuration: YAML loading, defaults, ablation presets, data preparation."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import yaml

from .data import fit_standardizer, gen_multi, gen_multix, gen_shifting_toy, load_csv, split
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

GENERATORS = ("multi", "multix", "shifting-toy")

# Each preset names the model flags it changes; nothing else differs from the base config.
ABLATIONS = {
    "no-continuity": {"beta_cont": 0.0},
    "no-channel-sparsity": {"channel_sparsity": False},
    "no-temporal-sparsity": {"temporal_sparsity": False},
    "no-sparsity": {"channel_sparsity": False, "temporal_sparsity": False},
    "pure-linear": {"bank": "pure-linear"},
    "pure-conv": {"bank": "pure-conv"},
    "no-shortcut": {"shortcut": False},
}


@dataclass
class DatasetConfig:
    source: str = "generator"  # "generator" or "csv"
    generator: str = "multi"
    args: dict = field(default_factory=dict)
    path: str | None = None
    date_column: str = "date"
    name: str | None = None
    seed: int | None = None  # generator seed; defaults to the run seed

    def validate(self):
        if self.source not in ("generator", "csv"):
            raise ConfigError(f"dataset.source must be 'generator' or 'csv', got {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ConfigError("dataset.path is required when dataset.source is 'csv'")
        if self.source == "generator" and self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")

    @property
    def label(self):
        if self.name:
            return self.name
        if self.source == "csv":
            return str(self.path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
        if self.generator == "multix":
            return f"multix{self.args.get('X', 20)}"
        return self.generator


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)  # TrainConfig overrides except L_P and beta_cont
    horizons: list = field(default_factory=lambda: [96])
    eval_stride: int = 1
    output: str = "runs/latest"
    seed: int = 0

    def validate(self):
        self.dataset.validate()
        self.model.validate()
        if not self.horizons or any(int(h) < 1 for h in self.horizons):
            raise ConfigError(f"horizons must be a non-empty list of positive integers, got {self.horizons}")
        if self.eval_stride < 1:
            raise ConfigError(f"eval_stride must be positive, got {self.eval_stride}")
        for L_P in self.horizons:
            self.train_config(L_P).validate()
        return self

    def train_config(self, L_P):
        over = dict(self.train)
        for key in ("L_P", "beta_cont", "seed"):
            if key in over:
                raise ConfigError(f"train.{key} is derived; set it through the run config instead")
        return TrainConfig.from_dict({**over, "L_P": int(L_P), "beta_cont": self.model.beta_cont, "seed": self.seed})

    @property
    def L_I(self):
        return int(self.train.get("L_I", TrainConfig.L_I))

    def to_dict(self):
        return {
            "dataset": asdict(self.dataset),
            "model": self.model.to_dict(),
            "train": dict(self.train),
            "horizons": [int(h) for h in self.horizons],
            "eval_stride": self.eval_stride,
            "output": self.output,
            "seed": self.seed,
        }

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys {sorted(unknown)}")
    return cls(**d)


def config_from_dict(d):
    d = dict(d or {})
    known = {f.name for f in fields(RunConfig)} | {"L_P"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    dataset = d.get("dataset")
    if isinstance(dataset, str):
        dataset = {"source": "csv", "path": dataset} if dataset.endswith(".csv") else {"generator": dataset}
    horizons = d.get("horizons", d.get("L_P", [96]))
    if isinstance(horizons, int):
        horizons = [horizons]
    train = d.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train must be a mapping")
    cfg = RunConfig(
        dataset=_section(DatasetConfig, dataset, "dataset"),
        model=_section(ModelConfig, d.get("model"), "model"),
        train=dict(train),
        horizons=[int(h) for h in horizons],
        eval_stride=int(d.get("eval_stride", 1)),
        output=str(d.get("output", "runs/latest")),
        seed=int(d.get("seed", 0)),
    )
    return cfg.validate()


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def apply_ablation(cfg, name):
    """Copy of ``cfg`` with one ablation preset applied to the model section."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    out = copy.deepcopy(cfg)
    for key, value in ABLATIONS[name].items():
        setattr(out.model, key, value)
    return out.validate()


# ---------------------------------------------------------------------------
# data preparation
# ---------------------------------------------------------------------------


def load_dataset(ds, seed):
    """Raw (unsplit, unscaled) frame for a dataset section."""
    if ds.source == "csv":
        return load_csv(ds.path, date_column=ds.date_column)
    gseed = seed if ds.seed is None else ds.seed
    args = dict(ds.args)
    try:
        if ds.generator == "multi":
            return gen_multi(args.pop("T", 15000), gseed, **args)
        if ds.generator == "multix":
            return gen_multix(args.pop("X", 20), args.pop("T", 15000), gseed, **args)
        return gen_shifting_toy(args.pop("T", 4000), gseed, **args)
    except TypeError as exc:
        raise ConfigError(f"dataset.args: {exc}") from None


def prepare(cfg):
    """Split and standardize the configured dataset; returns (frame, standardizer)."""
    raw = load_dataset(cfg.dataset, cfg.seed)
    framed = split(raw, L_I=cfg.L_I, L_P=max(cfg.horizons))
    scaler = fit_standardizer(framed)
    return scaler.transform(framed), scaler


def frame_digest(frame):
    """sha256 over the raw float64 bytes of the values."""
    return hashlib.sha256(np.ascontiguousarray(frame.values, dtype="<f8").tobytes()).hexdigest()
