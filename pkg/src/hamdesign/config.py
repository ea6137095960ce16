"""Declarative experiment configuration (YAML), with strict key checking."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .optimizer import CgdConfig

SCHEMA_VERSION = 1
REFERENCE_SOURCES = ("planted", "named", "file")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    name: str = "pauli_strings_k_local"
    params: dict = field(default_factory=dict)
    boundary: str = "periodic"
    sector: float | None = None
    parametrization: dict | None = None  # {kind, n_params, table, box}


@dataclass
class SizesConfig:
    train: list = field(default_factory=lambda: [8])
    test: list = field(default_factory=list)


@dataclass
class ReferenceConfig:
    source: str = "planted"
    support: list = field(default_factory=list)
    model: ModelConfig | None = None  # planting family; default: the trained model
    name: str | None = None
    files: dict = field(default_factory=dict)  # size -> amplitude file
    low: float = 0.5
    high: float = 1.5
    min_gap: float = 1e-3
    max_attempts: int = 20


@dataclass
class TermConfig:
    kind: str
    weight: float = 1.0
    label: str | None = None
    sizes: list | None = None  # default: every training size
    target: float | None = None
    observable: str | None = None
    gamma_ref: list | None = None
    symmetry: str | None = None
    box: list | None = None
    raw: bool = False


def default_terms() -> list:
    return [TermConfig("overlap", 1.0), TermConfig("kl", 0.2), TermConfig("energy_variance", 1.0),
            TermConfig("regularization_l1", 1e-3)]


@dataclass
class LossConfig:
    terms: list = field(default_factory=default_terms)
    size_weights: str = "hilbert"
    importance: dict = field(default_factory=dict)
    gauge: dict = field(default_factory=lambda: {"kind": "none"})


@dataclass
class OptimizerConfig:
    beta_scheme: str = "hestenes_stiefel"
    restart_period: int | None = None
    fd_step: float = 1e-5
    bracket_growth: float = 2.0
    initial_step: float = 1e-3
    line_rtol: float = 1e-6
    line_max_evals: int = 100
    max_iters: int = 200
    grad_tol: float = 1e-8
    loss_rtol: float = 1e-10
    n_starts: int = 1
    temperature: float = 0.1
    escape_patience: int = 10
    max_escapes: int = 0
    max_evals: int | None = None
    max_seconds: float | None = None
    start_box: list = field(default_factory=lambda: [0.0, 1.0])
    start: list | None = None  # explicit start, reduced coordinates
    # convex warm-up: minimize only these term kinds before the full loss
    warmup_terms: list = field(default_factory=lambda: ["energy_variance"])
    warmup_iters: int = 200

    def cgd(self, seed: int) -> CgdConfig:
        names = {f.name for f in dataclasses.fields(CgdConfig)}
        kwargs = {k: v for k, v in dataclasses.asdict(self).items() if k in names}
        kwargs["seed"] = seed
        try:
            return CgdConfig(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"optimizer: {exc}") from exc


@dataclass
class ScanConfig:
    shape: list = field(default_factory=lambda: [10, 11])
    start: list | None = None
    steepest_iters: int = 24


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    sizes: SizesConfig = field(default_factory=SizesConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scan: ScanConfig | None = None
    flag_overlap: float = 0.999  # test overlaps below this are flagged
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.validate()

    def validate(self):
        train, test = list(self.sizes.train), list(self.sizes.test)
        if not train:
            raise ConfigError("sizes.train must list at least one size")
        for n in train + test:
            if not isinstance(n, int) or isinstance(n, bool) or n < 1:
                raise ConfigError(f"system sizes must be positive integers, got {n!r}")
        if len(set(train)) != len(train) or len(set(test)) != len(test):
            raise ConfigError("duplicate system sizes")
        if set(train) & set(test):
            raise ConfigError(f"test sizes {sorted(set(train) & set(test))} also appear in training")
        if self.reference.source not in REFERENCE_SOURCES:
            raise ConfigError(f"reference.source must be one of {REFERENCE_SOURCES}")
        if self.reference.source == "planted" and not self.reference.support:
            raise ConfigError("planted reference needs a non-empty support")
        if self.reference.source == "named" and not self.reference.name:
            raise ConfigError("named reference needs reference.name")
        if self.reference.source == "file":
            missing = [n for n in train + test if n not in self.reference.files]
            if missing:
                raise ConfigError(f"no amplitude file for sizes {missing}")
        if not self.loss.terms:
            raise ConfigError("loss.terms is empty")
        for t in self.loss.terms:
            for n in t.sizes or []:
                if n not in train:
                    raise ConfigError(f"term {t.kind} lists size {n} outside the training sizes")
        for n in self.loss.importance:
            if n not in train:
                raise ConfigError(f"importance given for size {n} outside the training sizes")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} is not supported "
                              f"(expected {SCHEMA_VERSION})")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config")

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping at top level")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text)


_NESTED = {
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "sizes"): SizesConfig,
    (ExperimentConfig, "reference"): ReferenceConfig,
    (ExperimentConfig, "loss"): LossConfig,
    (ExperimentConfig, "optimizer"): OptimizerConfig,
    (ExperimentConfig, "scan"): ScanConfig,
    (ReferenceConfig, "model"): ModelConfig,
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{path}.{key}")
        elif cls is LossConfig and key == "terms":
            if not isinstance(value, list):
                raise ConfigError(f"{path}.terms must be a list")
            value = [_build(TermConfig, t, f"{path}.terms[{i}]") for i, t in enumerate(value)]
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
