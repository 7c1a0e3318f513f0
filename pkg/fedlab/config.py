"""
The `config.py` module holds the experiment configuration and its YAML
persistence

---------

A config file is one YAML document with ``schema: 1`` and the sections
``dataset``, ``model``, ``federation`` (with a nested ``training`` block),
``attack``, ``defense`` and ``analysis``. Every default is filled in on
load, so `ExperimentConfig.to_yaml` writes a self-describing echo that reads
back to an equal config.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

import yaml as _yaml

from fedlab.datasets import IID, PoisonSpec, corner_trigger
from fedlab.errors import ConfigError, InvalidInputError
from fedlab.nn.models import DTYPES, KINDS, Architecture
from fedlab.nn.training import TrainingConfig

__all__ = [
    "SCHEMA",
    "DEFENSES",
    "DatasetConfig",
    "ModelConfig",
    "FederationConfig",
    "AttackConfig",
    "DefenseConfig",
    "AnalysisConfig",
    "ExperimentConfig",
    "read_yaml",
    "parse_alpha",
]

SCHEMA = 1
DEFENSES = ("fedavg", "median", "multikrum", "drop", "droplet")
DATASET_KINDS = ("blobs", "idx")


def _number(value, name: str, integer: bool = False):
    if isinstance(value, bool):
        raise ConfigError("expected a number, got {!r}".format(value), field=name)
    if isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError("expected a number, got {!r}".format(value), field=name)
    if not isinstance(value, (int, float)):
        raise ConfigError("expected a number, got {!r}".format(value), field=name)
    if integer:
        if not math.isfinite(value) or float(value) != int(value):
            raise ConfigError("expected an integer, got {!r}".format(value), field=name)
        return int(value)
    return float(value)


def _check(condition: bool, message: str, name: str) -> None:
    if not condition:
        raise ConfigError(message, field=name)


def parse_alpha(value) -> float:
    """Dirichlet concentration from its config spelling; IID is infinity"""
    if value is None:
        return IID
    if isinstance(value, str) and value.strip().lower() in ("iid", "inf", ".inf"):
        return IID
    alpha = _number(value, "dataset.alpha")
    _check(alpha > 0, "alpha must be positive or inf", "dataset.alpha")
    return alpha


@dataclass(frozen=True)
class DatasetConfig:
    """Where client data comes from and how it is split

    ``kind: blobs`` synthesises Gaussian blobs; ``kind: idx`` reads an
    MNIST-family IDX pair (test files optional, a stratified split is used
    otherwise). ``clean_size`` samples are held back as the server's trusted
    seed set.
    """

    kind: str = "blobs"
    classes: int = 10
    dim: int = 64
    per_class: int = 300
    spread: float = 0.1
    image_shape: Optional[Tuple[int, ...]] = (8, 8)
    test_fraction: float = 0.2
    alpha: float = IID
    clean_size: int = 50
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "alpha", parse_alpha(self.alpha))
        if self.image_shape is not None:
            object.__setattr__(
                self, "image_shape", tuple(int(d) for d in self.image_shape)
            )
        _check(self.kind in DATASET_KINDS, "unknown dataset kind", "dataset.kind")
        _check(self.classes >= 2, "need at least 2 classes", "dataset.classes")
        _check(self.per_class >= 1, "must be positive", "dataset.per_class")
        _check(self.dim >= 1, "must be positive", "dataset.dim")
        _check(self.spread >= 0, "must be non-negative", "dataset.spread")
        _check(0 < self.test_fraction < 1, "must lie in (0, 1)", "dataset.test_fraction")
        _check(self.clean_size >= 0, "must be non-negative", "dataset.clean_size")
        if self.kind == "idx":
            for name in ("train_images", "train_labels"):
                _check(getattr(self, name) is not None, "required for idx", "dataset." + name)
        if self.kind == "blobs" and self.image_shape is not None:
            size = 1
            for d in self.image_shape:
                size *= d
            _check(size == self.dim, "does not hold dim features", "dataset.image_shape")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["alpha"] = "iid" if math.isinf(self.alpha) else self.alpha
        data["image_shape"] = None if self.image_shape is None else list(self.image_shape)
        return data


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "cnn"
    hidden: Tuple[int, ...] = (128,)
    conv_channels: Tuple[int, ...] = (8, 16)
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        _check(self.kind in KINDS, "must be one of {}".format(KINDS), "model.kind")
        _check(self.dtype in DTYPES, "must be float64 or float32", "model.dtype")
        _check(all(w >= 1 for w in self.hidden), "widths must be positive", "model.hidden")
        _check(len(self.conv_channels) == 2, "needs two stages", "model.conv_channels")

    def architecture(self, input_dim: int, classes: int, image_shape=None) -> Architecture:
        if image_shape is not None and len(image_shape) == 2:
            image_shape = (1,) + tuple(image_shape)
        return Architecture(
            kind=self.kind,
            input_dim=input_dim,
            classes=classes,
            hidden=self.hidden,
            image_shape=image_shape if self.kind == "cnn" else None,
            conv_channels=self.conv_channels,
            dtype=self.dtype,
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "dtype": self.dtype,
        }


@dataclass(frozen=True)
class FederationConfig:
    """N clients, C sampled per round, MCR rho, T rounds

    Parameters
    ----------
    clients : int
        N

    sampled : int, default None
        C; derived from `fraction` when omitted

    fraction : float, default 0.5

    mcr : float
        rho in [0, 1); round(rho * N) clients are malicious for the whole run

    rounds : int

    training : TrainingConfig

    seed : int

    update_scale : float, default 1.0
        malicious clients submit ``global + scale * (local - global)``

    workers : int, default 1
        threads training clients within a round

    """

    clients: int = 30
    sampled: Optional[int] = None
    fraction: float = 0.5
    mcr: float = 0.2
    rounds: int = 40
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    update_scale: float = 1.0
    workers: int = 1

    def __post_init__(self):
        _check(self.clients >= 1, "must be positive", "federation.clients")
        _check(0 < self.fraction <= 1, "must lie in (0, 1]", "federation.fraction")
        if self.sampled is not None:
            _check(self.sampled >= 1, "must be positive", "federation.sampled")
            _check(self.sampled <= self.clients, "exceeds clients", "federation.sampled")
        _check(0 <= self.mcr < 1, "must lie in [0, 1)", "federation.mcr")
        _check(self.rounds >= 0, "must be non-negative", "federation.rounds")
        _check(self.update_scale > 0, "must be positive", "federation.update_scale")
        _check(self.workers >= 1, "must be positive", "federation.workers")

    @property
    def per_round(self) -> int:
        """C"""
        if self.sampled is not None:
            return self.sampled
        return max(1, min(self.clients, int(round(self.fraction * self.clients))))

    @property
    def malicious_count(self) -> int:
        return int(round(self.mcr * self.clients))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["training"] = self.training.to_dict()
        return data


@dataclass(frozen=True)
class AttackConfig:
    """Backdoor carried by every malicious client

    ``trigger`` is ``"corner"`` (a square patch of `patch` pixels with
    `delta` added) or a list of ``[coordinate, delta]`` pairs.
    """

    enabled: bool = True
    victim: int = 0
    target: int = 1
    dpr: float = 0.05
    trigger: Any = "corner"
    patch: int = 3
    delta: float = 1.0

    def __post_init__(self):
        _check(self.victim != self.target, "victim and target must differ", "attack.target")
        _check(0 <= self.dpr <= 1, "must lie in [0, 1]", "attack.dpr")
        _check(self.patch >= 1, "must be positive", "attack.patch")
        if not isinstance(self.trigger, str):
            object.__setattr__(
                self, "trigger", tuple((int(i), float(d)) for i, d in self.trigger)
            )
        else:
            _check(self.trigger == "corner", "must be 'corner' or a list", "attack.trigger")

    def poison_spec(self, image_shape) -> PoisonSpec:
        if self.trigger == "corner":
            trigger = corner_trigger(image_shape, self.patch, self.delta)
        else:
            trigger = dict(self.trigger)
        return PoisonSpec(trigger, self.victim, self.target, self.dpr)

    def to_dict(self) -> dict:
        data = asdict(self)
        if not isinstance(self.trigger, str):
            data["trigger"] = [[i, d] for i, d in self.trigger]
        return data


@dataclass(frozen=True)
class DefenseConfig:
    """Aggregation rule and its parameters

    ``p``, ``r``, ``tau_b``, ``ban_enabled``, ``exclusion`` drive the
    activity monitor; ``K`` and ``query_budget`` schedule distillation;
    ``krum_f`` / ``krum_m`` default to round(rho * C) and n - f.
    """

    name: str = "fedavg"
    p: float = 1.0
    r: float = 1.0
    tau_b: float = 5.0
    ban_enabled: bool = False
    exclusion: str = "strict"
    K: int = 5
    query_budget: int = 50000
    distill_batch: int = 64
    generator_steps: int = 1
    clone_steps: int = 5
    clone_lr: float = 0.01
    generator_lr: float = 0.01
    latent_dim: int = 64
    generator_hidden: int = 128
    seed_steps: int = 200
    krum_f: Optional[int] = None
    krum_m: Optional[int] = None

    def __post_init__(self):
        _check(self.name in DEFENSES, "must be one of {}".format(DEFENSES), "defense.name")
        _check(self.p > 0, "must be positive", "defense.p")
        _check(self.r > 0, "must be positive", "defense.r")
        _check(self.tau_b > 0, "must be positive", "defense.tau_b")
        _check(self.exclusion in ("strict", "threshold"), "must be strict or threshold", "defense.exclusion")
        _check(self.K >= 1, "must be positive", "defense.K")
        _check(self.query_budget >= 0, "must be non-negative", "defense.query_budget")
        _check(self.distill_batch >= 1, "must be positive", "defense.distill_batch")
        _check(self.clone_lr > 0, "must be positive", "defense.clone_lr")
        _check(self.generator_lr > 0, "must be positive", "defense.generator_lr")
        if self.krum_f is not None:
            _check(self.krum_f >= 0, "must be non-negative", "defense.krum_f")
        if self.krum_m is not None:
            _check(self.krum_m >= 1, "must be positive", "defense.krum_m")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AnalysisConfig:
    """Consistency thresholds (lambda, tau) and the learning-configuration grid"""

    lam: float = 0.8
    tau: float = 0.85
    grid_lr: Tuple[float, ...] = (0.01, 0.5)
    grid_batch_size: Tuple[int, ...] = (8, 64)
    grid_epochs: Tuple[int, ...] = (1,)

    def __post_init__(self):
        object.__setattr__(self, "grid_lr", tuple(float(v) for v in self.grid_lr))
        object.__setattr__(self, "grid_batch_size", tuple(int(v) for v in self.grid_batch_size))
        object.__setattr__(self, "grid_epochs", tuple(int(v) for v in self.grid_epochs))
        _check(0 <= self.lam, "must be non-negative", "analysis.lambda")
        _check(0 <= self.tau, "must be non-negative", "analysis.tau")
        _check(
            bool(self.grid_lr and self.grid_batch_size and self.grid_epochs),
            "grid axes must be non-empty",
            "analysis.grid",
        )

    def grid(self) -> List[TrainingConfig]:
        """Cells in lr-major order"""
        return [
            TrainingConfig(lr=lr, batch_size=bs, epochs=ep)
            for lr in self.grid_lr
            for bs in self.grid_batch_size
            for ep in self.grid_epochs
        ]

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "tau": self.tau,
            "grid": {
                "lr": list(self.grid_lr),
                "batch_size": list(self.grid_batch_size),
                "epochs": list(self.grid_epochs),
            },
        }


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.attack.enabled:
            classes = self.dataset.classes
            _check(0 <= self.attack.victim < classes, "not a class index", "attack.victim")
            _check(0 <= self.attack.target < classes, "not a class index", "attack.target")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(
            self, seed=int(seed), federation=replace(self.federation, seed=int(seed))
        )

    def with_training(self, training: TrainingConfig) -> "ExperimentConfig":
        return replace(self, federation=replace(self.federation, training=training))

    def with_defense(self, name: str) -> "ExperimentConfig":
        return replace(self, defense=replace(self.defense, name=name))

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "name": self.name,
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "federation": self.federation.to_dict(),
            "attack": self.attack.to_dict(),
            "defense": self.defense.to_dict(),
            "analysis": self.analysis.to_dict(),
        }

    def comparison_key(self) -> dict:
        """Everything except the defense block and the run name"""
        data = self.to_dict()
        del data["defense"], data["name"]
        return data

    def to_yaml(self, filename: str) -> None:
        """ Write this config to a yaml file """
        if type(filename) is str:
            with open(filename, "w") as f:
                f.write(_yaml.safe_dump(self.to_dict(), sort_keys=False))
        else:
            raise TypeError

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        return _build(data)


# numeric fields per section, True where an integer is required
_NUMERIC = {
    "dataset": {
        "classes": True, "dim": True, "per_class": True, "spread": False,
        "test_fraction": False, "clean_size": True,
    },
    "model": {},
    "federation": {
        "clients": True, "sampled": True, "fraction": False, "mcr": False,
        "rounds": True, "update_scale": False, "workers": True,
    },
    "training": {"lr": False, "batch_size": True, "epochs": True},
    "attack": {"victim": True, "target": True, "dpr": False, "patch": True, "delta": False},
    "defense": {
        "p": False, "r": False, "tau_b": False, "K": True, "query_budget": True,
        "distill_batch": True, "generator_steps": True, "clone_steps": True,
        "clone_lr": False, "generator_lr": False, "latent_dim": True,
        "generator_hidden": True, "seed_steps": True, "krum_f": True, "krum_m": True,
    },
}

_SECTIONS = {
    "dataset": DatasetConfig,
    "model": ModelConfig,
    "attack": AttackConfig,
    "defense": DefenseConfig,
}


def _known(cls) -> set:
    return set(cls.__dataclass_fields__)


def _coerce(section: str, raw: Mapping, allowed: set, prefix: str) -> Dict[str, Any]:
    if not isinstance(raw, Mapping):
        raise ConfigError("expected a mapping", field=prefix)
    out = {}
    for key, value in raw.items():
        name = "{}.{}".format(prefix, key)
        if key not in allowed:
            raise ConfigError("unknown field", field=name)
        if value is not None and key in _NUMERIC.get(section, {}):
            value = _number(value, name, integer=_NUMERIC[section][key])
        out[key] = value
    return out


def _build(data: Mapping) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a mapping")
    known = {"schema", "name", "seed", "federation", "analysis"} | set(_SECTIONS)
    for key in data:
        if key not in known:
            raise ConfigError("unknown section", field=str(key))
    if data.get("schema") != SCHEMA:
        raise ConfigError("expected schema {}".format(SCHEMA), field="schema")
    seed = _number(data.get("seed", 0), "seed", integer=True)

    parts = {}
    for key, cls in _SECTIONS.items():
        parts[key] = cls(**_coerce(key, data.get(key) or {}, _known(cls), key))

    fed = dict(data.get("federation") or {})
    training = _coerce("training", fed.pop("training", None) or {}, {"lr", "batch_size", "epochs"}, "federation.training")
    fed.pop("seed", None)
    fed = _coerce("federation", fed, _known(FederationConfig) - {"training", "seed"}, "federation")
    try:
        training = TrainingConfig(**training)
    except (InvalidInputError, TypeError) as exc:
        raise ConfigError(str(exc) or "invalid training block", field="federation.training")
    federation = FederationConfig(training=training, seed=seed, **fed)

    analysis = dict(data.get("analysis") or {})
    grid = analysis.pop("grid", None) or {}
    unknown = set(analysis) - {"lambda", "tau"}
    if unknown:
        raise ConfigError("unknown field", field="analysis." + sorted(unknown)[0])
    unknown = set(grid) - {"lr", "batch_size", "epochs"}
    if unknown:
        raise ConfigError("unknown field", field="analysis.grid." + sorted(unknown)[0])
    kwargs = {}
    if "lambda" in analysis:
        kwargs["lam"] = _number(analysis["lambda"], "analysis.lambda")
    if "tau" in analysis:
        kwargs["tau"] = _number(analysis["tau"], "analysis.tau")
    for key in ("lr", "batch_size", "epochs"):
        if key in grid:
            kwargs["grid_" + key] = [
                _number(v, "analysis.grid." + key, integer=key != "lr") for v in grid[key]
            ]
    return ExperimentConfig(
        name=str(data.get("name", "experiment")),
        seed=seed,
        federation=federation,
        analysis=AnalysisConfig(**kwargs),
        **parts,
    )


def _marks(node, prefix: str = "", out: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    """Dotted field path -> 1-based line, from a composed YAML node tree"""
    if out is None:
        out = {}
    if isinstance(node, _yaml.MappingNode):
        for key, value in node.value:
            path = "{}.{}".format(prefix, key.value) if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _marks(value, path, out)
    return out


def _line(marks: Mapping[str, int], name: Optional[str]) -> Optional[int]:
    while name:
        if name in marks:
            return marks[name]
        name = name.rpartition(".")[0]
    return None


def read_yaml(filename: str, seed: Optional[int] = None) -> ExperimentConfig:
    """ Load an experiment config from a yaml file

    `seed` overrides the file's seed before validation. Validation failures
    raise ConfigError anchored at the offending line.
    """
    if type(filename) is not str:
        raise TypeError
    with open(filename, "r") as f:
        text = f.read()
    try:
        data = _yaml.safe_load(text)
        marks = _marks(_yaml.compose(text))
    except _yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(
            "not valid YAML: {}".format(getattr(exc, "problem", exc)),
            line=None if mark is None else mark.line + 1,
            source=filename,
        )
    if isinstance(data, dict) and seed is not None:
        data["seed"] = seed
    try:
        return _build(data)
    except ConfigError as exc:
        raise ConfigError(
            exc.message, field=exc.field, line=_line(marks, exc.field), source=filename
        )
