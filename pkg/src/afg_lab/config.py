"""Declarative pipeline configuration (TOML).

Every section is optional; omitted keys take the defaults below. Unknown
keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import tomli

from .errors import ConfigurationError

OUTPUT_ENV = "AFG_LAB_OUTPUT"


@dataclass
class DatasetSection:
    source: str = "data"
    synthetic: bool = True  # generate the procedural set into ``source`` if it is missing
    per_class: int = 400
    synthetic_seed: int = 0
    train_fraction: float = 0.75
    seed: int = 0
    classes: int = 0  # 0 keeps every class
    image_shape: list = field(default_factory=lambda: [32, 32, 3])


@dataclass
class ModelSection:
    widths: list = field(default_factory=lambda: [16, 32, 32, 64])
    hidden: int = 64
    seed: int = 0
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 32
    weight_decay: float = 0.0


@dataclass
class AttackSection:
    name: str = "FGSM"
    epsilon: float = 0.005
    iterations: int = 1
    step_size: float | None = None
    overshoot: float = 0.02


def _default_attacks():
    return [AttackSection("FGSM", 0.005, 1), AttackSection("BIM", 0.005, 100),
            AttackSection("DEEPFOOL", 0.0, 80)]


@dataclass
class AfsSection:
    attacks: list = field(default_factory=lambda: ["FGSM", "BIM", "DEEPFOOL"])
    split: str = "test"
    noise_seed: int = 0


@dataclass
class GroupvizSection:
    r: int = 4
    nmf_iters: int = 200
    nmf_tol: float = 1e-5
    nmf_seed: int = 0
    steps: int = 256
    step_size: float = 0.05
    init_low: float = 0.45
    init_high: float = 0.55
    jitter: int = 0
    seed: int = 0
    chunk: int = 256
    montage_images: int = 2


@dataclass
class AfgSection:
    attacks: list = field(default_factory=lambda: ["FGSM", "BIM", "DEEPFOOL"])
    train_per_class: int = 60
    test_per_class: int = 20
    policy: str = "ALL"
    tau: float = 0.5


@dataclass
class RecognizerSection:
    backend: str = "deep-cnn"
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 500
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0
    decode: str = "split"


@dataclass
class EvaluateSection:
    suites: list = field(default_factory=lambda: ["detection", "class", "recognition", "cross_attack",
                                                  "ablation", "backends"])
    ablation_attack: str = "BIM"
    policies: list = field(default_factory=lambda: ["ALL", "F3", "L3", "FML", "F3L3"])
    backends: list = field(default_factory=lambda: ["deep-cnn", "shallow-cnn", "linear-multilabel"])
    detector_epochs: int = 30
    detector_lr: float = 0.01
    transfer_from: str = ""  # another run's output root for cross-model transfer
    transfer_policy: str = ""
    control_seed: int = 0


@dataclass
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    attacks: list = field(default_factory=_default_attacks)
    afs: AfsSection = field(default_factory=AfsSection)
    groupviz: GroupvizSection = field(default_factory=GroupvizSection)
    afg: AfgSection = field(default_factory=AfgSection)
    recognizer: RecognizerSection = field(default_factory=RecognizerSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    output_root: str = "runs/default"
    base_dir: str = field(default=".", metadata={"hashed": False})

    def attack(self, name: str) -> AttackSection:
        for a in self.attacks:
            if a.name.upper() == name.upper():
                return a
        raise ConfigurationError(f"attack {name!r} is not configured")

    @property
    def root(self) -> Path:
        override = os.environ.get(OUTPUT_ENV)
        root = Path(override) if override else Path(self.output_root)
        return root if root.is_absolute() else Path(self.base_dir) / root

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Apply one global seed to every seeded stage."""
        self.dataset.seed = self.dataset.synthetic_seed = seed
        self.model.seed = self.recognizer.seed = seed
        self.groupviz.seed = self.groupviz.nmf_seed = seed
        self.afs.noise_seed = self.evaluate.control_seed = seed
        return self


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigurationError(f"[{where}] unknown keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, val in data.items():
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), val, f"{where}.{key}" if where else key)
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise ConfigurationError(f"{where}.{key}: expected true/false, got {val!r}")
            kwargs[key] = val
        elif isinstance(default, float) or (default is None and not isinstance(val, str)):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigurationError(f"{where}.{key}: expected a number, got {val!r}")
            kwargs[key] = float(val)
        elif isinstance(default, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigurationError(f"{where}.{key}: expected an integer, got {val!r}")
            kwargs[key] = val
        elif isinstance(default, str) and not isinstance(val, str):
            raise ConfigurationError(f"{where}.{key}: expected a string, got {val!r}")
        else:
            kwargs[key] = val
    return cls(**kwargs)


def config_from_dict(data: dict, base_dir=".") -> PipelineConfig:
    data = dict(data)
    attacks = data.pop("attacks", None)
    output = data.pop("output", {})
    cfg = _build(PipelineConfig, data, "")
    if attacks is not None:
        if not isinstance(attacks, list) or not attacks:
            raise ConfigurationError("[[attacks]] must be a non-empty array of tables")
        cfg.attacks = [_build(AttackSection, a, f"attacks[{i}]") for i, a in enumerate(attacks)]
    if output:
        if set(output) - {"root"}:
            raise ConfigurationError(f"[output] unknown keys: {', '.join(sorted(set(output) - {'root'}))}")
        cfg.output_root = output.get("root", cfg.output_root)
    cfg.base_dir = str(base_dir)
    validate(cfg)
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return config_from_dict(data, path.parent)


def validate(cfg: PipelineConfig) -> None:
    from .afg import POLICIES
    from .attacks import ATTACKS
    from .multilabel import BACKENDS

    names = [a.name.upper() for a in cfg.attacks]
    for n in names:
        if n not in ATTACKS:
            raise ConfigurationError(f"attacks.name: unknown attack {n!r}")
    if len(set(names)) != len(names):
        raise ConfigurationError("attacks.name: each attack may appear once")
    for section, listed in (("afs.attacks", cfg.afs.attacks), ("afg.attacks", cfg.afg.attacks)):
        for n in listed:
            if n.upper() not in names:
                raise ConfigurationError(f"{section}: {n!r} has no [[attacks]] entry")
    if not 0 < cfg.dataset.train_fraction < 1:
        raise ConfigurationError("dataset.train_fraction must be in (0, 1)")
    if cfg.afs.split not in ("train", "test"):
        raise ConfigurationError("afs.split must be 'train' or 'test'")
    if cfg.groupviz.r < 1:
        raise ConfigurationError("groupviz.r must be >= 1")
    if cfg.recognizer.backend not in BACKENDS:
        raise ConfigurationError(f"recognizer.backend must be one of {', '.join(BACKENDS)}")
    for b in cfg.evaluate.backends:
        if b not in BACKENDS:
            raise ConfigurationError(f"evaluate.backends: unknown backend {b!r}")
    for p in cfg.evaluate.policies + [cfg.afg.policy]:
        if p.upper() not in POLICIES:
            raise ConfigurationError(f"unknown channel policy {p!r}")
    if cfg.recognizer.decode not in ("split", "top2"):
        raise ConfigurationError("recognizer.decode must be 'split' or 'top2'")
    suites = {"detection", "class", "recognition", "cross_attack", "cross_model", "ablation", "backends"}
    for s in cfg.evaluate.suites:
        if s not in suites:
            raise ConfigurationError(f"evaluate.suites: unknown suite {s!r}")
    if not cfg.dataset.synthetic and not cfg.resolve(cfg.dataset.source).exists():
        raise ConfigurationError(f"dataset.source does not exist: {cfg.resolve(cfg.dataset.source)}")
