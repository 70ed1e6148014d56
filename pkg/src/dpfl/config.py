"""Experiment configuration: a validated YAML tree and the objects it builds.

A config has six blocks: dataset, model, federation, privacy, attack and
output. Omitted keys take the defaults below; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from dpfl import data
from dpfl.errors import ConfigError, DPFLError
from dpfl.federation import FederationConfig, derive_seed
from dpfl.models import ModelSpec
from dpfl.privacy import PrivacySpec

DATA_TAG, PARTITION_TAG, ATTACK_TAG, SPLIT_TAG = 11, 12, 13, 14
DEFAULT_HIDDEN = {"linear": [], "mlp1": [64], "mlp2": [64, 64]}


@dataclass
class DatasetBlock:
    kind: str = "mixture"
    num_classes: int = 10
    dim: int = 20
    samples_per_class: int = 2000
    separation: float = 4.0
    seed: typing.Optional[int] = None
    shift_kind: str = "rotate"
    magnitude: float = 0.6
    test_fraction: float = 0.2
    images: typing.Optional[str] = None
    labels: typing.Optional[str] = None

    def check(self):
        if self.kind not in ("mixture", "idx"):
            raise ConfigError(f"dataset.kind: expected 'mixture' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("dataset.images / dataset.labels: required when dataset.kind is 'idx'")
        if self.shift_kind not in ("affine", "rotate", "class_split"):
            raise ConfigError(f"dataset.shift_kind: unknown shift {self.shift_kind!r}")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("dataset.test_fraction: must lie in (0, 1)")
        if self.magnitude < 0:
            raise ConfigError("dataset.magnitude: must be >= 0")


@dataclass
class ModelBlock:
    kind: str = "mlp1"
    hidden_dims: typing.Optional[typing.List[int]] = None

    def check(self):
        if self.kind not in DEFAULT_HIDDEN:
            raise ConfigError(f"model.kind: expected one of {sorted(DEFAULT_HIDDEN)}, got {self.kind!r}")

    def hidden(self) -> list[int]:
        return list(self.hidden_dims) if self.hidden_dims is not None else DEFAULT_HIDDEN[self.kind]


@dataclass
class FederationBlock:
    num_clients: int = 10
    total_rounds: int = 128
    lr_init: float = 0.5
    lr_decay: float = 0.9934
    alpha: float = 1.0
    strategy: str = "HT"
    master_seed: int = 0
    twin_run: bool = False
    init_scale: float = 1.0
    pretrain_epochs: int = 300
    pretrain_lr: float = 0.5


@dataclass
class PrivacyBlock:
    epsilon: float = 5.0
    delta: float = 1e-5
    clip_norm: float = 10.0
    sampling_prob: float = 1.0
    calib_const: float = 1.0
    total_rounds: typing.Optional[int] = None


@dataclass
class AttackBlock:
    enabled: bool = False
    per_client: int = 200
    non_member_count: int = 2000
    seed: typing.Optional[int] = None


@dataclass
class OutputBlock:
    directory: str = "runs/default"
    checkpoint_interval: int = 0
    retain_gradients: bool = False


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    federation: FederationBlock = field(default_factory=FederationBlock)
    privacy: PrivacyBlock = field(default_factory=PrivacyBlock)
    attack: AttackBlock = field(default_factory=AttackBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def cell_hash(self) -> str:
        """Identity of the run: every block except output."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def federation_config(self) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            num_clients=f.num_clients, total_rounds=f.total_rounds, lr_init=f.lr_init,
            lr_decay=f.lr_decay, alpha=f.alpha, strategy=f.strategy, master_seed=f.master_seed,
            twin_run=f.twin_run, init_scale=f.init_scale, pretrain_epochs=f.pretrain_epochs,
            pretrain_lr=f.pretrain_lr, retain_reports=self.output.retain_gradients or self.attack.enabled,
        )

    def privacy_spec(self) -> PrivacySpec:
        p = self.privacy
        rounds = p.total_rounds if p.total_rounds is not None else self.federation.total_rounds
        return PrivacySpec(p.epsilon, p.delta, p.clip_norm, p.sampling_prob, p.calib_const, rounds)


_BLOCK_TYPES = {
    "dataset": DatasetBlock, "model": ModelBlock, "federation": FederationBlock,
    "privacy": PrivacyBlock, "attack": AttackBlock, "output": OutputBlock,
}


def _coerce(value, annotation, path: str):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(annotation)
        return [_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value)]
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, str) and value.lower() in ("inf", "+inf", ".inf"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {annotation}")


def _load_block(name: str, raw) -> object:
    cls = _BLOCK_TYPES[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key")
    values = {k: _coerce(v, hints[k], f"{name}.{k}") for k, v in raw.items()}
    return cls(**values)


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping of blocks")
    unknown = sorted(set(raw) - set(_BLOCK_TYPES))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown block")
    cfg = ExperimentConfig(**{name: _load_block(name, raw.get(name)) for name in _BLOCK_TYPES})
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Check every block by constructing the runtime objects; re-raise with the key path."""
    cfg.dataset.check()
    cfg.model.check()
    for block, build in (("federation", cfg.federation_config), ("privacy", cfg.privacy_spec)):
        try:
            build()
        except DPFLError as exc:
            msg = str(exc)
            key = msg.split(" ", 1)[0]
            raise ConfigError(f"{block}.{key}: {msg}") from exc
    if any(h < 1 for h in cfg.model.hidden()):
        raise ConfigError("model.hidden_dims: widths must be >= 1")
    if cfg.attack.per_client < 0 or cfg.attack.non_member_count < 0:
        raise ConfigError("attack.per_client / attack.non_member_count: must be >= 0")
    if cfg.output.checkpoint_interval < 0:
        raise ConfigError("output.checkpoint_interval: must be >= 0")


def parse_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return config_from_dict(raw)


def set_path(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a block")
    node[keys[-1]] = value


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key.path=value`` strings (values parsed as YAML scalars)."""
    raw = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key.path=value")
        key, text = item.split("=", 1)
        set_path(raw, key.strip(), yaml.safe_load(text))
    return config_from_dict(raw)


@dataclass
class Experiment:
    config: ExperimentConfig
    spec: ModelSpec
    pair: data.TransferPair
    test: data.LabeledDataset
    partition: data.ClientPartition
    federation: FederationConfig
    privacy: PrivacySpec
    split: data.AttackSplit | None = None

    @property
    def train(self) -> data.LabeledDataset:
        return self.pair.target


def base_dataset(block: DatasetBlock, seed: int) -> data.LabeledDataset:
    if block.kind == "idx":
        return data.load_idx(block.images, block.labels)
    return data.generate_mixture(block.num_classes, block.dim, block.samples_per_class, block.separation, seed)


def build_transfer(block: DatasetBlock, seed: int, magnitude: float | None = None):
    """Source, target-train and target-test sets drawn from disjoint base samples."""
    base = base_dataset(block, seed)
    mag = block.magnitude if magnitude is None else magnitude
    pair = data.make_transfer_pair(base, block.shift_kind, mag, seed)
    rng = np.random.default_rng(derive_seed(seed, SPLIT_TAG))
    if block.shift_kind == "class_split":
        source = pair.source
        tgt = rng.permutation(len(pair.target))
        target_all = pair.target
    else:
        perm = rng.permutation(len(base))
        half = len(base) // 2
        source = pair.source.subset(perm[:half], base.name + "-source")
        tgt = perm[half:]
        target_all = pair.target
    n_test = max(1, int(round(len(tgt) * block.test_fraction)))
    test = target_all.subset(tgt[:n_test], target_all.name + "-test")
    train = target_all.subset(tgt[n_test:], target_all.name + "-train")
    return data.TransferPair(source, train, pair.shift_descriptor), test


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    master = cfg.federation.master_seed
    data_seed = cfg.dataset.seed if cfg.dataset.seed is not None else derive_seed(master, DATA_TAG) % 2**32
    pair, test = build_transfer(cfg.dataset, data_seed)
    spec = ModelSpec(cfg.model.kind, pair.target.dim, pair.target.num_classes, tuple(cfg.model.hidden()))
    fed = cfg.federation_config()
    partition = data.dirichlet_partition(pair.target, fed.num_clients, fed.alpha, derive_seed(master, PARTITION_TAG))
    split = None
    if cfg.attack.enabled:
        seed = cfg.attack.seed if cfg.attack.seed is not None else derive_seed(master, ATTACK_TAG)
        per_client = min(cfg.attack.per_client, int(partition.client_sizes.min()))
        non_members = min(cfg.attack.non_member_count, len(test))
        split = data.build_attack_split(partition, per_client, test, non_members, seed)
    return Experiment(cfg, spec, pair, test, partition, fed, cfg.privacy_spec(), split)
