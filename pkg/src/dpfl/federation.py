"""FedSGD with per-sample DP and three initialisation strategies.

ST starts from random parameters. FT and HT start from parameters
pre-trained on a source dataset; HT exposes and updates only the head.
Every client takes one full-batch step per round and the server applies the
size-weighted mean of the noisy reports with a geometrically decaying
learning rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from dpfl import models
from dpfl.analysis import RoundMetrics, kappa, update_cosine
from dpfl.data import ClientPartition, LabeledDataset, TransferPair
from dpfl.errors import AggregationError, BudgetViolation, ParameterError, ShapeError, TrainingError
from dpfl.models import ModelSpec, ParameterVector
from dpfl.privacy import (
    ExposureLedger,
    GradientReport,
    PrivacySpec,
    add_noise,
    clip_rows,
    noise_stream,
    privatize,
)

STRATEGIES = ("ST", "FT", "HT")
INIT_TAG = 1


def derive_seed(master_seed: int, *keys: int) -> int:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 10
    total_rounds: int = 128
    lr_init: float = 0.6
    lr_decay: float = 0.9934
    alpha: float = 1.0
    strategy: str = "HT"
    master_seed: int = 0
    twin_run: bool = False
    init_scale: float = 1.0
    pretrain_epochs: int = 200
    pretrain_lr: float = 0.5
    retain_reports: bool = False

    def __post_init__(self):
        if self.num_clients < 1:
            raise ParameterError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.total_rounds < 1:
            raise ParameterError(f"total_rounds must be >= 1, got {self.total_rounds}")
        if not self.lr_init > 0:
            raise ParameterError(f"lr_init must be positive, got {self.lr_init}")
        if not 0 < self.lr_decay <= 1:
            raise ParameterError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.pretrain_epochs < 0:
            raise ParameterError("pretrain_epochs must be >= 0")


@dataclass
class TrainingTrace:
    config: FederationConfig
    sigma: float
    snapshots: list[ParameterVector] = field(default_factory=list)
    updates: list[np.ndarray] = field(default_factory=list)
    reports: list[list[GradientReport]] | None = None
    metrics: list[RoundMetrics] = field(default_factory=list)
    twin_snapshots: list[ParameterVector] | None = None
    exposures: dict[int, int] = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    ledger: ExposureLedger | None = None

    @property
    def final(self) -> ParameterVector:
        return self.snapshots[-1]

    @property
    def rounds_completed(self) -> int:
        return len(self.snapshots) - 1


def lr_at(config: FederationConfig, t: int) -> float:
    if not 0 <= t < config.total_rounds:
        raise ParameterError(f"round {t} outside [0, {config.total_rounds})")
    return config.lr_init * config.lr_decay**t


def pretrain(spec: ModelSpec, source: LabeledDataset, epochs: int, lr: float, seed: int,
             init_scale: float = 1.0) -> ParameterVector:
    """Centralised full-batch gradient descent from ``init_params(spec, seed)``."""
    if source.dim != spec.input_dim:
        raise ShapeError(f"source has {source.dim} features, model expects {spec.input_dim}")
    if source.num_classes > spec.num_classes:
        raise ShapeError(f"source has {source.num_classes} classes, head has {spec.num_classes}")
    params = models.init_params(spec, seed, init_scale)
    values = params.values.copy()
    for step in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            grad = models.batch_gradient(spec, params.with_values(values), source.features, source.labels)
            values -= lr * grad
        if not np.all(np.isfinite(values)):
            raise TrainingError(f"pre-training diverged at step {step}")
    loss = models.evaluate(spec, params.with_values(values), source)[1]
    if not math.isfinite(loss):
        raise TrainingError(f"pre-training loss is non-finite after step {epochs - 1}")
    return params.with_values(values)


def initial_params(spec: ModelSpec, source: LabeledDataset | None, config: FederationConfig) -> ParameterVector:
    """theta^0 for the configured strategy. FT and HT share it; ST uses the un-pretrained init."""
    seed = derive_seed(config.master_seed, INIT_TAG)
    if config.strategy == "ST":
        return models.init_params(spec, seed, config.init_scale)
    if source is None:
        raise ParameterError(f"{config.strategy} needs a source dataset for pre-training")
    return pretrain(spec, source, config.pretrain_epochs, config.pretrain_lr, seed, config.init_scale)


def client_update(
    spec: ModelSpec,
    params: ParameterVector,
    features: np.ndarray,
    labels: np.ndarray,
    client_id: int,
    round_index: int,
    weight: float,
    strategy: str,
    privacy: PrivacySpec,
    master_seed: int,
    ledger: ExposureLedger | None = None,
    keep_trace: bool = False,
) -> GradientReport:
    """One client's noisy full-batch gradient at the current global model."""
    if ledger is not None:
        ledger.expose(client_id)
    head_only = strategy == "HT"
    rng = noise_stream(master_seed, client_id, round_index)
    trace = None
    if keep_trace:
        per_sample = models.per_sample_gradients(spec, params, features, labels, head_only=head_only)
        update = privatize(per_sample, privacy, rng)
        trace = clip_rows(per_sample.rows, privacy.clip_norm)
    else:
        mean = models.clipped_mean_gradient(spec, params, features, labels, privacy.clip_norm, head_only)
        update = add_noise(mean, len(labels), privacy, rng)
    return GradientReport(client_id, round_index, update, float(weight), trace)


def aggregate(reports: Sequence[GradientReport]) -> np.ndarray:
    """Size-weighted sum of client updates, accumulated in client-id order."""
    if not reports:
        raise AggregationError("no reports to aggregate")
    ordered = sorted(reports, key=lambda r: r.client_id)
    rounds = {r.round for r in ordered}
    dims = {r.update.shape for r in ordered}
    if len(rounds) != 1:
        raise AggregationError(f"reports span several rounds: {sorted(rounds)}")
    if len(dims) != 1:
        raise AggregationError(f"reports have mismatched dimensions: {sorted(dims)}")
    total = math.fsum(r.weight for r in ordered)
    if abs(total - 1.0) > 1e-12:
        raise AggregationError(f"report weights sum to {total!r}, not 1")
    out = np.zeros(ordered[0].update.shape)
    for r in ordered:
        out += r.weight * r.update
    return out


def apply_update(params: ParameterVector, update: np.ndarray, lr: float, strategy: str) -> ParameterVector:
    values = params.values.copy()
    if strategy == "HT":
        lo, hi = params.head_range
        if update.shape != (hi - lo,):
            raise ShapeError(f"HT update must have {hi - lo} coordinates, got {update.shape}")
        values[lo:hi] -= lr * update
    else:
        if update.shape != values.shape:
            raise ShapeError(f"{strategy} update must have {values.size} coordinates, got {update.shape}")
        values -= lr * update
    return params.with_values(values)


def _client_reports(spec, params, train, partition, t, strategy, privacy, master_seed, ledger, order):
    weights = partition.weights()
    reports = {}
    for n in order:
        idx = partition.assignments[n]
        reports[n] = client_update(
            spec, params, train.features[idx], train.labels[idx], n, t, weights[n],
            strategy, privacy, master_seed, ledger,
        )
    return [reports[n] for n in sorted(reports)]


def run(
    spec: ModelSpec,
    pair: TransferPair,
    partition: ClientPartition,
    config: FederationConfig,
    privacy: PrivacySpec,
    test_set: LabeledDataset,
    client_order: Sequence[int] | None = None,
    init: ParameterVector | None = None,
) -> TrainingTrace:
    """Run T rounds of DP FedSGD on ``pair.target`` and evaluate on ``test_set``.

    ``partition`` indexes rows of ``pair.target``. ``init`` overrides the
    strategy's theta^0 (used by sweeps that share a pre-trained model).
    ``client_order`` only changes the order in which clients are visited.
    """
    train = pair.target
    if partition.total != len(train):
        raise ParameterError(f"partition covers {partition.total} samples, target has {len(train)}")
    if partition.num_clients != config.num_clients:
        raise ParameterError(
            f"partition has {partition.num_clients} clients, config says {config.num_clients}"
        )
    if train.dim != spec.input_dim or test_set.dim != spec.input_dim:
        raise ShapeError("target data and model input dimension disagree")
    order = list(range(config.num_clients)) if client_order is None else list(client_order)
    if sorted(order) != list(range(config.num_clients)):
        raise ParameterError("client_order must be a permutation of the client ids")

    theta = init if init is not None else initial_params(spec, pair.source, config)
    sigma = privacy.sigma
    trace = TrainingTrace(config, sigma, snapshots=[theta])
    if config.retain_reports:
        trace.reports = []
    ledger = ExposureLedger(privacy)
    trace.ledger = ledger
    twin_privacy = replace(privacy, epsilon=math.inf)
    twin = theta if config.twin_run else None
    if config.twin_run:
        trace.twin_snapshots = [twin]

    for t in range(config.total_rounds):
        lr = lr_at(config, t)
        try:
            reports = _client_reports(
                spec, theta, train, partition, t, config.strategy, privacy, config.master_seed, ledger, order
            )
        except BudgetViolation as exc:
            trace.exposures = dict(ledger.counts)
            raise BudgetViolation(str(exc), trace) from exc
        g = aggregate(reports)
        theta = apply_update(theta, g, lr, config.strategy)
        k = None
        if twin is not None:
            twin_reports = _client_reports(
                spec, twin, train, partition, t, config.strategy, twin_privacy, config.master_seed, None, order
            )
            twin = apply_update(twin, aggregate(twin_reports), lr, config.strategy)
            trace.twin_snapshots.append(twin)
            k = kappa(theta, twin)
        acc, loss = models.evaluate(spec, theta, test_set)
        cos = update_cosine(g, trace.updates[-1], config.strategy) if trace.updates else None
        trace.snapshots.append(theta)
        trace.updates.append(g)
        if trace.reports is not None:
            trace.reports.append(reports)
        trace.metrics.append(RoundMetrics(t, acc, loss, sigma, lr, k, cos))
        if not (math.isfinite(loss) and np.all(np.isfinite(theta.values))):
            trace.exposures = dict(ledger.counts)
            raise TrainingError(f"non-finite loss at round {t}", trace)

    trace.exposures = dict(ledger.counts)
    return trace
