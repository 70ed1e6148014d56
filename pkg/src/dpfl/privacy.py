"""Per-sample clipping, noise calibration and the noisy client report.

Noise streams are numpy ``Generator`` objects over PCG64, keyed by
``SeedSequence(master_seed, spawn_key=(stream_tag, client_id, round))``;
Gaussian draws use numpy's ziggurat sampler (``standard_normal``).
"""

from __future__ import annotations

import enum
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from dpfl.errors import BudgetViolation, ParameterError
from dpfl.models import PerSampleGradients

NOISE_TAG = 0


@dataclass(frozen=True)
class PrivacySpec:
    """Budget and mechanism constants for one experiment.

    ``epsilon = inf`` turns the noise off; ``clip_norm = inf`` turns clipping off.
    """

    epsilon: float = 5.0
    delta: float = 1e-5
    clip_norm: float = 10.0
    sampling_prob: float = 1.0
    calib_const: float = 1.0
    total_rounds: int = 128

    def __post_init__(self):
        _validate(self)

    @property
    def sigma(self) -> float:
        return noise_scale(self)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "clip_norm": self.clip_norm,
            "sampling_prob": self.sampling_prob,
            "calib_const": self.calib_const,
            "total_rounds": self.total_rounds,
        }


def _validate(spec) -> None:
    if not spec.epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {spec.epsilon!r}")
    if not 0 < spec.delta < 1:
        raise ParameterError(f"delta must lie in (0, 1), got {spec.delta!r}")
    if not spec.clip_norm > 0:
        raise ParameterError(f"clip_norm must be positive, got {spec.clip_norm!r}")
    if not 0 < spec.sampling_prob <= 1:
        raise ParameterError(f"sampling_prob must lie in (0, 1], got {spec.sampling_prob!r}")
    if not spec.calib_const > 0:
        raise ParameterError(f"calib_const must be positive, got {spec.calib_const!r}")
    if int(spec.total_rounds) != spec.total_rounds or spec.total_rounds < 0:
        raise ParameterError(f"total_rounds must be a count, got {spec.total_rounds!r}")


@dataclass(frozen=True)
class GradientReport:
    client_id: int
    round: int
    update: np.ndarray
    weight: float
    audit_trace: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.weight <= 1:
            raise ParameterError(f"report weight must lie in (0, 1], got {self.weight!r}")


class BudgetStatus(str, enum.Enum):
    OK = "ok"
    VIOLATION = "violation"


def clip(gradient, clip_norm: float) -> np.ndarray:
    """Scale ``gradient`` down to L2 norm ``clip_norm`` if it is longer."""
    if not clip_norm > 0:
        raise ParameterError(f"clip_norm must be positive, got {clip_norm!r}")
    g = np.asarray(gradient, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g)) / clip_norm)


def clip_rows(rows: np.ndarray, clip_norm: float) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    return rows / np.maximum(1.0, norms / clip_norm)[:, None]


def noise_scale(spec) -> float:
    """sigma = c1 * q * sqrt(T * ln(1/delta)) / epsilon."""
    _validate(spec)
    if math.isinf(spec.epsilon):
        return 0.0
    return (
        spec.calib_const
        * spec.sampling_prob
        * math.sqrt(spec.total_rounds * math.log(1.0 / spec.delta))
        / spec.epsilon
    )


def noise_stream(master_seed: int, client_id: int, round_index: int, tag: int = NOISE_TAG) -> np.random.Generator:
    """Independent Gaussian stream for one (client, round) pair."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(tag), int(client_id), int(round_index)))
    return np.random.Generator(np.random.PCG64(seq))


def privatize(per_sample: PerSampleGradients, spec: PrivacySpec, rng: np.random.Generator) -> np.ndarray:
    """Mean of clipped per-sample gradients plus one Gaussian draw.

    Summing D_n draws of N(0, sigma^2) and dividing by D_n has the same law as
    a single draw of N(0, sigma^2 / D_n), which is what is added here.
    """
    rows = per_sample.rows
    n = rows.shape[0]
    if n == 0:
        raise ParameterError("cannot privatize an empty batch")
    return add_noise(clip_rows(rows, spec.clip_norm).mean(axis=0), n, spec, rng)


def add_noise(clipped_mean: np.ndarray, batch_size: int, spec: PrivacySpec, rng: np.random.Generator) -> np.ndarray:
    """Perturb a mean of ``batch_size`` clipped gradients with N(0, sigma^2 / batch_size) per coordinate."""
    sigma = noise_scale(spec)
    if sigma == 0.0:
        return clipped_mean
    return clipped_mean + rng.standard_normal(clipped_mean.shape[0]) * (sigma / math.sqrt(batch_size))


def effective_budget_check(spec: PrivacySpec, rounds_executed: int) -> BudgetStatus:
    if rounds_executed > spec.total_rounds:
        return BudgetStatus.VIOLATION
    return BudgetStatus.OK


class ExposureLedger:
    """Counts how often each client's update has been released."""

    def __init__(self, spec: PrivacySpec):
        self.spec = spec
        self.counts: dict[int, int] = defaultdict(int)

    def expose(self, client_id: int) -> None:
        n = self.counts[client_id] + 1
        if effective_budget_check(self.spec, n) is BudgetStatus.VIOLATION:
            raise BudgetViolation(
                f"client {client_id}: exposure {n} exceeds the calibrated T={self.spec.total_rounds}"
            )
        self.counts[client_id] = n
