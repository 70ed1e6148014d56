"""Passive privacy audits over exposed client updates.

Membership inference scores a sample by the cosine between its own gradient
at the pre-round global model and an exposed client update. Source inference
rebuilds each client's one-step model from its update and attributes a known
member to the client whose model gives it the lowest loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from dpfl import models
from dpfl.analysis import cosine
from dpfl.data import AttackSplit, LabeledDataset
from dpfl.errors import AuditError
from dpfl.federation import apply_update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MembershipScores:
    round: int
    member_scores: np.ndarray
    non_member_scores: np.ndarray
    auc: float


@dataclass(frozen=True)
class AttackReport:
    per_round_auc: np.ndarray
    per_round_asr: np.ndarray
    inferred_sources: np.ndarray  # (rounds, members)

    @property
    def best_auc(self) -> float:
        return float(np.max(self.per_round_auc))

    @property
    def best_asr(self) -> float:
        return float(np.max(self.per_round_asr))

    @property
    def best_auc_round(self) -> int:
        return int(np.argmax(self.per_round_auc))

    @property
    def best_asr_round(self) -> int:
        return int(np.argmax(self.per_round_asr))

    def rows(self) -> list[dict]:
        return [
            {"round": t, "auc": float(a), "asr": float(s)}
            for t, (a, s) in enumerate(zip(self.per_round_auc, self.per_round_asr))
        ]

    def summary(self) -> dict:
        return {
            "best_auc": self.best_auc,
            "best_auc_round": self.best_auc_round,
            "best_asr": self.best_asr,
            "best_asr_round": self.best_asr_round,
        }


def sample_similarity(exposed, sample_gradient) -> float:
    """Cosine between an exposed update and one sample's gradient (0 if either is zero)."""
    return cosine(exposed, sample_gradient)


def auc(member_scores, non_member_scores) -> float:
    """Mann-Whitney AUC: P(member score > non-member score), ties counted as 1/2.

    With an empty side there is nothing to rank and 0.5 is returned.
    """
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(non_member_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        return 0.5
    ranks = rankdata(np.concatenate([m, n]))
    u = ranks[: m.size].sum() - m.size * (m.size + 1) / 2.0
    return float(u / (m.size * n.size))


def _cosine_matrix(rows: np.ndarray, updates: np.ndarray) -> np.ndarray:
    rn = np.linalg.norm(rows, axis=1)
    un = np.linalg.norm(updates, axis=1)
    dots = rows @ updates.T
    denom = np.outer(rn, un)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    if np.any(denom == 0):
        log.debug("zero-norm gradient or update; similarity set to 0")
    return np.clip(out, -1.0, 1.0)


def _round_reports(trace, t: int):
    if trace.reports is None:
        raise AuditError("trace has no retained gradient reports; rerun with retain_reports enabled")
    if not 0 <= t < len(trace.reports):
        raise AuditError(f"round {t} is not in the trace")
    return sorted(trace.reports[t], key=lambda r: r.client_id)


def mia_round(trace, t: int, split: AttackSplit, spec, train: LabeledDataset, test: LabeledDataset,
              member_rule: str = "max") -> MembershipScores:
    """Membership scores for round ``t`` and their AUC.

    Non-members are scored by their highest similarity over all client
    updates. With ``member_rule="max"`` members are scored the same way; with
    ``"own"`` only against their own client's update, which compares one
    cosine with a maximum of N and biases the AUC below 0.5.
    """
    if member_rule not in ("max", "own"):
        raise ValueError(f"member_rule must be 'max' or 'own', got {member_rule!r}")
    reports = _round_reports(trace, t)
    head_only = trace.config.strategy == "HT"
    theta = trace.snapshots[t]
    updates = np.stack([r.update for r in reports])
    column = {r.client_id: j for j, r in enumerate(reports)}

    member_scores = np.zeros(0)
    if len(split.members):
        idx = split.member_indices
        g = models.per_sample_gradients(spec, theta, train.features[idx], train.labels[idx], head_only).rows
        sims = _cosine_matrix(g, updates)
        if member_rule == "own":
            cols = np.array([column[c] for c in split.member_clients])
            member_scores = sims[np.arange(len(idx)), cols]
        else:
            member_scores = sims.max(axis=1)
    non_member_scores = np.zeros(0)
    if len(split.non_members):
        idx = split.non_members
        g = models.per_sample_gradients(spec, theta, test.features[idx], test.labels[idx], head_only).rows
        non_member_scores = _cosine_matrix(g, updates).max(axis=1)
    return MembershipScores(t, member_scores, non_member_scores, auc(member_scores, non_member_scores))


def recover_client_model(theta, report, lr: float, strategy: str):
    """The client's one-step model as the server can rebuild it from the exposed update."""
    return apply_update(theta, np.asarray(report.update), lr, strategy)


def infer_sources(losses: np.ndarray) -> np.ndarray:
    """Argmin over clients (axis 0) of a (clients, samples) loss matrix; ties go to the lowest id."""
    return np.argmin(losses, axis=0)


def attack_success_rate(inferred, actual) -> float:
    inferred = np.asarray(inferred)
    if inferred.size == 0:
        return 0.0
    return float(np.mean(inferred == np.asarray(actual)))


def sia_round(trace, t: int, split: AttackSplit, spec, train: LabeledDataset) -> tuple[np.ndarray, float]:
    reports = _round_reports(trace, t)
    if len(split.members) == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    theta = trace.snapshots[t]
    lr = trace.metrics[t].lr
    idx = split.member_indices
    x, y = train.features[idx], train.labels[idx]
    losses = np.stack([
        models.sample_losses(spec, recover_client_model(theta, r, lr, trace.config.strategy), x, y)
        for r in reports
    ])
    client_ids = np.array([r.client_id for r in reports])
    inferred = client_ids[infer_sources(losses)]
    return inferred, attack_success_rate(inferred, split.member_clients)


def audit(trace, split: AttackSplit, spec, train: LabeledDataset, test: LabeledDataset,
          shuffle_seed: int | None = None, member_rule: str = "max") -> AttackReport:
    """MIA and SIA at every round of ``trace``.

    ``shuffle_seed`` permutes the ground truth once for the whole audit
    (membership flags across the pooled scores, source clients across members)
    to give a null baseline.
    """
    rounds = len(trace.snapshots) - 1
    m, k = len(split.members), len(split.non_members)
    perm_membership = perm_source = None
    if shuffle_seed is not None:
        rng = np.random.default_rng(shuffle_seed)
        perm_membership = rng.permutation(m + k)
        perm_source = rng.permutation(m)
    aucs, asrs, inferred_all = [], [], []
    for t in range(rounds):
        try:
            scores = mia_round(trace, t, split, spec, train, test, member_rule)
            inferred, asr = sia_round(trace, t, split, spec, train)
        except AuditError as exc:
            raise AuditError(f"round {t}: {exc}") from exc
        if perm_membership is not None:
            pooled = np.concatenate([scores.member_scores, scores.non_member_scores])
            is_member = (np.arange(m + k) < m)[perm_membership]
            aucs.append(auc(pooled[is_member], pooled[~is_member]))
            asrs.append(attack_success_rate(inferred, split.member_clients[perm_source]))
        else:
            aucs.append(scores.auc)
            asrs.append(asr)
        inferred_all.append(inferred)
    return AttackReport(np.array(aucs), np.array(asrs), np.array(inferred_all).reshape(rounds, m))
