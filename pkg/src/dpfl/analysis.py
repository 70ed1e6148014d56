"""Diagnostics computed from training traces.

Noise-interference distance between a noisy run and its noise-free twin,
cosine similarity of consecutive global updates, power-law growth fits, an
LDA-based domain gap and the relative-increase / summary tables.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg

from dpfl.errors import AggregationError, DPFLError, ParameterError, ShapeError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("round", "acc", "loss", "kappa", "cosine", "sigma", "lr")


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    test_accuracy: float
    mean_loss: float
    sigma: float
    lr: float
    kappa: float | None = None
    update_cosine: float | None = None

    def row(self) -> list:
        return [
            self.round,
            repr(self.test_accuracy),
            repr(self.mean_loss),
            "" if self.kappa is None else repr(self.kappa),
            "" if self.update_cosine is None else repr(self.update_cosine),
            repr(self.sigma),
            repr(self.lr),
        ]


@dataclass(frozen=True)
class DomainGap:
    projections: list[np.ndarray]
    gap_statistic: float
    pairwise: np.ndarray


def kappa(noisy, clean) -> float:
    """L2 distance between two parameter vectors with the same layout."""
    a = getattr(noisy, "values", noisy)
    b = getattr(clean, "values", clean)
    if getattr(noisy, "layout", None) != getattr(clean, "layout", None) or np.shape(a) != np.shape(b):
        raise ShapeError("kappa needs parameter vectors with identical layouts")
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cosine of vectors with shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        log.debug("cosine of a zero-norm vector defined as 0")
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def update_cosine(current, previous, strategy: str | None = None) -> float:
    """Consistency of consecutive global updates.

    HT updates are already head-only, so ``strategy`` only documents intent.
    """
    return cosine(current, previous)


def fit_growth(kappas: Sequence[float], rounds: Sequence[float] | None = None) -> float:
    """Least-squares slope of log(kappa) against log(round).

    ``rounds`` defaults to 1..len(kappas). Non-positive kappas are dropped.
    """
    k = np.asarray(kappas, dtype=np.float64)
    t = np.arange(1, k.size + 1, dtype=np.float64) if rounds is None else np.asarray(rounds, float)
    keep = (k > 0) & np.isfinite(k) & (t > 0)
    if keep.sum() < 10:
        raise DPFLError(f"growth fit needs >= 10 positive points, got {int(keep.sum())}")
    x, y = np.log(t[keep]), np.log(k[keep])
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


def lda_project(datasets: Sequence, n_components: int = 2) -> DomainGap:
    """Fisher LDA with dataset identity as the class label.

    Directions solve S_b v = lambda S_w v with S_w the pooled within-dataset
    covariance (plus 1e-6 * trace/dim on the diagonal) and S_b the weighted
    between-dataset covariance; eigenvectors are S_w-orthonormal, so distances
    in the projection are Mahalanobis distances along the kept directions.
    """
    if len(datasets) < 2:
        raise ParameterError("lda_project needs at least two datasets")
    mats = [np.asarray(getattr(d, "features", d), dtype=np.float64) for d in datasets]
    dim = mats[0].shape[1]
    if any(m.ndim != 2 or m.shape[1] != dim for m in mats):
        raise ParameterError("all datasets must share the feature dimensionality")
    n_total = sum(m.shape[0] for m in mats)
    grand = np.vstack(mats).mean(axis=0)
    means = [m.mean(axis=0) for m in mats]
    s_w = np.zeros((dim, dim))
    s_b = np.zeros((dim, dim))
    for m, mu in zip(mats, means):
        c = m - mu
        s_w += c.T @ c
        diff = (mu - grand)[:, None]
        s_b += m.shape[0] * (diff @ diff.T)
    s_w /= n_total
    s_b /= n_total
    s_w += np.eye(dim) * (1e-6 * np.trace(s_w) / dim)
    try:
        evals, evecs = linalg.eigh(s_b, s_w)
    except linalg.LinAlgError as exc:
        raise DPFLError(f"within-class scatter is singular: {exc}") from exc
    order = np.argsort(evals)[::-1][:n_components]
    w = evecs[:, order]
    if w.shape[1] < n_components:
        w = np.hstack([w, np.zeros((dim, n_components - w.shape[1]))])
    projections = [m @ w for m in mats]
    centroids = np.array([p.mean(axis=0) for p in projections])
    pairwise = np.linalg.norm(centroids[:, None, :] - centroids[None, :, :], axis=2)
    return DomainGap(projections, float(pairwise[0, 1]), pairwise)


def relative_increase(baseline: float, value: float) -> float:
    """Percentage change of ``value`` over a positive ``baseline``."""
    if not baseline > 0:
        raise ParameterError(f"baseline must be positive, got {baseline!r}")
    return 100.0 * (value - baseline) / baseline


def best_accuracy(trace) -> float:
    return max(m.test_accuracy for m in trace.metrics)


SWEEP_KEYS = ("dataset", "model_kind", "epsilon", "total_rounds", "num_clients", "alpha", "seed")


def summarize(traces: Sequence, reports: Sequence | None = None, keys: Sequence[str] = SWEEP_KEYS) -> list[dict]:
    """Table-style summary: one row per strategy cell plus cross-strategy columns.

    Each trace must expose ``labels`` (a dict holding every entry of ``keys``
    and ``strategy``) and ``metrics``. Rows sharing all ``keys`` form a group;
    within a group ``delta_ht_ft`` is HT best accuracy minus FT best accuracy
    and ``rel_acc_vs_st`` the relative increase over ST's best accuracy.
    """
    if reports is not None and len(reports) != len(traces):
        raise AggregationError("traces and attack reports must pair up one to one")
    rows = []
    for i, tr in enumerate(traces):
        labels = dict(getattr(tr, "labels", {}) or {})
        missing = [k for k in (*keys, "strategy") if k not in labels]
        if len(traces) > 1 and missing:
            raise AggregationError(f"trace {i} lacks sweep axes {missing}")
        row = {k: labels.get(k) for k in (*keys, "strategy")}
        row["best_acc"] = best_accuracy(tr)
        row["final_acc"] = tr.metrics[-1].test_accuracy
        if reports is not None and reports[i] is not None:
            row["best_auc"] = reports[i].best_auc
            row["best_asr"] = reports[i].best_asr
        rows.append(row)

    def group_key(r):
        return tuple(r[k] for k in keys)

    groups: dict = {}
    for r in rows:
        groups.setdefault(group_key(r), {})
        if r["strategy"] in groups[group_key(r)]:
            raise AggregationError(f"duplicate cell {group_key(r)} / {r['strategy']}")
        groups[group_key(r)][r["strategy"]] = r

    for r in rows:
        cell = groups[group_key(r)]
        ht, ft, st = cell.get("HT"), cell.get("FT"), cell.get("ST")
        r["delta_ht_ft"] = ht["best_acc"] - ft["best_acc"] if ht and ft else None
        r["ht_beats_ft"] = (ht["best_acc"] > ft["best_acc"]) if ht and ft else None
        if st and st["best_acc"] > 0:
            r["rel_acc_vs_st"] = relative_increase(st["best_acc"], r["best_acc"])
            for metric in ("best_auc", "best_asr"):
                if metric in r and st.get(metric):
                    r[f"rel_{metric[5:]}_vs_st"] = relative_increase(st[metric], r[metric])
        else:
            r["rel_acc_vs_st"] = None
    return rows


def trend_table(rows: Sequence[dict], axis: str, value: str = "best_acc") -> list[dict]:
    """Mean of ``value`` per (strategy, axis value), sorted along ``axis``.

    ``monotone`` marks whether each strategy's means never decrease along the axis.
    """
    cells: dict = {}
    for r in rows:
        if r.get(value) is None:
            continue
        cells.setdefault((r["strategy"], r[axis]), []).append(r[value])
    out = []
    for strategy, items in itertools.groupby(sorted(cells), key=lambda c: c[0]):
        pts = sorted(items, key=lambda c: c[1])
        means = [float(np.mean(cells[c])) for c in pts]
        mono = all(b >= a for a, b in zip(means, means[1:]))
        for c, m in zip(pts, means):
            out.append({"strategy": strategy, axis: c[1], f"mean_{value}": m, "monotone": mono})
    return out


def write_csv(path, rows: Iterable[dict], columns: Sequence[str] | None = None) -> None:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow(["" if r.get(c) is None else _fmt(r.get(c)) for c in columns])


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def write_metrics_csv(path, metrics: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow(m.row())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# schema_version="):
            raise DPFLError(f"{path}: missing schema header")
        return list(csv.DictReader(fh))
