import math
from dataclasses import replace

import numpy as np
import pytest

import oracles
from dpfl import data, federation, models
from dpfl.errors import AggregationError, BudgetViolation, ParameterError, ShapeError, TrainingError
from dpfl.federation import FederationConfig
from dpfl.privacy import GradientReport, PrivacySpec


def small_task(seed=0, k=3, dim=4, n=40, clients=3, alpha=1.0):
    base = data.generate_mixture(k, dim, n, 3.0, seed)
    pair = data.make_transfer_pair(base, "rotate", 0.3, seed)
    part = data.dirichlet_partition(pair.target, clients, alpha, seed)
    return pair, part


def test_lr_schedule():
    cfg = FederationConfig(lr_init=0.6, lr_decay=0.9934, total_rounds=200)
    assert federation.lr_at(cfg, 0) == 0.6
    assert federation.lr_at(cfg, 1) == pytest.approx(0.59604, rel=1e-12)
    # 0.6 * 0.9934**128 evaluated with 30 significant digits
    assert federation.lr_at(cfg, 128) == pytest.approx(0.257065132767397778709165524622, rel=1e-12)
    with pytest.raises(ParameterError):
        federation.lr_at(FederationConfig(total_rounds=128), 128)


def test_config_validation():
    for kw in (dict(num_clients=0), dict(total_rounds=0), dict(lr_init=0), dict(lr_decay=1.5),
               dict(alpha=0), dict(strategy="XT"), dict(pretrain_epochs=-1)):
        with pytest.raises(ParameterError):
            FederationConfig(**kw)


def test_pretrain_zero_epochs_and_determinism():
    pair, _ = small_task()
    spec = models.ModelSpec("mlp1", 4, 3, (5,))
    init = models.init_params(spec, 7)
    assert np.array_equal(federation.pretrain(spec, pair.source, 0, 0.5, 7).values, init.values)
    a = federation.pretrain(spec, pair.source, 20, 0.5, 7)
    b = federation.pretrain(spec, pair.source, 20, 0.5, 7)
    assert np.array_equal(a.values, b.values)


def test_pretrain_reaches_high_accuracy_on_separable_data():
    ds = data.generate_mixture(2, 2, 500, 10.0, 0)
    spec = models.ModelSpec("mlp1", 2, 2, (8,))
    theta = federation.pretrain(spec, ds, 200, 0.5, 0)
    assert models.evaluate(spec, theta, ds)[0] >= 0.95


def test_pretrain_divergence_names_step():
    ds = data.generate_mixture(2, 2, 50, 10.0, 0)
    ds = data.LabeledDataset(ds.features * 1e150, 1 - ds.labels)
    spec = models.ModelSpec("linear", 2, 2)
    with pytest.raises(TrainingError, match="step"):
        federation.pretrain(spec, ds, 50, 1e300, 0)


def test_client_update_hand_computed():
    spec = models.ModelSpec("linear", 2, 2)
    zero = models.make_params(spec, np.zeros(6))
    x, y = np.array([[3.0, 4.0]]), np.array([0])
    expected = np.array([-1.5, -2.0, 1.5, 2.0, -0.5, 0.5])
    priv = PrivacySpec(epsilon=math.inf, clip_norm=math.inf)
    r = federation.client_update(spec, zero, x, y, 0, 0, 1.0, "FT", priv, 0)
    assert np.allclose(r.update, expected, rtol=0, atol=1e-15)
    clipped = federation.client_update(spec, zero, x, y, 0, 0, 1.0, "FT", replace(priv, clip_norm=1.0), 0)
    assert np.allclose(clipped.update, expected / math.sqrt(13.0), rtol=0, atol=1e-15)


def test_client_update_fast_and_trace_paths_agree():
    pair, part = small_task()
    spec = models.ModelSpec("mlp1", 4, 3, (5,))
    theta = models.init_params(spec, 1)
    idx = part.assignments[0]
    x, y = pair.target.features[idx], pair.target.labels[idx]
    priv = PrivacySpec(clip_norm=0.3)
    for strategy in ("FT", "HT"):
        fast = federation.client_update(spec, theta, x, y, 0, 4, 0.5, strategy, priv, 3)
        slow = federation.client_update(spec, theta, x, y, 0, 4, 0.5, strategy, priv, 3, keep_trace=True)
        assert np.allclose(fast.update, slow.update, rtol=0, atol=1e-12)
        assert slow.audit_trace.shape[0] == len(y)
        assert np.all(np.linalg.norm(slow.audit_trace, axis=1) <= 0.3 + 1e-12)
    ht = federation.client_update(spec, theta, x, y, 0, 4, 0.5, "HT", priv, 3)
    lo, hi = spec.head_range
    assert ht.update.shape == (hi - lo,)


def test_aggregate():
    one = GradientReport(0, 0, np.array([2.0, -1.0]), 1.0)
    assert np.array_equal(federation.aggregate([one]), one.update)
    u = np.array([1.5, 2.5])
    same = [GradientReport(0, 0, u, 0.3), GradientReport(1, 0, u, 0.7)]
    assert np.allclose(federation.aggregate(same), u, rtol=1e-15)
    mixed = [GradientReport(1, 0, np.array([0.0]), 0.75), GradientReport(0, 0, np.array([4.0]), 0.25)]
    assert federation.aggregate(mixed)[0] == 1.0


def test_aggregate_errors():
    with pytest.raises(AggregationError):
        federation.aggregate([])
    with pytest.raises(AggregationError):
        federation.aggregate([GradientReport(0, 0, np.zeros(2), 0.5), GradientReport(1, 0, np.zeros(2), 0.4)])
    with pytest.raises(AggregationError):
        federation.aggregate([GradientReport(0, 0, np.zeros(2), 0.5), GradientReport(1, 1, np.zeros(2), 0.5)])
    with pytest.raises(AggregationError):
        federation.aggregate([GradientReport(0, 0, np.zeros(2), 0.5), GradientReport(1, 0, np.zeros(3), 0.5)])


def test_apply_update():
    spec = models.ModelSpec("linear", 1, 2)  # 4 parameters
    theta = models.make_params(spec, [1.0, 1.0, 0.0, 0.0])
    assert np.array_equal(federation.apply_update(theta, np.zeros(4), 0.3, "FT").values, theta.values)
    stepped = federation.apply_update(theta, np.array([1.0, 0.0, 0.0, 0.0]), 1.0, "FT")
    assert stepped.values[:2].tolist() == [0.0, 1.0]
    with pytest.raises(ShapeError):
        federation.apply_update(theta, np.zeros(3), 1.0, "FT")
    mspec = models.ModelSpec("mlp1", 2, 2, (3,))
    m = models.init_params(mspec, 0)
    lo, hi = mspec.head_range
    moved = federation.apply_update(m, np.ones(hi - lo), 0.5, "HT")
    assert np.array_equal(moved.body, m.body)
    assert np.allclose(moved.head, m.head - 0.5)


def test_run_reduces_to_centralized_descent():
    pair, _ = small_task(n=30)
    part = data.dirichlet_partition(pair.target, 1, 1.0, 0)
    spec = models.ModelSpec("mlp1", 4, 3, (6,))
    cfg = FederationConfig(num_clients=1, total_rounds=10, lr_init=0.4, strategy="ST")
    priv = PrivacySpec(epsilon=math.inf, clip_norm=math.inf, total_rounds=10)
    trace = federation.run(spec, pair, part, cfg, priv, pair.target)
    lrs = [federation.lr_at(cfg, t) for t in range(10)]
    ref = oracles.centralized_descent(spec.widths, trace.snapshots[0].values, pair.target.features,
                                      pair.target.labels, lrs)
    for got, want in zip(trace.snapshots, ref):
        assert np.max(np.abs(got.values - want)) <= 1e-10


def test_ht_freezes_body_and_counts_exposures():
    pair, part = small_task()
    spec = models.ModelSpec("mlp1", 4, 3, (5,))
    cfg = FederationConfig(num_clients=3, total_rounds=6, strategy="HT", twin_run=True,
                           pretrain_epochs=5, retain_reports=True)
    priv = PrivacySpec(total_rounds=6)
    trace = federation.run(spec, pair, part, cfg, priv, pair.target)
    body0 = trace.snapshots[0].body
    lo, hi = spec.head_range
    for theta, twin in zip(trace.snapshots, trace.twin_snapshots):
        assert np.array_equal(theta.body, body0)
        assert np.array_equal(twin.body, body0)
    for reports in trace.reports:
        assert all(r.update.shape == (hi - lo,) for r in reports)
    assert trace.exposures == {0: 6, 1: 6, 2: 6}
    with pytest.raises(BudgetViolation):
        trace.ledger.expose(0)


def test_budget_violation_when_rounds_exceed_calibration():
    pair, part = small_task()
    spec = models.ModelSpec("linear", 4, 3)
    cfg = FederationConfig(num_clients=3, total_rounds=5, strategy="ST")
    with pytest.raises(BudgetViolation) as info:
        federation.run(spec, pair, part, cfg, PrivacySpec(total_rounds=3), pair.target)
    assert info.value.trace.rounds_completed == 3


def test_run_is_deterministic_and_order_free():
    pair, part = small_task()
    spec = models.ModelSpec("mlp1", 4, 3, (5,))
    cfg = FederationConfig(num_clients=3, total_rounds=5, strategy="FT", pretrain_epochs=5)
    priv = PrivacySpec(total_rounds=5)
    a = federation.run(spec, pair, part, cfg, priv, pair.target)
    b = federation.run(spec, pair, part, cfg, priv, pair.target)
    c = federation.run(spec, pair, part, cfg, priv, pair.target, client_order=[2, 0, 1])
    for x, y, z in zip(a.snapshots, b.snapshots, c.snapshots):
        assert np.array_equal(x.values, y.values) and np.array_equal(x.values, z.values)
    assert a.metrics == b.metrics
    with pytest.raises(ParameterError):
        federation.run(spec, pair, part, cfg, priv, pair.target, client_order=[0, 0, 1])


def test_twin_starts_together_and_st_needs_no_source():
    pair, part = small_task()
    spec = models.ModelSpec("linear", 4, 3)
    cfg = FederationConfig(num_clients=3, total_rounds=4, strategy="ST", twin_run=True)
    trace = federation.run(spec, pair, part, cfg, PrivacySpec(total_rounds=4), pair.target)
    assert np.array_equal(trace.snapshots[0].values, trace.twin_snapshots[0].values)
    assert all(m.kappa >= 0 for m in trace.metrics)
    assert trace.metrics[0].update_cosine is None
    assert federation.initial_params(spec, None, cfg).dim == spec.num_params
    with pytest.raises(ParameterError):
        federation.initial_params(spec, None, replace(cfg, strategy="FT"))


def test_ft_and_ht_share_initial_model():
    pair, _ = small_task()
    spec = models.ModelSpec("mlp1", 4, 3, (5,))
    ft = federation.initial_params(spec, pair.source, FederationConfig(strategy="FT", pretrain_epochs=3))
    ht = federation.initial_params(spec, pair.source, FederationConfig(strategy="HT", pretrain_epochs=3))
    assert np.array_equal(ft.values, ht.values)


def test_run_input_checks():
    pair, part = small_task()
    spec = models.ModelSpec("linear", 4, 3)
    with pytest.raises(ParameterError):
        federation.run(spec, pair, part, FederationConfig(num_clients=4, strategy="ST"), PrivacySpec(), pair.target)
    wrong = models.ModelSpec("linear", 5, 3)
    with pytest.raises(ShapeError):
        federation.run(wrong, pair, part, FederationConfig(num_clients=3, strategy="ST"), PrivacySpec(), pair.target)
