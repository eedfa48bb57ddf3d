import numpy as np
import pytest
from unittest.mock import patch

from app.exceptions import NuisanceError
from app.experiment_log import ExperimentLog, make_forward_plan
from app.nuisance import (ConstantModel, FitLedger, LinearModel, NuisanceConfig, NuisanceFitSet,
                          OracleModel, clamp_predictions, empty_ledger, fit_arm, fit_forward,
                          fit_iid_crossfit, fit_leaky_full, fit_ridge, oracle_nuisance, zero_nuisance)

# Test cases for fit_ridge

def test_fit_ridge_exact_line():
    model = fit_ridge(np.array([[1.0], [2.0], [3.0]]), np.array([2.0, 4.0, 6.0]), 0.0)
    assert abs(model.weights[0] - 2.0) <= 1e-10
    assert abs(model.intercept) <= 1e-10

def test_fit_ridge_large_penalty_shrinks_to_mean():
    rng = np.random.default_rng(1)
    features = rng.standard_normal((30, 3))
    targets = rng.standard_normal(30) + 4.0
    model = fit_ridge(features, targets, 1e12)
    assert np.allclose(model.weights, 0.0, atol=1e-6)
    assert abs(model.intercept - targets.mean()) <= 1e-6

def test_fit_ridge_matches_normal_equations():
    rng = np.random.default_rng(7)
    features = rng.standard_normal((20, 3))
    targets = rng.standard_normal(20)
    model = fit_ridge(features, targets, 0.5)

    # Unpenalized intercept: penalty applies to the three slopes only
    design = np.hstack([np.ones((20, 1)), features])
    penalty = np.diag([0.0, 0.5, 0.5, 0.5])
    beta = np.linalg.solve(design.T @ design + penalty, design.T @ targets)
    assert abs(model.intercept - beta[0]) <= 1e-8
    assert np.allclose(model.weights, beta[1:], atol=1e-8)

def test_fit_ridge_is_deterministic():
    rng = np.random.default_rng(3)
    features = rng.standard_normal((50, 4))
    targets = rng.standard_normal(50)
    first = fit_ridge(features, targets, 0.1)
    second = fit_ridge(features, targets, 0.1)
    assert np.array_equal(first.weights, second.weights)
    assert first.intercept == second.intercept

def test_fit_ridge_without_features():
    model = fit_ridge(np.zeros((3, 0)), np.array([1.0, 2.0, 6.0]), 0.0, 'constant')
    assert model.intercept == 3.0
    assert np.allclose(model.predict(np.zeros((2, 1))), [3.0, 3.0])

@pytest.mark.parametrize("features, targets, penalty, message", [
    (np.zeros((0, 1)), np.zeros(0), 0.0, "empty training set"),
    (np.ones((3, 1)), np.ones(2), 0.0, "targets have 2"),
    (np.ones((3, 1)), np.ones(3), -1.0, "non-negative"),
    (np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]), np.ones(3), 0.0, "Rank-deficient"),
])
def test_fit_ridge_errors(features, targets, penalty, message):
    with pytest.raises(NuisanceError, match=message):
        fit_ridge(features, targets, penalty)

def test_linear_model_feature_mismatch():
    model = LinearModel(np.array([1.0, 2.0]), 0.0, 'raw')
    with pytest.raises(NuisanceError, match="expects 2 features"):
        model.predict(np.ones((2, 3)))

# Test cases for NuisanceConfig

def test_config_normalizes_clamp():
    config = NuisanceConfig(clamp=[-50, 50])
    assert config.clamp == (-50.0, 50.0)
    assert config.to_dict()['clamp'] == [-50.0, 50.0]

@pytest.mark.parametrize("kwargs", [
    {'ridge_lambda': -0.1},
    {'clamp': (1.0, -1.0)},
    {'feature_map': 'unknown'},
])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(NuisanceError):
        NuisanceConfig(**kwargs)

# Test cases for fit_arm

def test_fit_arm_uses_only_that_arm():
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    a = np.array([1, 0, 1, 0])
    y = np.array([5.0, -1.0, 5.0, -1.0])
    model, rows = fit_arm(x, a, y, np.arange(4), 1, NuisanceConfig(feature_map='constant'))
    assert list(rows) == [0, 2]
    assert np.allclose(model.predict(x), 5.0)

@patch('app.nuisance.logging.warning')
def test_fit_arm_pooled_mean_fallback(warning_mock):
    x = np.zeros((3, 1))
    a = np.array([0, 0, 0])
    y = np.array([1.0, 2.0, 3.0])
    model, rows = fit_arm(x, a, y, np.arange(3), 1, NuisanceConfig())
    assert isinstance(model, ConstantModel)
    assert model.learner == 'pooled_mean'
    assert model.value == 2.0
    assert list(rows) == [0, 1, 2]
    warning_mock.assert_called_once()

def test_fit_arm_without_any_data_predicts_zero():
    model, rows = fit_arm(np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros(0), np.arange(0), 0,
                          NuisanceConfig())
    assert model.learner == 'zero'
    assert rows.size == 0

def test_fit_arm_fallback_disabled():
    with pytest.raises(NuisanceError, match="fallback disabled"):
        fit_arm(np.zeros((2, 1)), np.array([0, 0]), np.ones(2), np.arange(2), 1,
                NuisanceConfig(fallback=False))

def test_clamp_predictions():
    values = np.array([-80.0, 0.0, 75.0])
    assert list(clamp_predictions(values, (-50.0, 50.0))) == [-50.0, 0.0, 50.0]
    assert clamp_predictions(values, None) is values

# Test cases for the fitting modes

def test_forward_constant_fit_on_block_one():
    n = 10
    a = np.array([1, 0] * 5)
    y = np.where(a == 1, 5.0, 0.0)
    y[5:] = 100.0
    log = ExperimentLog(x=np.zeros((n, 1)), a=a, y=y, pi=np.full(n, 0.5))
    plan = make_forward_plan(n, 2)
    fits, ledger = fit_forward(log, plan, NuisanceConfig(feature_map='constant'))
    m0, m1 = fits.predict(plan.scored_array, log.x[plan.scored_array - 1], plan)
    assert np.allclose(m1, 5.0)
    assert np.allclose(m0, 0.0)
    assert len(ledger) == 2

def test_forward_ledger_trains_on_earlier_blocks(seeded_log, seeded_plan):
    _, ledger = fit_forward(seeded_log, seeded_plan, NuisanceConfig())
    assert ledger.mode == 'forward'
    assert len(ledger) == 2 * len(seeded_plan.scored_blocks)
    for entry in ledger.entries:
        start = seeded_plan.block(entry.block).start
        assert max(entry.train_indices) < start
        treated = set(np.flatnonzero(seeded_log.a == entry.arm) + 1)
        assert set(entry.train_indices) <= treated

def test_forward_uses_only_past_data(seeded_log, seeded_plan):
    fits, _ = fit_forward(seeded_log, seeded_plan, NuisanceConfig())
    y = np.array(seeded_log.y)
    y[-50:] += 1000.0
    perturbed = ExperimentLog(x=seeded_log.x, a=seeded_log.a, y=y, pi=seeded_log.pi)
    refit, _ = fit_forward(perturbed, seeded_plan, NuisanceConfig())
    times = np.array([110, 220])
    x = seeded_log.x[times - 1]
    assert np.array_equal(fits.predict(times, x, seeded_plan)[0], refit.predict(times, x, seeded_plan)[0])

def test_leaky_full_trains_on_everything(seeded_log, seeded_plan):
    fits, ledger = fit_leaky_full(seeded_log, seeded_plan, NuisanceConfig())
    assert ledger.mode == 'leaky_full'
    for entry in ledger.entries:
        assert entry.train_range[1] > seeded_plan.block(entry.block).start
    assert fits.per_block[2] is fits.per_block[4]

def test_forward_and_leaky_predictions_differ(seeded_log, seeded_plan):
    forward, _ = fit_forward(seeded_log, seeded_plan, NuisanceConfig())
    leaky, _ = fit_leaky_full(seeded_log, seeded_plan, NuisanceConfig())
    times = seeded_plan.scored_array
    x = seeded_log.x[times - 1]
    assert not np.array_equal(forward.predict(times, x, seeded_plan)[1], leaky.predict(times, x, seeded_plan)[1])

def test_iid_crossfit_folds(seeded_log, seeded_plan):
    fits, ledger = fit_iid_crossfit(seeded_log, seeded_plan, NuisanceConfig(), folds=5)
    assert ledger.mode == 'leaky_iid'
    assert len(ledger) == 10
    assert all(entry.block is None for entry in ledger.entries)
    fold_two = [entry for entry in ledger.entries if entry.fold == 2]
    assert all(t % 5 != 3 for entry in fold_two for t in entry.train_indices)
    assert fits.folds == 5

def test_iid_crossfit_needs_two_folds(seeded_log, seeded_plan):
    with pytest.raises(NuisanceError, match="at least 2 folds"):
        fit_iid_crossfit(seeded_log, seeded_plan, NuisanceConfig(), folds=1)

def test_fit_rejects_mismatched_plan(seeded_log):
    with pytest.raises(NuisanceError, match="does not match log length"):
        fit_forward(seeded_log, make_forward_plan(100, 2), NuisanceConfig())

def test_zero_nuisance_predicts_zero(seeded_plan):
    m0, m1 = zero_nuisance().predict(np.array([150, 300]), np.ones((2, 2)), seeded_plan)
    assert list(m0) == [0.0, 0.0]
    assert list(m1) == [0.0, 0.0]

def test_oracle_nuisance_is_pure(seeded_plan):
    fits = oracle_nuisance(lambda x: x[:, 0], lambda x: x[:, 0] + 1.0)
    x = np.array([[2.0, 0.0], [-1.0, 3.0]])
    times = np.array([150, 300])
    first = fits.predict(times, x, seeded_plan)
    second = fits.predict(times, x, seeded_plan)
    assert list(first[0]) == [2.0, -1.0]
    assert list(first[1]) == [3.0, 0.0]
    assert np.array_equal(first[1], second[1])

def test_fit_set_missing_block(seeded_plan):
    fits = NuisanceFitSet('forward', per_block={})
    with pytest.raises(NuisanceError, match="missing fit for scored block 2"):
        fits.predict(np.array([150]), np.ones((1, 2)), seeded_plan)

def test_oracle_model_single_row():
    model = OracleModel(lambda x: x.sum(axis=1))
    assert list(model.predict(np.array([1.0, 2.0]))) == [3.0]

# Test cases for FitLedger persistence

def test_ledger_file_round_trip(tmp_path, seeded_log, seeded_plan):
    _, ledger = fit_forward(seeded_log, seeded_plan, NuisanceConfig(clamp=(-5, 5)))
    loaded = FitLedger.load_jsonl(ledger.save_jsonl(tmp_path / 'ledger.jsonl'))
    assert loaded == ledger

def test_empty_ledger_keeps_mode(tmp_path):
    path = empty_ledger('zero').save_jsonl(tmp_path / 'ledger.jsonl')
    loaded = FitLedger.load_jsonl(path)
    assert loaded.mode == 'zero'
    assert len(loaded) == 0

@pytest.mark.parametrize("content, message", [
    ('', "Empty ledger"),
    ('{"arm": 0}\n', "Malformed ledger line 1"),
    ('{"mode": "forward"}\n{"mode": "zero"}\n', "expected forward"),
    ('not json\n', "Malformed ledger line 1"),
])
def test_ledger_load_errors(tmp_path, content, message):
    path = tmp_path / 'ledger.jsonl'
    path.write_text(content, encoding='utf-8')
    with pytest.raises(NuisanceError, match=message):
        FitLedger.load_jsonl(path)

def test_ledger_rejects_unknown_mode():
    with pytest.raises(NuisanceError, match="Unknown fit mode"):
        FitLedger('cheating')
