import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recalx.calibration import fit_temperature_logits
from recalx.data import Dataset, FiniteJoint
from recalx.metrics import (
    GROUPBY,
    ConditionalEstimatorSpec,
    calibration_error_kl,
    cross_entropy,
    decomposition_report,
    default_levels,
    estimate_conditional,
    exact_calibration_errors,
    kl_divergence,
    mutual_information,
    per_level_profile,
    predictive_power,
)
from recalx.model import BayesOracle, ConstantClassifier, ScaledClassifier
from recalx.perturbation import Coalition, PerturbationStrategy, restricted_predict_batch

KERNEL = ConditionalEstimatorSpec("kernel", bandwidth=0.05, leave_one_out=True)
simplex_rows = st.integers(2, 4).flatmap(
    lambda k: st.lists(st.lists(st.floats(0.01, 1), min_size=k, max_size=k), min_size=2, max_size=30)
)


def _normalize(rows):
    P = np.asarray(rows, dtype=float)
    return P / P.sum(axis=1, keepdims=True)


def _exact_mi(preds, labels, probs):
    # I(f;Y) = sum_{g,y} P(g,y) log(P(g,y) / (P(g) P(y))), grouping equal prediction rows
    keys = [tuple(r) for r in np.round(preds, 15)]
    joint_gy, pg, py = {}, {}, {}
    for k, y, p in zip(keys, labels, probs):
        joint_gy[(k, y)] = joint_gy.get((k, y), 0.0) + p
        pg[k] = pg.get(k, 0.0) + p
        py[y] = py.get(y, 0.0) + p
    return sum(p * np.log(p / (pg[k] * py[y])) for (k, y), p in joint_gy.items() if p > 0)


@pytest.mark.parametrize("p, y, expected", [((0.5, 0.5), 0, 0.693147), ((1.0, 0.0), 0, 0.0), ((0.0, 1.0), 0, 27.631021)])
def test_cross_entropy(p, y, expected):
    assert cross_entropy(np.array(p), y) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize(
    "p, q, expected",
    [((0.3, 0.7), (0.3, 0.7), 0.0), ((1.0, 0.0), (0.5, 0.5), 0.693147), ((0.5, 0.5), (0.25, 0.75), 0.143841)],
)
def test_kl_divergence(p, q, expected):
    assert kl_divergence(np.array(p), np.array(q)) == pytest.approx(expected, abs=1e-6)


@pytest.mark.filterwarnings("ignore:.*isolated row")
@settings(max_examples=100, deadline=None)
@given(rows=simplex_rows, data=st.data())
def test_nonnegativity(rows, data):
    P = _normalize(rows)
    y = np.array(data.draw(st.lists(st.integers(0, P.shape[1] - 1), min_size=len(P), max_size=len(P))))
    Q = _normalize(data.draw(st.lists(st.lists(st.floats(0.01, 1), min_size=P.shape[1], max_size=P.shape[1]), min_size=1, max_size=1)))
    assert kl_divergence(P[0], Q[0]) >= 0
    for spec in (GROUPBY, KERNEL):
        assert calibration_error_kl(P, y, spec) >= 0
        assert mutual_information(P, y, spec) >= 0


@settings(max_examples=100, deadline=None)
@given(rows=simplex_rows, data=st.data())
def test_gibbs_inequality(rows, data):
    P = _normalize(rows)
    y = np.array(data.draw(st.lists(st.integers(0, P.shape[1] - 1), min_size=len(P), max_size=len(P))))
    # the bound is the label entropy given the prediction; it equals the plain
    # label entropy when the predictor is constant
    C = estimate_conditional(P, y, GROUPBY)
    cond_entropy = np.mean(-np.log(C[np.arange(y.size), y]))
    mean_ce = np.mean([cross_entropy(p, int(t)) for p, t in zip(P, y)])
    assert mean_ce >= cond_entropy - 1e-12
    freq = np.bincount(y, minlength=P.shape[1]) / y.size
    entropy = -sum(f * np.log(f) for f in freq if f > 0)
    const_ce = np.mean([cross_entropy(P[0], int(t)) for t in y])
    assert const_ce >= entropy - 1e-12


def test_conditional_collapses_to_marginal():
    P = np.tile([0.2, 0.8], (10, 1))
    y = np.array([0, 1] * 5)
    np.testing.assert_allclose(estimate_conditional(P, y, GROUPBY), 0.5)
    np.testing.assert_allclose(estimate_conditional(P, y, KERNEL), 0.5, atol=0.06)


def test_conditional_one_hot_predictions():
    y = np.array([0, 1, 2, 1, 0])
    P = np.eye(3)[y]
    np.testing.assert_array_equal(estimate_conditional(P, y, GROUPBY), P)


def test_conditional_two_groups():
    P = np.array([[0.8, 0.2]] * 10 + [[0.3, 0.7]] * 10)
    y = np.array([0] * 7 + [1] * 3 + [0] * 3 + [1] * 7)
    C = estimate_conditional(P, y, GROUPBY)
    np.testing.assert_allclose(C[:10], np.tile([0.7, 0.3], (10, 1)))
    np.testing.assert_allclose(C[10:], np.tile([0.3, 0.7], (10, 1)))


def test_leave_one_out_isolated_row_falls_back():
    P = np.array([[0.9, 0.1], [0.1, 0.9], [0.1, 0.9]])
    y = np.array([0, 1, 1])
    with pytest.warns(RuntimeWarning, match="1 isolated"):
        C = estimate_conditional(P, y, ConditionalEstimatorSpec("kernel", bandwidth=0.01, leave_one_out=True))
    np.testing.assert_allclose(C[0], [1.0, 0.0])


def test_groupby_rejects_too_many_groups():
    P = _normalize(np.random.default_rng(0).random((10_001, 2)) + 0.1)
    with pytest.raises(ValueError, match="distinct"):
        calibration_error_kl(P, np.zeros(10_001, dtype=int), GROUPBY)


def test_estimator_spec_validation():
    with pytest.raises(ValueError):
        ConditionalEstimatorSpec("kernel", bandwidth=0.0)
    with pytest.raises(ValueError):
        ConditionalEstimatorSpec("histogram")


def test_oracle_sample_calibration_error(joint, oracle):
    ds = joint.sample(100_000, 1)
    assert calibration_error_kl(oracle.predict_proba(ds.features), ds.labels, GROUPBY) <= 0.01


def test_constant_prediction_ce_is_kl_to_marginal():
    y = np.array([0] * 30 + [1] * 50 + [2] * 20)
    p_hat = np.array([0.2, 0.5, 0.3])
    got = calibration_error_kl(np.tile(p_hat, (100, 1)), y, GROUPBY)
    assert got == pytest.approx(kl_divergence(np.array([0.3, 0.5, 0.2]), p_hat), abs=1e-12)


def test_sharpened_oracle_recovers_after_temperature(joint, oracle):
    ds = joint.sample(50_000, 2)
    Z = 2.0 * oracle.logits(ds.features)
    sharp = np.exp(Z - Z.max(axis=1, keepdims=True))
    sharp /= sharp.sum(axis=1, keepdims=True)
    before = calibration_error_kl(sharp, ds.labels, GROUPBY)
    T = fit_temperature_logits(Z, ds.labels).temperature
    Zt = Z / T
    fixed = np.exp(Zt - Zt.max(axis=1, keepdims=True))
    fixed /= fixed.sum(axis=1, keepdims=True)
    after = calibration_error_kl(fixed, ds.labels, GROUPBY)
    assert before > 0.02
    assert after < 0.002


def test_mutual_information_examples():
    y = np.array([0, 1] * 50)
    assert mutual_information(np.tile([0.3, 0.7], (100, 1)), y, GROUPBY) == pytest.approx(0.0, abs=1e-15)
    assert mutual_information(np.eye(2)[y], y, GROUPBY) == pytest.approx(np.log(2), abs=1e-12)


def test_mutual_information_matches_enumeration(joint, oracle, zero):
    ds = joint.sample(100_000, 3)
    for mask in range(8):
        masks = np.full(ds.n, mask, dtype=np.uint64)
        P = restricted_predict_batch(oracle, None, ds.features, masks, zero)
        Pj = restricted_predict_batch(oracle, None, joint.support_x, np.full(joint.probs.size, mask, dtype=np.uint64), zero)
        exact = _exact_mi(Pj, joint.support_y, joint.probs)
        assert mutual_information(Pj, joint.support_y, GROUPBY, joint.probs) == pytest.approx(exact, abs=1e-12)
        assert abs(mutual_information(P, ds.labels, GROUPBY) - exact) <= 0.01


def test_kernel_estimator_consistent_with_groupby(joint, oracle):
    ds = joint.sample(100_000, 4)
    P = ScaledClassifier(oracle, 2.0).predict_proba(ds.features)
    exact = calibration_error_kl(P, ds.labels, GROUPBY)
    kernel = calibration_error_kl(P, ds.labels, ConditionalEstimatorSpec("kernel", bandwidth=0.01))
    assert abs(kernel - exact) <= 0.02


def test_oracle_information_grows_with_coalition(joint, oracle, zero):
    n = joint.probs.size
    mi = []
    for mask in range(8):
        P = restricted_predict_batch(oracle, None, joint.support_x, np.full(n, mask, dtype=np.uint64), zero)
        mi.append(_exact_mi(P, joint.support_y, joint.probs))
    for a, b in itertools.product(range(8), repeat=2):
        if a & b == a:
            assert mi[a] <= mi[b] + 1e-12


def _identity_joint():
    return FiniteJoint(np.array([[0.0], [1.0]]), np.array([0, 1]), np.array([0.5, 0.5]), 2)


def test_predictive_power_examples(joint, oracle, zero):
    assert predictive_power(oracle, None, joint, Coalition.empty(3), zero) == 0.0
    j = _identity_joint()
    z1 = PerturbationStrategy.zero_baseline(1)
    v = predictive_power(BayesOracle(j, z1), None, j, Coalition.full(1), z1)
    # the floor caps the certain prediction's loss at exactly zero
    assert v == pytest.approx(np.log(2), abs=1e-12)


def test_predictive_power_full_set_two_pass(planted_mlp, mean_strategy, planted_parts):
    test = planted_parts[2]
    v = predictive_power(planted_mlp, None, test, Coalition.full(3), mean_strategy)
    base = np.tile(mean_strategy.baseline_for(3), (test.n, 1))
    rows = np.arange(test.n)
    loss_empty = -np.log(np.maximum(planted_mlp.predict_proba(base)[rows, test.labels], 1e-12)).mean()
    loss_full = -np.log(np.maximum(planted_mlp.predict_proba(test.features)[rows, test.labels], 1e-12)).mean()
    assert v == pytest.approx(loss_empty - loss_full, abs=1e-12)


@pytest.mark.parametrize("scale", [1.0, 3.0, 0.4])
def test_decomposition_identity_exact(joint, zero, scale):
    m = ScaledClassifier(BayesOracle(joint, zero), scale)
    for mask in range(8):
        r = decomposition_report(m, joint, Coalition(mask, 3), zero)
        assert r.mode == "exact"
        assert abs(r.residual) <= 1e-9
        if scale == 1.0:
            assert abs(r.calib_error) <= 1e-10
            assert abs(r.predictive_power - r.mutual_info) <= 1e-9
        elif mask:
            assert r.calib_error > 0


def test_decomposition_empty_coalition(joint, zero):
    m = ScaledClassifier(BayesOracle(joint, zero), 3.0)
    r = decomposition_report(m, joint, Coalition.empty(3), zero)
    assert r.mutual_info == pytest.approx(0.0, abs=1e-15)
    assert r.predictive_power == 0.0
    assert r.baseline_bias == pytest.approx(r.calib_error, abs=1e-12)


def test_decomposition_estimate_mode_reports_residual(planted_mlp, mean_strategy, planted_parts):
    r = decomposition_report(planted_mlp, planted_parts[2], Coalition.from_indices([0], 3), mean_strategy)
    assert r.mode == "estimate"
    assert np.isfinite(r.residual)
    json.dumps(r.to_dict())


def test_exact_calibration_errors_shape(joint, oracle, zero):
    ce = exact_calibration_errors(ScaledClassifier(oracle, 2.0), joint, zero)
    assert ce.shape == (8,)
    assert ce[0] > 0 and np.all(ce >= 0)


def test_profile_oracle_is_calibrated(joint, oracle, zero):
    ds = joint.sample(100_000, 9)
    prof = per_level_profile(oracle, None, ds, zero, spec=GROUPBY)
    assert prof.levels == default_levels()
    assert prof.ce_max <= 0.01


def test_profile_rises_with_level_for_planted_model(miscal_mlp, mean_strategy, planted_parts):
    prof = per_level_profile(miscal_mlp, None, planted_parts[2], mean_strategy, levels=[0.0, 1 / 3, 2 / 3, 1.0], reps=2)
    assert prof.ce_per_level[2] > prof.ce_per_level[0]
    assert prof.ce_per_level[3] > prof.ce_per_level[1]


def test_profile_deterministic_and_serializable(miscal_mlp, mean_strategy, planted_parts):
    a = per_level_profile(miscal_mlp, None, planted_parts[2], mean_strategy, reps=2, seed=5)
    b = per_level_profile(miscal_mlp, None, planted_parts[2], mean_strategy, reps=2, seed=5)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    assert a.to_csv().splitlines()[0] == "level,ce"
    assert len(a.to_csv().splitlines()) == 12
    assert a.ce_avg == pytest.approx(np.mean(a.ce_per_level))
    assert a.ce_max == max(a.ce_per_level)


def test_constant_model_profile_is_flat():
    ds = Dataset(np.random.default_rng(0).normal(size=(200, 2)), np.array([0, 1] * 100), ("a", "b"), 2)
    prof = per_level_profile(ConstantClassifier([0.0, 0.0], 2), None, ds, PerturbationStrategy.zero_baseline(), spec=GROUPBY)
    np.testing.assert_allclose(prof.ce_per_level, 0.0, atol=1e-15)
