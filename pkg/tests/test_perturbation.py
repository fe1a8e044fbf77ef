import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from recalx._numeric import popcount
from recalx.calibration import ReCalXCalibrator
from recalx.model import ConstantClassifier
from recalx.perturbation import (
    Coalition,
    PerturbationStrategy,
    level_to_size,
    perturb,
    perturb_batch,
    perturbation_level,
    restricted_predict,
    restricted_predict_batch,
    sample_coalitions,
    sample_masks,
)

DETERMINISTIC = [
    PerturbationStrategy.zero_baseline(),
    PerturbationStrategy.fixed_baseline([1.5, -2.0, 0.0, 4.0]),
    PerturbationStrategy.mean_replacement([0.1, 0.2, 0.3, 0.4]),
]
vectors = st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4).map(np.array)
masks4 = st.integers(0, 15)


def test_full_coalition_is_identity():
    x = np.array([1.0, -2.0, 3.5])
    for s in DETERMINISTIC[:1] + [PerturbationStrategy.gaussian_noise(1.0)]:
        np.testing.assert_array_equal(perturb(x, Coalition.full(3), s), x)


def test_empty_coalition_zero_baseline():
    np.testing.assert_array_equal(perturb(np.array([4.0, 5.0]), Coalition.empty(2), PerturbationStrategy.zero_baseline()), [0, 0])


def test_mean_replacement_componentwise():
    out = perturb(np.array([5.0, 7.0]), Coalition.from_indices([0], 2), PerturbationStrategy.mean_replacement([1, 3]))
    np.testing.assert_array_equal(out, [5.0, 3.0])


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        perturb(np.zeros(3), Coalition.full(2), PerturbationStrategy.zero_baseline())
    with pytest.raises(ValueError):
        perturb(np.zeros(3), Coalition.full(3), PerturbationStrategy.mean_replacement([0.0, 0.0]))


def test_noise_is_seeded_by_seed_index_and_mask():
    s = PerturbationStrategy.gaussian_noise(0.5)
    x, S = np.zeros(4), Coalition.from_indices([1], 4)
    a = perturb(x, S, s, seed=3, index=2)
    np.testing.assert_array_equal(a, perturb(x, S, s, seed=3, index=2))
    assert a[1] == 0.0 and np.all(a[[0, 2, 3]] != 0)
    assert not np.array_equal(a, perturb(x, S, s, seed=3, index=1))
    assert not np.array_equal(a, perturb(x, S, s, seed=4, index=2))
    batch = perturb_batch(np.zeros((3, 4)), np.full(3, S.kept, dtype=np.uint64), s, seed=3)
    np.testing.assert_array_equal(batch[2], a)


@settings(max_examples=200, deadline=None)
@given(x=vectors, mask=masks4, k=st.integers(0, 2))
def test_idempotent_for_deterministic_strategies(x, mask, k):
    s, S = DETERMINISTIC[k], Coalition(mask, 4)
    once = perturb(x, S, s)
    np.testing.assert_array_equal(perturb(once, S, s), once)


@settings(max_examples=200, deadline=None)
@given(x=vectors, a=masks4, b=masks4, k=st.integers(0, 2))
def test_monotone_nesting(x, a, b, k):
    small, big = Coalition(a & b, 4), Coalition(a | b, 4)
    pb = perturb(x, big, DETERMINISTIC[k])
    for j in small.indices():
        assert j in big
        assert pb[j] == x[j]


@settings(max_examples=100, deadline=None)
@given(x=vectors, mask=masks4, k=st.integers(0, 2))
def test_batch_matches_single(x, mask, k):
    one = perturb(x, Coalition(mask, 4), DETERMINISTIC[k])
    many = perturb_batch(x[None], np.array([mask], dtype=np.uint64), DETERMINISTIC[k])
    np.testing.assert_array_equal(one, many[0])


@pytest.mark.parametrize("d, size, level", [(10, 7, 0.3), (5, 5, 0.0), (5, 0, 1.0), (3, 1, 2 / 3)])
def test_perturbation_level(d, size, level):
    assert perturbation_level(Coalition.from_indices(range(size), d)) == level


@given(d=st.integers(1, 40))
def test_level_is_bijection_of_size(d):
    levels = [perturbation_level(Coalition.from_indices(range(s), d)) for s in range(d + 1)]
    assert len(set(levels)) == d + 1
    assert [round(lv * d) for lv in levels] == list(range(d, -1, -1))
    assert all(level_to_size(lv, d) == s for s, lv in enumerate(levels))


def test_exhaustive_order():
    got = sample_coalitions(2, "exhaustive", 0, 0)
    assert [c.indices() for c in got] == [(), (0,), (1,), (0, 1)]
    with pytest.raises(ValueError, match="d <= 20"):
        sample_masks(21, "exhaustive", 0, 0)


def test_fixed_level_sizes():
    masks = sample_masks(4, "fixed-level", 500, 1, level=0.5)
    assert set(popcount(masks).tolist()) == {2}


def test_uniform_size_histogram():
    sizes = popcount(sample_masks(8, "uniform-size", 10_000, 0))
    counts = np.bincount(sizes, minlength=9)
    assert chisquare(counts).pvalue > 0.01


def test_uniform_subset_within_size():
    masks = sample_masks(5, "fixed-level", 20_000, 2, level=0.6)
    counts = np.bincount(masks.astype(np.int64), minlength=32)
    expected = [m for m in range(32) if bin(m).count("1") == 2]
    assert set(np.flatnonzero(counts).tolist()) == set(expected)
    assert chisquare(counts[expected]).pvalue > 0.01


def test_shapley_kernel_never_trivial():
    sizes = popcount(sample_masks(6, "shapley-kernel", 2000, 0))
    assert sizes.min() >= 1 and sizes.max() <= 5


def test_sampling_deterministic():
    a = sample_masks(7, "uniform-size", 100, 5)
    assert a.tobytes() == sample_masks(7, "uniform-size", 100, 5).tobytes()
    assert a.tobytes() != sample_masks(7, "uniform-size", 100, 6).tobytes()


def test_coalition_wire_form():
    c = Coalition.from_indices([0, 1, 3, 5], 10)
    assert c.to_dict() == {"d": 10, "kept": "0x2b"}
    assert Coalition.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        Coalition(1 << 4, 4)


@pytest.mark.parametrize(
    "s",
    DETERMINISTIC + [PerturbationStrategy.gaussian_noise(0.25)],
)
def test_strategy_round_trip(s):
    assert PerturbationStrategy.from_dict(s.to_dict()) == s


def test_restricted_predict_full_coalition(planted_mlp, mean_strategy):
    x = np.array([0.3, -1.2, 2.0])
    np.testing.assert_array_equal(
        restricted_predict(planted_mlp, None, x, Coalition.full(3), mean_strategy), planted_mlp.predict_proba(x)
    )


def test_restricted_predict_constant_model():
    m = ConstantClassifier([0.5, -0.5, 2.0], 3)
    outs = {restricted_predict(m, None, np.ones(3), Coalition(k, 3), PerturbationStrategy.zero_baseline()).tobytes() for k in range(8)}
    assert len(outs) == 1


def test_unit_temperatures_are_identity(planted_mlp, mean_strategy, rng):
    calib = ReCalXCalibrator((1.0,) * 10)
    for _ in range(100):
        x = rng.normal(size=3)
        S = Coalition(int(rng.integers(0, 8)), 3)
        a = restricted_predict(planted_mlp, None, x, S, mean_strategy)
        b = restricted_predict(planted_mlp, calib, x, S, mean_strategy)
        np.testing.assert_array_equal(a, b)


def test_calibrator_never_changes_argmax(miscal_mlp, mean_strategy, planted_parts):
    test = planted_parts[2]
    calib = ReCalXCalibrator((0.01, 0.3, 1.0, 2.0, 5.0, 9.0, 20.0, 50.0, 80.0, 100.0))
    X = np.repeat(test.features, 8, axis=0)
    masks = np.tile(np.arange(8, dtype=np.uint64), test.n)
    a = restricted_predict_batch(miscal_mlp, None, X, masks, mean_strategy)
    b = restricted_predict_batch(miscal_mlp, calib, X, masks, mean_strategy)
    assert np.array_equal(np.argmax(a, axis=1), np.argmax(b, axis=1))


def test_batch_predict_matches_single(miscal_mlp, mean_strategy, rng):
    calib = ReCalXCalibrator(tuple(np.linspace(0.5, 3, 10)))
    X = rng.normal(size=(20, 3))
    masks = rng.integers(0, 8, 20).astype(np.uint64)
    batch = restricted_predict_batch(miscal_mlp, calib, X, masks, mean_strategy)
    for r in range(20):
        one = restricted_predict(miscal_mlp, calib, X[r], Coalition(int(masks[r]), 3), mean_strategy)
        np.testing.assert_allclose(one, batch[r], rtol=0, atol=1e-15)
