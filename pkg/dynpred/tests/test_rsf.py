import numpy as np
import pytest

from lifelines.statistics import logrank_test

from dynpred.dataset import Dataset, SubjectRecord, make_landmark_slice
from dynpred.errors import FitFailed, NonEstimable
from dynpred.rsf import (
    ForestConfig,
    candidate_thresholds,
    dynamic_feature_names,
    fit_dynforest,
    fit_rsf,
    logrank_statistics,
    nelson_aalen,
    predict_forest_survival,
)


def signal_problem(n: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    times = rng.exponential(np.exp(-1.5 * X[:, 0]))
    censor = rng.exponential(3.0, n)
    return X, np.minimum(times, censor), times <= censor


def test_nelson_aalen():
    times, chf = nelson_aalen(np.array([1.0, 2.0, 2.0, 3.0]), np.array([1, 1, 0, 1], bool))
    np.testing.assert_allclose(times, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(chf, [1 / 4, 1 / 4 + 1 / 3, 1 / 4 + 1 / 3 + 1])
    times, chf = nelson_aalen(np.array([1.0, 2.0]), np.zeros(2, bool))
    assert len(times) == len(chf) == 0
    # five subjects, events at 1 and 2
    _, chf = nelson_aalen(np.arange(1.0, 6.0), np.array([1, 1, 0, 0, 0], bool))
    np.testing.assert_allclose(chf, [0.2, 0.45], atol=1e-10)


@pytest.mark.parametrize(
    "values,max_candidates,expect",
    [
        ([3.0, 1.0, 2.0, 2.0], 50, [1.5, 2.5]),
        # constant column cannot split
        ([4.0, 4.0, 4.0], 50, []),
        ([0.0, 1.0], 50, [0.5]),
    ],
)
def test_candidate_thresholds(values, max_candidates, expect):
    np.testing.assert_allclose(candidate_thresholds(np.array(values), max_candidates), expect)


def test_candidate_thresholds_use_deciles():
    values = np.arange(100.0)
    cuts = candidate_thresholds(values, 10)
    np.testing.assert_allclose(cuts, np.quantile(values, np.linspace(0.1, 0.9, 9)))


def test_logrank_matches_lifelines():
    X, times, events = signal_problem(60, seed=1)
    thresholds = np.quantile(X[:, 0], [0.25, 0.5, 0.75])
    stats = logrank_statistics(X[:, 0], thresholds, times, events)
    for c, stat in zip(thresholds, stats):
        left = X[:, 0] <= c
        expect = logrank_test(
            times[left], times[~left], event_observed_A=events[left], event_observed_B=events[~left]
        ).test_statistic
        assert stat == pytest.approx(expect, rel=1e-8)


def test_logrank_without_events():
    stats = logrank_statistics(np.arange(4.0), np.array([1.5]), np.arange(4.0), np.zeros(4, bool))
    np.testing.assert_array_equal(stats, [0.0])


def test_forest_presets():
    funrsf = ForestConfig.funrsf()
    assert funrsf.n_trees == 1000
    assert funrsf.min_node_subjects == (15,)
    dynforest = ForestConfig.dynforest(n_trees=10)
    assert dynforest.n_trees == 10
    assert dynforest.min_node_subjects == (15, 30, 50)
    assert dynforest.min_node_events == 5


def test_forest_config_from_dict():
    config = ForestConfig.from_dict({"n_trees": 5, "min_node_subjects": [3, 6]})
    assert config.min_node_subjects == (3, 6)
    assert config.serialize()["min_node_subjects"] == [3, 6]
    based = ForestConfig.from_dict({"seed": 4}, ForestConfig.dynforest())
    assert based.n_trees == 200
    assert based.seed == 4


@pytest.mark.parametrize(
    "value",
    [
        # unknown key
        {"trees": 5},
        {"n_trees": 0},
        {"mtry": 0},
        # ladder must increase
        {"min_node_subjects": [30, 15]},
        {"min_node_events": -1},
        {"debug": "yes"},
        {"max_split_candidates": 1},
    ],
)
def test_forest_config_invalid(value):
    with pytest.raises(ValueError):
        ForestConfig.from_dict(value)


def test_resolve_mtry():
    assert ForestConfig().resolve_mtry(10) == 4
    assert ForestConfig(mtry=20).resolve_mtry(3) == 3


def test_stump_forest_is_nelson_aalen():
    X, times, events = signal_problem(30, seed=2)
    config = ForestConfig(n_trees=3, min_node_subjects=(20,), bootstrap=False)
    fit = fit_rsf(X, times, events, config)
    assert all(tree.is_stump for tree in fit.trees)
    na_times, chf = nelson_aalen(times, events)
    horizons = np.array([na_times[2], na_times[-1] + 1.0])
    pred = predict_forest_survival(fit, X[:4], 0.0, horizons)
    np.testing.assert_allclose(pred.survival[:, 0], np.exp(-chf[2]))
    np.testing.assert_allclose(pred.survival[:, 1], np.exp(-chf[-1]))
    assert fit.oob_fraction() == 0.0


def test_forest_is_deterministic():
    X, times, events = signal_problem(80, seed=3)
    config = ForestConfig(n_trees=6, min_node_subjects=(5,), seed=9)
    first = predict_forest_survival(fit_rsf(X, times, events, config), X, 0.0, [0.5, 1.0])
    again = predict_forest_survival(fit_rsf(X, times, events, config), X, 0.0, [0.5, 1.0])
    threaded = fit_rsf(X, times, events, ForestConfig.from_dict({"n_jobs": 2}, config))
    parallel = predict_forest_survival(threaded, X, 0.0, [0.5, 1.0])
    np.testing.assert_array_equal(first.survival, again.survival)
    np.testing.assert_array_equal(first.survival, parallel.survival)
    twins = predict_forest_survival(threaded, np.vstack([X[:1], X[:1]]), 0.0, [0.5, 1.0])
    np.testing.assert_array_equal(twins.survival[0], twins.survival[1])


def test_forest_finds_signal():
    X, times, events = signal_problem(150, seed=4)
    config = ForestConfig(n_trees=20, min_node_subjects=(10,), mtry=3, seed=1)
    fit = fit_rsf(X, times, events, config, feature_names=("signal", "noise1", "noise2"))
    counts = fit.root_split_counts()
    assert counts.idxmax() == "signal"
    pred = predict_forest_survival(fit, X, 0.0, [1.0])
    pred.check()
    # higher signal means higher hazard
    assert np.corrcoef(X[:, 0], pred.risk_scores)[0, 1] > 0.5
    assert fit.oob_fraction() == pytest.approx(np.exp(-1), abs=0.05)


def test_split_audit():
    X, times, events = signal_problem(60, seed=5)
    fit = fit_rsf(X, times, events, ForestConfig(n_trees=2, min_node_subjects=(10,), debug=True))
    frame = fit.split_frame()
    assert {"tree", "node", "feature", "threshold", "statistic", "chosen"} <= set(frame.columns)
    chosen = frame[frame["chosen"]]
    assert len(chosen) == sum(int(np.sum(tree.feature >= 0)) for tree in fit.trees)
    assert (chosen["n_subjects"] >= 20).all()
    assert (~frame["chosen"]).any()


def test_forest_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_rsf(np.array([[np.nan], [1.0]]), [1.0, 2.0], [True, True])
    with pytest.raises(NonEstimable):
        fit_rsf(np.ones((1, 1)), [1.0], [True])
    X, times, events = signal_problem(20, seed=6)
    fit = fit_rsf(X, times, events, ForestConfig(n_trees=2))
    with pytest.raises(ValueError):
        predict_forest_survival(fit, X, 1.0, [1.0])
    assert predict_forest_survival(fit, X[:0], 0.0, [1.0]).n == 0


def test_dynforest_on_slice(linear_dataset):
    slice = make_landmark_slice(linear_dataset, 2.0)
    config = ForestConfig.dynforest(n_trees=3, min_node_subjects=(8, 12), min_node_events=2)
    fit = fit_dynforest(slice, config=config)
    assert fit.feature_names == dynamic_feature_names(slice) == ("x1", "y1:intercept", "y1:slope")
    assert fit.n_baseline == 1
    assert fit.failed_trees() == 0
    pred = predict_forest_survival(fit, slice, 2.0, [3.0, 5.0])
    pred.check()
    assert pred.ids == slice.ids
    static = fit_rsf(slice.baseline_matrix(), slice.times, slice.events, ForestConfig(n_trees=2))
    with pytest.raises(ValueError):
        predict_forest_survival(static, slice, 2.0, [3.0])


def test_dynforest_fails_without_estimable_models(dataset_factory):
    # every subject has only the baseline visit
    data = dataset_factory(
        [(2.0 + 0.1 * i, i % 3 != 0, [], [0.0], [float(i % 7)]) for i in range(60)],
        baseline_names=(),
    )
    slice = make_landmark_slice(data, 1.0)
    config = ForestConfig.dynforest(n_trees=3, min_node_subjects=(8, 12), min_node_events=2)
    with pytest.raises(FitFailed):
        fit_dynforest(slice, config=config)


def test_doubling_trees_changes_little():
    X, times, events = signal_problem(120, seed=8)
    small = fit_rsf(X, times, events, ForestConfig(n_trees=60, min_node_subjects=(10,), seed=4))
    large = fit_rsf(X, times, events, ForestConfig(n_trees=120, min_node_subjects=(10,), seed=4))
    first = predict_forest_survival(small, X, 0.0, [0.5, 1.0]).survival
    second = predict_forest_survival(large, X, 0.0, [0.5, 1.0]).survival
    assert np.mean(np.abs(first - second)) < 0.05


def test_dynforest_without_markers_is_rsf():
    X, times, events = signal_problem(60, seed=7)
    times = times + 1.0
    subjects = [
        SubjectRecord(str(i), times[i], events[i], X[i], [0.0], np.zeros((1, 0)))
        for i in range(60)
    ]
    slice = make_landmark_slice(Dataset(tuple(subjects), ("a", "b", "c"), ()), 0.5)
    config = ForestConfig(n_trees=5, min_node_subjects=(5,), seed=2)
    dynamic = predict_forest_survival(fit_dynforest(slice, config=config), slice, 0.5, [1.5, 2.5])
    static = predict_forest_survival(fit_rsf(X, times, events, config), X, 0.5, [1.5, 2.5])
    np.testing.assert_array_equal(dynamic.survival, static.survival)


def test_dynforest_splits_on_the_driving_slope(dataset_factory):
    rng = np.random.default_rng(12)
    rows = []
    for _ in range(150):
        intercept, slope = rng.normal(size=2)
        time = 2.0 + rng.exponential(np.exp(-1.5 * slope))
        visits = np.arange(0.0, 2.01, 0.5)
        values = intercept + slope * visits + rng.normal(0.0, 0.1, len(visits))
        rows.append((time, bool(rng.uniform() < 0.8), [rng.normal()], visits, values))
    slice = make_landmark_slice(dataset_factory(rows), 2.0)
    config = ForestConfig.dynforest(n_trees=6, min_node_subjects=(30,), mtry=2, seed=5)
    counts = fit_dynforest(slice, config=config).root_split_counts()
    assert counts.idxmax() == "y1:slope"
    assert counts["y1:slope"] >= 4
