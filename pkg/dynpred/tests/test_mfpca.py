from dataclasses import replace

import numpy as np
import pytest

from dynpred.dataset import Dataset, SubjectRecord, align_to_grid, make_landmark_slice
from dynpred.errors import NonEstimable
from dynpred.mfpca import (
    _select_components,
    fit_mfpca,
    fit_ufpca,
    pace_scores,
    project_mfpca,
    trapezoid_weights,
)

GRID = np.linspace(0.0, 1.0, 21)
PHI = np.column_stack([np.sqrt(2) * np.sin(np.pi * GRID), np.sqrt(2) * np.sin(2 * np.pi * GRID)])
LAMBDA = np.array([4.0, 1.0])


def rank_two_process(n: int, noise_var: float, seed: int, copies: int = 1):
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=(n, 2)) * np.sqrt(LAMBDA)
    curves = xi @ PHI.T
    subjects = []
    for i in range(n):
        values = np.column_stack(
            [curves[i] + rng.normal(0.0, np.sqrt(noise_var), len(GRID)) for _ in range(copies)]
        )
        if copies > 1:
            values = np.repeat(values[:, :1], copies, axis=1)
        subjects.append(SubjectRecord(str(i), 2.0, i % 2 == 0, [], GRID, values))
    names = tuple(f"y{q + 1}" for q in range(copies))
    data = Dataset(tuple(subjects), (), names)
    return align_to_grid(make_landmark_slice(data, 1.0), GRID), xi


def inner(a, b):
    return trapezoid_weights(GRID) @ (a * b)


def test_trapezoid_weights():
    np.testing.assert_allclose(trapezoid_weights([0.0, 1.0, 3.0]), [0.5, 1.5, 1.0])
    np.testing.assert_allclose(trapezoid_weights([2.0]), [1.0])


@pytest.mark.parametrize(
    "values,pve,expect",
    [
        ([4.0, 1.0, 0.0], 0.9, (2, 1.0)),
        ([4.0, 1.0, 0.0], 0.5, (1, 0.8)),
        ([4.0, 1.0, 0.0], 0.8, (1, 0.8)),
        ([4.0, 1.0, 0.0], 1.0, (2, 1.0)),
        ([2.0, 1.0, 1.0], 0.9, (3, 1.0)),
    ],
)
def test_select_components(values, pve, expect):
    count, achieved = _select_components(np.array(values), pve)
    assert count == expect[0]
    assert achieved == pytest.approx(expect[1])


def test_select_components_without_variance():
    with pytest.raises(NonEstimable):
        _select_components(np.zeros(3), 0.9)


def test_ufpca_recovers_rank_two_process():
    slice, _ = rank_two_process(300, 0.1, seed=1)
    fit = fit_ufpca(slice, 0, 0.9)
    assert fit.K == 2
    assert fit.pve_achieved >= 0.9
    for k in range(2):
        assert abs(inner(fit.eigenfunctions[:, k], PHI[:, k])) > 0.95
    assert fit.eigenvalues[0] == pytest.approx(4.0, rel=0.25)
    assert fit.noise_var == pytest.approx(0.1, abs=0.05)


def test_pace_scores_track_truth():
    slice, xi = rank_two_process(300, 0.1, seed=2)
    fit = fit_ufpca(slice, 0, 0.9)
    scores = pace_scores(fit, slice, 0)
    for k in range(2):
        assert abs(np.corrcoef(scores[:, k], xi[:, k])[0, 1]) > 0.95


def test_unaligned_slice_rejected():
    slice, _ = rank_two_process(10, 0.1, seed=3)
    with pytest.raises(ValueError):
        fit_ufpca(replace(slice, grid=None), 0)


def test_single_covariate_reduction():
    slice, _ = rank_two_process(300, 0.1, seed=4)
    uni = pace_scores(fit_ufpca(slice, 0, 0.9), slice, 0)
    multi = fit_mfpca(slice, 0.9, 0.9)
    assert multi.covariate_indices == (0,)
    for k in range(multi.K):
        corr = [abs(np.corrcoef(multi.scores[:, k], uni[:, j])[0, 1]) for j in range(2)]
        assert max(corr) > 0.99


def test_duplicated_signal():
    slice, _ = rank_two_process(200, 0.1, seed=5, copies=2)
    uni = pace_scores(fit_ufpca(slice, 0, 0.9), slice, 0)
    multi = fit_mfpca(slice, 0.9, 0.9)
    assert abs(np.corrcoef(multi.scores[:, 0], uni[:, 0])[0, 1]) > 0.99


def test_scores_are_centered_and_projectable():
    slice, _ = rank_two_process(120, 0.1, seed=6)
    multi = fit_mfpca(slice)
    scale = np.abs(multi.scores).max()
    assert np.all(np.abs(multi.scores.mean(axis=0)) < 1e-8 * scale)
    np.testing.assert_allclose(project_mfpca(multi, slice), multi.scores, atol=1e-10)
    assert project_mfpca(multi, slice.take([])).shape == (0, multi.K)


def test_full_reconstruction_matches_univariate_expansion():
    slice, _ = rank_two_process(80, 0.1, seed=7)
    multi = fit_mfpca(slice)
    uni = multi.univariate[0]
    expansion = uni.mean + pace_scores(uni, slice, 0) @ uni.eigenfunctions.T
    rebuilt = multi.reconstruct(len(multi.eigenvalues))[0]
    np.testing.assert_allclose(rebuilt, expansion, atol=1e-8)
    frame = multi.eigenfunction_frame("y1")
    assert list(frame.columns) == ["time", *(f"psi_{k + 1}" for k in range(multi.K))]


def test_mfpca_needs_subjects():
    slice, _ = rank_two_process(5, 0.1, seed=8)
    with pytest.raises(NonEstimable):
        fit_mfpca(slice.take([0]))


def test_reconstruction_error_shrinks_with_components():
    slice, _ = rank_two_process(80, 0.1, seed=9, copies=2)
    multi = fit_mfpca(slice, 0.9, 1.0)
    expansions = [
        uni.mean + pace_scores(uni, slice, q) @ uni.eigenfunctions.T
        for uni, q in zip(multi.univariate, multi.covariate_indices)
    ]

    def error(k):
        rebuilt = multi.reconstruct(k)
        return sum(
            np.sum((r - e) ** 2 @ uni.weights)
            for uni, r, e in zip(multi.univariate, rebuilt, expansions)
        )

    errors = np.array([error(k) for k in range(len(multi.eigenvalues) + 1)])
    assert np.all(np.diff(errors) <= 1e-9 * errors[0])
    assert errors[-1] == pytest.approx(0.0, abs=1e-8)


def test_eigenfunction_signs():
    slice, _ = rank_two_process(100, 0.1, seed=10, copies=2)
    multi = fit_mfpca(slice)
    for uni in multi.univariate:
        integrals = uni.weights @ uni.eigenfunctions
        tiny = np.abs(integrals) <= 1e-8 * np.sqrt(uni.weights.sum())
        assert np.all((integrals > 0) | (tiny & (uni.eigenfunctions[0] >= 0)))
    stacked = sum(uni.weights @ multi.eigenfunctions(uni.name) for uni in multi.univariate)
    first = multi.eigenfunctions(multi.univariate[0].name)[0]
    assert np.all((stacked > 0) | ((np.abs(stacked) <= 1e-8) & (first >= 0)))


def test_full_variance_keeps_every_component():
    slice, _ = rank_two_process(80, 0.1, seed=11)
    full = fit_mfpca(slice, 1.0, 1.0)
    assert full.pve_achieved == pytest.approx(1.0)
    assert full.K == np.count_nonzero(full.eigenvalues > 1e-10 * full.eigenvalues.max())
    assert full.K >= fit_mfpca(slice, 0.9, 0.9).K
    for uni in full.univariate:
        assert uni.pve_achieved == pytest.approx(1.0)
        assert uni.K == np.count_nonzero(uni.all_eigenvalues > 1e-10 * uni.all_eigenvalues.max())
