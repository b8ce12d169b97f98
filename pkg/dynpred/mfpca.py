import logging

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import pandas as pd

from joblib import Parallel, delayed

from .dataset import LandmarkSlice
from .errors import NonEstimable

LOGGER = logging.getLogger(__name__)

DEFAULT_PVE = 0.9
SMOOTH_NEIGHBOURS = 2


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if len(grid) < 2:
        return np.ones(len(grid))
    gaps = np.diff(grid)
    weights = np.zeros(len(grid))
    weights[:-1] += gaps / 2
    weights[1:] += gaps / 2
    return weights


def _select_components(values: np.ndarray, pve: float) -> Tuple[int, float]:
    total = values.sum()
    if not total > 0:
        raise NonEstimable("No variance to decompose")
    positive = int(np.count_nonzero(values > 1e-10 * values.max()))
    if pve >= 1.0:
        count = positive
    else:
        cum = np.cumsum(values) / total
        count = min(int(np.searchsorted(cum, pve - 1e-12)) + 1, positive)
    count = max(count, 1)
    return count, float(values[:count].sum() / total)


def _orient(vectors: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # flip so the quadrature integral (else the first value) is positive
    out = np.array(vectors)
    for k in range(out.shape[1]):
        integral = weights @ out[:, k]
        ref = integral if abs(integral) > 1e-8 * np.sqrt(weights.sum()) else out[0, k]
        if ref < 0:
            out[:, k] = -out[:, k]
    return out


@dataclass(frozen=True, eq=False)
class UfpcaFit:
    name: str
    grid: np.ndarray
    mean: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    noise_var: float
    pve_achieved: float
    all_eigenvalues: np.ndarray

    @property
    def K(self) -> int:
        return len(self.eigenvalues)

    @property
    def weights(self) -> np.ndarray:
        return trapezoid_weights(self.grid)


def _grid_matrix(slice: LandmarkSlice, covariate_index: int) -> np.ndarray:
    if slice.grid is None:
        raise ValueError("Slice must be aligned to a grid first")
    Y = np.full((slice.n, len(slice.grid)), np.nan)
    for row, subj in enumerate(slice.subjects):
        cols = np.searchsorted(slice.grid, subj.visits)
        Y[row, cols] = subj.longitudinal[:, covariate_index]
    return Y


def _smooth_diagonal(cov: np.ndarray, grid: np.ndarray) -> np.ndarray:
    G = len(grid)
    diag = np.empty(G)
    for i in range(G):
        nbrs = [j for j in range(i - SMOOTH_NEIGHBOURS, i + SMOOTH_NEIGHBOURS + 1)
                if 0 <= j < G and j != i]
        x = grid[nbrs] - grid[i]
        degree = min(2, len(nbrs) - 1)
        coef = np.polyfit(x, cov[i, nbrs], degree)
        diag[i] = np.polyval(coef, 0.0)
    return diag


def fit_ufpca(
    slice: LandmarkSlice, covariate_index: int, pve1: float = DEFAULT_PVE
) -> UfpcaFit:
    name = slice.longitudinal_names[covariate_index]
    Y = _grid_matrix(slice, covariate_index)
    grid = np.asarray(slice.grid, dtype=float)

    sparse = np.count_nonzero(~np.isnan(Y), axis=0) < 2
    if sparse.any():
        LOGGER.warning(
            "Dropping %d grid points with fewer than 2 observations for %r",
            int(sparse.sum()),
            name,
        )
        Y, grid = Y[:, ~sparse], grid[~sparse]
    # grid pairs never observed together leave holes in the covariance
    while True:
        if len(grid) < 2:
            raise NonEstimable(f"Covariance of {name!r} is not estimable")
        cov = pd.DataFrame(Y).cov(min_periods=2).to_numpy()
        holes = np.isnan(cov).sum(axis=0)
        if not holes.any():
            break
        worst = int(np.argmax(holes))
        LOGGER.warning("Dropping grid point %r of %r: sparse covariance", grid[worst], name)
        Y = np.delete(Y, worst, axis=1)
        grid = np.delete(grid, worst)

    mean = np.nanmean(Y, axis=0)
    raw_diag = np.diag(cov).copy()
    smooth_diag = _smooth_diagonal(cov, grid)
    noise_var = max(float(np.mean(raw_diag - smooth_diag)), 0.0)
    cov = np.array(cov)
    np.fill_diagonal(cov, smooth_diag)

    weights = trapezoid_weights(grid)
    root_w = np.sqrt(weights)
    values, vectors = np.linalg.eigh(root_w[:, None] * cov * root_w[None, :])
    values = np.clip(values[::-1], 0.0, None)
    vectors = vectors[:, ::-1] / root_w[:, None]
    K, pve = _select_components(values, pve1)
    eigenfunctions = _orient(vectors[:, :K], weights)
    return UfpcaFit(
        name=name,
        grid=grid,
        mean=mean,
        eigenfunctions=eigenfunctions,
        eigenvalues=values[:K],
        noise_var=noise_var,
        pve_achieved=pve,
        all_eigenvalues=values,
    )


def pace_scores(fit: UfpcaFit, slice: LandmarkSlice, covariate_index: int) -> np.ndarray:
    """
    Conditional-expectation scores for each subject, from its own observed points.

    Subjects without observations on the fitted grid get the prior mean (zero).
    """
    scores = np.zeros((slice.n, fit.K))
    lam = fit.eigenvalues
    for row, subj in enumerate(slice.subjects):
        values = subj.longitudinal[:, covariate_index]
        cols = np.searchsorted(fit.grid, subj.visits)
        cols = np.clip(cols, 0, len(fit.grid) - 1)
        keep = (fit.grid[cols] == subj.visits) & ~np.isnan(values)
        if not keep.any():
            continue
        cols = cols[keep]
        phi = fit.eigenfunctions[cols]
        resid = values[keep] - fit.mean[cols]
        cov = (phi * lam) @ phi.T + fit.noise_var * np.eye(len(cols))
        scores[row] = lam * (phi.T @ np.linalg.pinv(cov, rcond=1e-10, hermitian=True) @ resid)
    return scores


@dataclass(frozen=True, eq=False)
class MfpcaFit:
    univariate: Tuple[UfpcaFit, ...]
    covariate_indices: Tuple[int, ...]
    score_means: np.ndarray
    combination: np.ndarray
    eigenvalues: np.ndarray
    K: int
    all_scores: np.ndarray
    ids: Tuple[str, ...]
    pve_achieved: float

    @property
    def blocks(self) -> Tuple[slice, ...]:
        out = []
        start = 0
        for uni in self.univariate:
            out.append(slice(start, start + uni.K))
            start += uni.K
        return tuple(out)

    def _position(self, covariate: Union[int, str]) -> int:
        if isinstance(covariate, str):
            names = [uni.name for uni in self.univariate]
            if covariate not in names:
                raise ValueError(f"Covariate not part of the decomposition: {covariate!r}")
            return names.index(covariate)
        return self.covariate_indices.index(covariate)

    def eigenfunctions(self, covariate: Union[int, str], n_components: int = None) -> np.ndarray:
        pos = self._position(covariate)
        n_components = self.K if n_components is None else n_components
        uni = self.univariate[pos]
        return uni.eigenfunctions @ self.combination[self.blocks[pos], :n_components]

    def reconstruct(self, n_components: int) -> Tuple[np.ndarray, ...]:
        """Training trajectories rebuilt from the leading multivariate components."""
        if not 0 <= n_components <= len(self.eigenvalues):
            raise ValueError(f"Invalid component count: {n_components}")
        leading = self.all_scores[:, :n_components]
        out = []
        for pos, uni in enumerate(self.univariate):
            psi = self.eigenfunctions(uni.name, n_components)
            block_mean = uni.eigenfunctions @ self.score_means[self.blocks[pos]]
            out.append(uni.mean + block_mean + leading @ psi.T)
        return tuple(out)

    @property
    def scores(self) -> np.ndarray:
        return self.all_scores[:, : self.K]

    def eigenfunction_frame(self, covariate: Union[int, str]) -> pd.DataFrame:
        uni = self.univariate[self._position(covariate)]
        psi = self.eigenfunctions(covariate)
        frame = pd.DataFrame({"time": uni.grid})
        for k in range(psi.shape[1]):
            frame[f"psi_{k + 1}"] = psi[:, k]
        return frame


def _try_ufpca(slice: LandmarkSlice, covariate_index: int, pve1: float):
    try:
        return fit_ufpca(slice, covariate_index, pve1)
    except NonEstimable as err:
        LOGGER.warning(
            "Dropping covariate %r from MFPCA: %s",
            slice.longitudinal_names[covariate_index],
            err.message,
        )
        return None


def _stack_scores(
    univariate: Sequence[UfpcaFit], indices: Sequence[int], slice: LandmarkSlice
) -> np.ndarray:
    blocks = [pace_scores(uni, slice, q) for uni, q in zip(univariate, indices)]
    return np.hstack(blocks) if blocks else np.zeros((slice.n, 0))


def fit_mfpca(
    slice: LandmarkSlice,
    pve1: float = DEFAULT_PVE,
    pve2: float = DEFAULT_PVE,
    n_jobs: int = 1,
) -> MfpcaFit:
    if slice.n < 2:
        raise NonEstimable("MFPCA requires at least two subjects")
    fits = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_try_ufpca)(slice, q, pve1) for q in range(slice.Q)
    )
    indices = tuple(q for q, fit in enumerate(fits) if fit is not None)
    univariate = tuple(fit for fit in fits if fit is not None)
    if not univariate:
        raise NonEstimable("No longitudinal covariate could be decomposed")
    if len(univariate) < slice.Q:
        LOGGER.warning("MFPCA dropped %d of %d covariates", slice.Q - len(indices), slice.Q)

    xi = _stack_scores(univariate, indices, slice)
    score_means = xi.mean(axis=0)
    centered = xi - score_means
    values, vectors = np.linalg.eigh(centered.T @ centered / (slice.n - 1))
    values = np.clip(values[::-1], 0.0, None)
    vectors = vectors[:, ::-1]
    K, pve = _select_components(values, pve2)

    # orient each multivariate eigenfunction by its stacked quadrature integral
    integrals = np.zeros(vectors.shape[1])
    firsts = np.zeros(vectors.shape[1])
    start = 0
    for pos, uni in enumerate(univariate):
        block = vectors[start:start + uni.K]
        psi = uni.eigenfunctions @ block
        integrals += uni.weights @ psi
        if pos == 0:
            firsts = psi[0]
        start += uni.K
    for k in range(vectors.shape[1]):
        ref = integrals[k] if abs(integrals[k]) > 1e-8 else firsts[k]
        if ref < 0:
            vectors[:, k] = -vectors[:, k]

    return MfpcaFit(
        univariate=univariate,
        covariate_indices=indices,
        score_means=score_means,
        combination=vectors,
        eigenvalues=values,
        K=K,
        all_scores=centered @ vectors,
        ids=slice.ids,
        pve_achieved=pve,
    )


def project_mfpca(fit: MfpcaFit, newslice: LandmarkSlice) -> np.ndarray:
    if not newslice.n:
        return np.zeros((0, fit.K))
    xi = _stack_scores(fit.univariate, fit.covariate_indices, newslice)
    return (xi - fit.score_means) @ fit.combination[:, : fit.K]
