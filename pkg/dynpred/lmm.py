"""Random-intercept and random-slope linear mixed models, one covariate at a time."""

import logging

from dataclasses import dataclass, replace
from typing import Sequence, Tuple, Union

import numpy as np

from scipy import optimize

from .dataset import LandmarkSlice
from .errors import NonEstimable

LOGGER = logging.getLogger(__name__)

FULL = "full"
DIAGONAL = "diagonal"
INTERCEPT = "intercept"
STRUCTURES = (FULL, DIAGONAL, INTERCEPT)

LOG_DIAG_BOUNDS = (-20.0, 10.0)
SIGMA2_FLOOR = 1e-12
MAX_ITER = 500


@dataclass(frozen=True, eq=False)
class LmmData:
    """
    Per-subject sufficient statistics for the design Z = W = [1, t].

    S[i] = ZᵀZ, s[i] = Zᵀy and q[i] = yᵀy over the subject's non-missing rows.
    """

    ids: Tuple[str, ...]
    counts: np.ndarray
    S: np.ndarray
    s: np.ndarray
    q: np.ndarray

    @classmethod
    def from_arrays(
        cls, ids: Sequence[str], times: Sequence[np.ndarray], values: Sequence[np.ndarray]
    ) -> "LmmData":
        n = len(ids)
        counts = np.zeros(n, dtype=int)
        S = np.zeros((n, 2, 2))
        s = np.zeros((n, 2))
        q = np.zeros(n)
        for pos, (t, y) in enumerate(zip(times, values)):
            t = np.asarray(t, dtype=float)
            y = np.asarray(y, dtype=float)
            present = ~np.isnan(y)
            t, y = t[present], y[present]
            counts[pos] = len(y)
            S[pos] = [[len(t), t.sum()], [t.sum(), t @ t]]
            s[pos] = [y.sum(), t @ y]
            q[pos] = y @ y
        return cls(tuple(ids), counts, S, s, q)

    @classmethod
    def from_slice(cls, slice: LandmarkSlice, covariate_index: int) -> "LmmData":
        return cls.from_arrays(
            slice.ids,
            [subj.visits for subj in slice.subjects],
            [subj.longitudinal[:, covariate_index] for subj in slice.subjects],
        )

    def take(self, indices: Sequence[int]) -> "LmmData":
        indices = np.asarray(indices, dtype=int)
        return LmmData(
            tuple(self.ids[i] for i in indices),
            self.counts[indices],
            self.S[indices],
            self.s[indices],
            self.q[indices],
        )

    @property
    def n_obs(self) -> int:
        return int(self.counts.sum())

    @property
    def n_subjects(self) -> int:
        return int(np.count_nonzero(self.counts))


@dataclass(frozen=True, eq=False)
class LmmFit:
    beta: np.ndarray
    Sigma: np.ndarray
    sigma2: float
    loglik: float
    converged: bool
    n_subjects: int
    n_obs: int
    structure: str = FULL
    fallback_level: int = 0

    def to_text(self) -> str:
        return "\n".join(
            (
                f"structure: {self.structure}",
                f"fallback_level: {self.fallback_level}",
                f"beta: {self.beta[0]!r} {self.beta[1]!r}",
                "Sigma: {!r} {!r}; {!r} {!r}".format(*self.Sigma.ravel()),
                f"sigma2: {self.sigma2!r}",
                f"loglik: {self.loglik!r}",
                f"converged: {'true' if self.converged else 'false'}",
                f"n_subjects: {self.n_subjects}",
                f"n_obs: {self.n_obs}",
            )
        )


@dataclass(frozen=True, eq=False)
class RandomEffects:
    ids: Tuple[str, ...]
    values: np.ndarray

    @property
    def intercepts(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def slopes(self) -> np.ndarray:
        return self.values[:, 1]


def _woodbury(data: LmmData, L: np.ndarray):
    # M_i = I + Z L Lᵀ Zᵀ; A_i = I + Lᵀ S_i L
    SL = data.S @ L
    A = np.eye(2) + np.einsum("ji,njk->nik", L, SL)
    _, logdet = np.linalg.slogdet(A)
    Ainv = np.linalg.inv(A)
    SLA = SL @ Ainv
    ZMZ = data.S - SLA @ np.swapaxes(SL, 1, 2)
    Ls = data.s @ L
    ZMy = data.s - np.einsum("nij,nj->ni", SLA, Ls)
    yMy = data.q - np.einsum("ni,nij,nj->n", Ls, Ainv, Ls)
    return ZMZ, ZMy, yMy, logdet


def _root(D: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((D + D.T) / 2)
    return v * np.sqrt(np.clip(w, 0.0, None))


def lmm_loglik(data: LmmData, beta: np.ndarray, Sigma: np.ndarray, sigma2: float) -> float:
    """Marginal Gaussian log-likelihood of the observed values."""
    beta = np.asarray(beta, dtype=float)
    L = _root(np.asarray(Sigma, dtype=float) / sigma2)
    g = data.s - data.S @ beta
    rr = data.q - 2 * data.s @ beta + np.einsum("i,nij,j->n", beta, data.S, beta)
    SL = data.S @ L
    A = np.eye(2) + np.einsum("ji,njk->nik", L, SL)
    _, logdet = np.linalg.slogdet(A)
    Lg = g @ L
    quad = (rr - np.einsum("ni,nij,nj->n", Lg, np.linalg.inv(A), Lg)) / sigma2
    m = data.counts
    return float(-0.5 * np.sum(m * np.log(2 * np.pi * sigma2) + logdet + quad))


def _cholesky_factor(theta: np.ndarray, structure: str) -> np.ndarray:
    match structure:
        case "full":
            return np.array([[np.exp(theta[0]), 0.0], [theta[1], np.exp(theta[2])]])
        case "diagonal":
            return np.diag(np.exp(theta))
        case "intercept":
            return np.array([[np.exp(theta[0]), 0.0], [0.0, 0.0]])
    raise ValueError(f"Unsupported covariance structure: {structure!r}")


def _profile(data: LmmData, L: np.ndarray):
    ZMZ, ZMy, yMy, logdet = _woodbury(data, L)
    XtX = ZMZ.sum(axis=0)
    Xty = ZMy.sum(axis=0)
    beta = np.linalg.solve(XtX, Xty)
    rss = yMy.sum() - 2 * beta @ Xty + beta @ XtX @ beta
    N = data.n_obs
    sigma2 = max(rss / N, SIGMA2_FLOOR)
    loglik = -0.5 * (N * np.log(2 * np.pi * sigma2) + logdet.sum() + N)
    return beta, sigma2, loglik


def _check_estimable(data: LmmData):
    if data.n_obs < 3:
        raise NonEstimable(f"Too few observations for a mixed model: {data.n_obs}")
    if data.n_subjects < 2:
        raise NonEstimable("Mixed model requires at least two subjects with data")
    if np.linalg.matrix_rank(data.S.sum(axis=0)) < 2:
        raise NonEstimable("No variation in the time variable")


def fit_lmm_data(data: LmmData, structure: str = FULL) -> LmmFit:
    if structure not in STRUCTURES:
        raise ValueError(f"Unsupported covariance structure: {structure!r}")
    _check_estimable(data)
    N = data.n_obs

    XtX = data.S.sum(axis=0)
    beta_ols = np.linalg.solve(XtX, data.s.sum(axis=0))
    rss = data.q.sum() - 2 * beta_ols @ data.s.sum(axis=0) + beta_ols @ XtX @ beta_ols
    if rss <= 1e-12 * max(1.0, data.q.sum()):
        # noiseless common trajectory: no variance left to attribute
        return LmmFit(
            beta=beta_ols,
            Sigma=np.zeros((2, 2)),
            sigma2=SIGMA2_FLOOR,
            loglik=float("inf"),
            converged=True,
            n_subjects=data.n_subjects,
            n_obs=N,
            structure=structure,
        )

    def objective(theta):
        _, _, loglik = _profile(data, _cholesky_factor(theta, structure))
        return -loglik / N

    match structure:
        case "full":
            theta0 = np.zeros(3)
            bounds = [LOG_DIAG_BOUNDS, (None, None), LOG_DIAG_BOUNDS]
        case "diagonal":
            theta0 = np.zeros(2)
            bounds = [LOG_DIAG_BOUNDS, LOG_DIAG_BOUNDS]
        case _:
            theta0 = np.zeros(1)
            bounds = [LOG_DIAG_BOUNDS]
    with np.errstate(all="ignore"):
        res = optimize.minimize(
            objective,
            theta0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": MAX_ITER, "ftol": 1e-12, "gtol": 1e-9},
        )
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        return LmmFit(
            beta=beta_ols,
            Sigma=np.zeros((2, 2)),
            sigma2=max(rss / N, SIGMA2_FLOOR),
            loglik=float("nan"),
            converged=False,
            n_subjects=data.n_subjects,
            n_obs=N,
            structure=structure,
        )
    L = _cholesky_factor(res.x, structure)
    beta, sigma2, loglik = _profile(data, L)
    Sigma = sigma2 * (L @ L.T)
    w, v = np.linalg.eigh((Sigma + Sigma.T) / 2)
    Sigma = (v * np.clip(w, 0.0, None)) @ v.T
    # L-BFGS-B reports line-search stalls at a flat optimum as failures
    converged = bool(res.success) or bool(np.max(np.abs(res.jac)) < 1e-5)
    return LmmFit(
        beta=beta,
        Sigma=Sigma,
        sigma2=float(sigma2),
        loglik=float(loglik),
        converged=converged,
        n_subjects=data.n_subjects,
        n_obs=N,
        structure=structure,
    )


def fit_lmm(slice: LandmarkSlice, covariate_index: int, structure: str = FULL) -> LmmFit:
    return fit_lmm_data(LmmData.from_slice(slice, covariate_index), structure)


def fit_lmm_ladder(
    source: Union[LandmarkSlice, LmmData], covariate_index: int = None
) -> LmmFit:
    data = (
        source if isinstance(source, LmmData) else LmmData.from_slice(source, covariate_index)
    )
    fit = None
    for level, structure in enumerate(STRUCTURES):
        fit = fit_lmm_data(data, structure)
        if fit.converged:
            if level:
                LOGGER.debug("Mixed model fell back to %s covariance", structure)
            break
    else:
        LOGGER.warning("Mixed model did not converge with any covariance structure")
    return replace(fit, fallback_level=STRUCTURES.index(fit.structure))


def blup(fit: LmmFit, data: LmmData) -> RandomEffects:
    if not data.ids:
        return RandomEffects((), np.zeros((0, 2)))
    D = fit.Sigma / fit.sigma2
    L = _root(D)
    g = data.s - data.S @ fit.beta
    SL = data.S @ L
    A = np.eye(2) + np.einsum("ji,njk->nik", L, SL)
    Lg = g @ L
    corr = np.einsum("nij,nj->ni", SL, np.linalg.solve(A, Lg[..., None])[..., 0])
    values = (g - corr) @ D.T
    return RandomEffects(data.ids, values)


def predict_blup(fit: LmmFit, slice: LandmarkSlice, covariate_index: int) -> RandomEffects:
    return blup(fit, LmmData.from_slice(slice, covariate_index))


def predict_blup_newdata(
    fit: LmmFit, newslice: LandmarkSlice, covariate_index: int
) -> RandomEffects:
    return blup(fit, LmmData.from_slice(newslice, covariate_index))
