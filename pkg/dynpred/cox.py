import logging

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import pandas as pd

from joblib import Parallel, delayed
from sklearn.model_selection import KFold, StratifiedKFold

from .errors import EstimationError, MonotoneLikelihood, NonEstimable
from .prediction import SurvivalPrediction

LOGGER = logging.getLogger(__name__)

MAX_ITER = 50
SCORE_TOL = 1e-7
DIVERGENCE_BOUND = 20.0
FLAT_INFORMATION = 1e-6
DEFAULT_LAMBDA_GRID = tuple(np.logspace(-3, 3, 30))


def partial_loglik(
    features: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    beta: np.ndarray,
    derivatives: bool = True,
):
    """
    Breslow partial log-likelihood, with its score and information when requested.

    Returns `(loglik, score, information)`; the last two are None without derivatives.
    """
    X = np.asarray(features, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    order = np.argsort(-times, kind="stable")
    X, t, d = X[order], times[order], events[order]
    eta = X @ np.asarray(beta, dtype=float)
    shift = eta.max() if len(eta) else 0.0
    w = np.exp(eta - shift)
    # risk set of row i: every row with time >= t_i, ties included
    ends = np.searchsorted(-t, -t, side="right") - 1
    S0 = np.cumsum(w)[ends][d]
    loglik = float(np.sum(eta[d] - shift - np.log(S0)))
    if not derivatives:
        return loglik, None, None
    S1 = np.cumsum(w[:, None] * X, axis=0)[ends][d]
    S2 = np.cumsum(w[:, None, None] * X[:, :, None] * X[:, None, :], axis=0)[ends][d]
    mean = S1 / S0[:, None]
    score = np.sum(X[d] - mean, axis=0)
    info = np.sum(S2 / S0[:, None, None], axis=0) - mean.T @ mean
    return loglik, score, info


def breslow_increments(
    eta: np.ndarray, times: np.ndarray, events: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    event_times = np.unique(times[events])
    if not len(event_times):
        return event_times, np.zeros(0)
    risk = np.exp(eta)
    order = np.argsort(times)
    sorted_t = times[order]
    tail = np.cumsum(risk[order][::-1])[::-1]
    at_risk = tail[np.searchsorted(sorted_t, event_times, side="left")]
    deaths = np.array([np.count_nonzero(times[events] == tk) for tk in event_times])
    return event_times, deaths / at_risk


@dataclass(frozen=True, eq=False)
class CoxFit:
    coefficients: np.ndarray
    hazard_times: np.ndarray
    hazard_increments: np.ndarray
    feature_means: np.ndarray
    feature_sds: np.ndarray
    penalty: float
    loglik: float
    converged: bool
    feature_names: Tuple[str, ...] = ()
    n_iter: int = 0

    @property
    def baseline_hazard(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.hazard_times, self.hazard_increments

    @property
    def max_time(self) -> float:
        return float(self.hazard_times[-1]) if len(self.hazard_times) else 0.0

    @property
    def standardized_coefficients(self) -> np.ndarray:
        return self.coefficients * self.feature_sds

    def linear_predictor(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=float).reshape(-1, len(self.coefficients))
        return (X - self.feature_means) @ self.coefficients

    def cumulative_hazard(self, times) -> np.ndarray:
        cum = np.concatenate([[0.0], np.cumsum(self.hazard_increments)])
        return cum[np.searchsorted(self.hazard_times, np.asarray(times, dtype=float), "right")]

    def coefficient_frame(self) -> pd.DataFrame:
        names = self.feature_names or tuple(f"x{j}" for j in range(len(self.coefficients)))
        return pd.DataFrame(
            {
                "term": list(names),
                "coefficient": self.coefficients,
                "standardized": self.standardized_coefficients,
            }
        )

    def hazard_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"time": self.hazard_times, "cumulative_hazard": np.cumsum(self.hazard_increments)}
        )


def _standardize(X: np.ndarray):
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    active = sds > 1e-12 * np.maximum(1.0, np.abs(means))
    sds = np.where(active, sds, 1.0)
    return means, sds, active


def fit_cox(
    features: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    penalty: float = 0.0,
    *,
    penalty_weights: Sequence[float] = None,
    init: np.ndarray = None,
    feature_names: Sequence[str] = (),
) -> CoxFit:
    X = np.asarray(features, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if X.ndim != 2 or X.shape[0] != len(times) or len(times) != len(events):
        raise ValueError("Feature matrix does not match the outcomes")
    if not np.all(np.isfinite(X)):
        raise ValueError("Features must be finite")
    if penalty < 0:
        raise ValueError(f"Penalty must be non-negative: {penalty}")
    if len(times) < 2:
        raise NonEstimable("Cox model requires at least two subjects")
    if not events.any():
        raise NonEstimable("Cox model requires at least one event")

    n, p = X.shape
    means, sds, active = _standardize(X)
    Z = ((X - means) / sds)[:, active]
    weights = np.ones(p) if penalty_weights is None else np.asarray(penalty_weights, float)
    if weights.shape != (p,):
        raise ValueError("Penalty weights must match the feature count")
    pen = penalty * weights[active]
    beta = np.zeros(Z.shape[1]) if init is None else (np.asarray(init) * sds)[active]

    def objective(b):
        ll, score, info = partial_loglik(Z, times, events, b)
        return ll - 0.5 * np.sum(pen * b**2), score - pen * b, info + np.diag(pen)

    value, grad, hess = objective(beta)
    converged = False
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        if not len(beta) or np.max(np.abs(grad)) < SCORE_TOL:
            converged = True
            break
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # step halving until the penalized likelihood does not decrease
        for _ in range(30):
            cand = beta + step
            cand_value, cand_grad, cand_hess = objective(cand)
            if np.isfinite(cand_value) and cand_value >= value - 1e-12 * abs(value):
                break
            step = step / 2
        else:
            break
        beta, value, grad, hess = cand, cand_value, cand_grad, cand_hess
        if penalty == 0 and np.max(np.abs(beta)) > DIVERGENCE_BOUND:
            raise MonotoneLikelihood("Partial likelihood is monotone: coefficients diverge")
    else:
        converged = bool(np.max(np.abs(grad)) < SCORE_TOL)
    if penalty == 0 and len(beta) and np.max(np.abs(beta)) > DIVERGENCE_BOUND / 4:
        # a vanishing information matrix at a large estimate marks a supremum at infinity
        flat = np.linalg.eigvalsh(hess).min() < FLAT_INFORMATION * np.count_nonzero(events)
        if flat or not converged:
            raise MonotoneLikelihood("Partial likelihood is monotone: coefficients diverge")

    coef = np.zeros(p)
    coef[active] = beta / sds[active]
    eta = (X - means) @ coef
    hazard_times, increments = breslow_increments(eta, times, events)
    return CoxFit(
        coefficients=coef,
        hazard_times=hazard_times,
        hazard_increments=increments,
        feature_means=means,
        feature_sds=sds,
        penalty=float(penalty),
        loglik=partial_loglik(Z, times, events, beta, derivatives=False)[0],
        converged=converged,
        feature_names=tuple(feature_names),
        n_iter=n_iter,
    )


def _fold_splits(events: np.ndarray, folds: int, seed: int):
    try:
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        return list(splitter.split(np.zeros(len(events)), events))
    except ValueError:
        splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
        return list(splitter.split(np.zeros(len(events))))


def _fold_path(X, times, events, train, grid, penalty_weights) -> np.ndarray:
    # warm start along the path from the heaviest penalty down
    out = np.full(len(grid), np.nan)
    init = None
    for pos in np.argsort(grid)[::-1]:
        try:
            fit = fit_cox(
                X[train],
                times[train],
                events[train],
                grid[pos],
                penalty_weights=penalty_weights,
                init=init,
            )
        except (EstimationError, np.linalg.LinAlgError):
            continue
        init = fit.coefficients
        full = partial_loglik(X, times, events, fit.coefficients, derivatives=False)[0]
        part = partial_loglik(
            X[train], times[train], events[train], fit.coefficients, derivatives=False
        )[0]
        out[pos] = full - part
    return out


def select_ridge_penalty(
    features: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    folds: int = 5,
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    *,
    penalty_weights: Sequence[float] = None,
    seed: int = 0,
    n_jobs: int = 1,
) -> float:
    grid = np.asarray(lambda_grid, dtype=float)
    if not len(grid) or np.any(grid < 0):
        raise ValueError("Penalty grid must be non-empty and non-negative")
    if len(grid) == 1:
        return float(grid[0])
    if folds < 3:
        raise ValueError(f"Penalty selection requires at least 3 folds: {folds}")
    X = np.asarray(features, dtype=float)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    splits = _fold_splits(events, min(folds, len(times)), seed)
    paths = Parallel(n_jobs=n_jobs)(
        delayed(_fold_path)(X, times, events, train, grid, penalty_weights)
        for train, _ in splits
    )
    cvpl = np.sum(paths, axis=0)
    if not np.isfinite(cvpl).any():
        mid = float(grid[len(grid) // 2])
        LOGGER.warning("All penalized fits failed, using penalty %r", mid)
        return mid
    return float(grid[np.nanargmax(np.where(np.isfinite(cvpl), cvpl, np.nan))])


def predict_conditional_survival(
    fit: CoxFit,
    features_new: np.ndarray,
    landmark: float,
    horizons: Sequence[float],
    ids: Sequence[str] = (),
) -> SurvivalPrediction:
    horizons = np.asarray(horizons, dtype=float)
    if np.any(horizons <= landmark):
        raise ValueError("Horizons must all exceed the landmark")
    eta = fit.linear_predictor(features_new)
    base = fit.cumulative_hazard(horizons) - fit.cumulative_hazard(landmark)
    survival = np.exp(-np.outer(np.exp(eta), base))
    return SurvivalPrediction(
        landmark=landmark,
        horizons=horizons,
        survival=survival,
        risk_scores=eta,
        ids=tuple(ids),
        extrapolated=horizons > fit.max_time,
    )
