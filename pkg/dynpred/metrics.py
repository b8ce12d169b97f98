import logging

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from lifelines import KaplanMeierFitter
from sksurv.metrics import brier_score as sksurv_brier_score, cumulative_dynamic_auc
from sksurv.util import Surv

from .dataset import LandmarkSlice
from .prediction import SurvivalPrediction

LOGGER = logging.getLogger(__name__)

BRIER = "brier"
TDAUC = "tdauc"
CINDEX = "cindex"
METRICS = (BRIER, TDAUC, CINDEX)


@dataclass(frozen=True, eq=False)
class Outcomes:
    times: np.ndarray
    events: np.ndarray
    ids: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        object.__setattr__(self, "events", np.asarray(self.events, dtype=bool))
        object.__setattr__(self, "ids", tuple(str(i) for i in self.ids))

    @classmethod
    def from_slice(cls, slice: LandmarkSlice) -> "Outcomes":
        return cls(slice.times, slice.events, slice.ids)

    @property
    def n(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class CensoringModel:
    """Kaplan-Meier estimate of the censoring survival, conditional on the landmark."""

    timeline: np.ndarray
    survival: np.ndarray
    landmark: float
    at_landmark: float

    @classmethod
    def fit(cls, outcomes: Outcomes, landmark: float) -> "CensoringModel":
        kmf = KaplanMeierFitter()
        kmf.fit(outcomes.times, event_observed=~outcomes.events)
        timeline = np.asarray(kmf.survival_function_.index, dtype=float)
        survival = kmf.survival_function_.iloc[:, 0].to_numpy(dtype=float)
        pos = np.searchsorted(timeline, landmark, side="right") - 1
        at_landmark = survival[pos] if pos >= 0 else 1.0
        return cls(timeline, survival, float(landmark), float(at_landmark))

    def _lookup(self, times, side: str) -> np.ndarray:
        pos = np.searchsorted(self.timeline, np.asarray(times, dtype=float), side=side) - 1
        return np.where(pos >= 0, self.survival[np.maximum(pos, 0)], 1.0)

    def __call__(self, times) -> np.ndarray:
        """G(t | landmark)."""
        return self._lookup(times, "right") / self.at_landmark

    def left_limit(self, times) -> np.ndarray:
        """G(t- | landmark)."""
        return self._lookup(times, "left") / self.at_landmark


@dataclass(frozen=True)
class MetricResult:
    metric: str
    landmark: float
    horizon: Optional[float]
    value: float
    n_effective: int

    @property
    def defined(self) -> bool:
        return not np.isnan(self.value)

    def serialize(self) -> dict:
        return {
            "metric": self.metric,
            "landmark": self.landmark,
            "horizon": self.horizon,
            "value": None if not self.defined else self.value,
            "n_effective": self.n_effective,
        }


def _aligned(pred: SurvivalPrediction, outcomes: Outcomes) -> SurvivalPrediction:
    if outcomes.ids and pred.ids != outcomes.ids:
        return pred.subset(outcomes.ids)
    if pred.n != outcomes.n:
        raise ValueError("Prediction and outcomes cover different subjects")
    return pred


def _structured(outcomes: Outcomes, landmark: float) -> np.ndarray:
    if np.any(outcomes.times <= landmark):
        raise ValueError(f"Outcome times must all exceed the landmark {landmark}")
    return Surv.from_arrays(event=outcomes.events, time=outcomes.times)


def _weights(outcomes, landmark, horizon, censoring):
    censoring = censoring or CensoringModel.fit(outcomes, landmark)
    cases = (outcomes.times <= horizon) & outcomes.events
    controls = outcomes.times > horizon
    g_horizon = float(censoring(horizon))
    g_cases = censoring.left_limit(outcomes.times[cases])
    return cases, controls, g_horizon, g_cases


def _within_follow_up(outcomes: Outcomes, horizon: float) -> bool:
    return bool(outcomes.events.any()) and outcomes.times.min() <= horizon < outcomes.times.max()


def brier_score(
    pred: SurvivalPrediction,
    outcomes: Outcomes,
    landmark: float,
    horizon: float,
    censoring: CensoringModel = None,
) -> MetricResult:
    """IPCW Brier score at `horizon`.

    The censoring distribution is the Kaplan-Meier fit on the validation subjects, which all
    survived the landmark. Horizons at or past the last follow-up time are undefined.
    """
    pred = _aligned(pred, outcomes)
    surv = pred.at(horizon)
    survival = _structured(outcomes, landmark)
    cases, controls, g_horizon, g_cases = _weights(outcomes, landmark, horizon, censoring)
    n_eff = int(cases.sum() + controls.sum())
    if not outcomes.n or horizon >= outcomes.times.max() or g_horizon <= 0:
        return MetricResult(BRIER, landmark, horizon, float("nan"), n_eff)
    if horizon < outcomes.times.min():
        # everybody is a control and no censoring has happened yet
        value = float(np.mean((1.0 - surv) ** 2))
    elif not _within_follow_up(outcomes, horizon) or np.any(g_cases <= 0):
        value = float("nan")
    else:
        _, scores = sksurv_brier_score(survival, survival, surv[:, None], [horizon])
        value = float(scores[0])
    return MetricResult(BRIER, landmark, horizon, value, n_eff)


def td_auc(
    pred: SurvivalPrediction,
    outcomes: Outcomes,
    landmark: float,
    horizon: float,
    censoring: CensoringModel = None,
) -> MetricResult:
    """Cumulative/dynamic AUC at `horizon` with IPCW-weighted cases."""
    pred = _aligned(pred, outcomes)
    risk = 1.0 - pred.at(horizon)
    survival = _structured(outcomes, landmark)
    cases, controls, g_horizon, g_cases = _weights(outcomes, landmark, horizon, censoring)
    n_cases = int(cases.sum())
    n_controls = int(controls.sum())
    n_eff = n_cases * n_controls
    if (
        not n_cases
        or not n_controls
        or g_horizon <= 0
        or np.any(g_cases <= 0)
        or not _within_follow_up(outcomes, horizon)
    ):
        return MetricResult(TDAUC, landmark, horizon, float("nan"), n_eff)
    try:
        scores, _ = cumulative_dynamic_auc(survival, survival, risk, [horizon])
    except ValueError as err:
        # censoring survival reaches zero at a tied final event time
        LOGGER.debug("Time-dependent AUC undefined at %r: %s", horizon, err)
        return MetricResult(TDAUC, landmark, horizon, float("nan"), n_eff)
    return MetricResult(TDAUC, landmark, horizon, float(scores[0]), n_eff)


def c_index(
    pred: SurvivalPrediction, outcomes: Outcomes, landmark: float, truncation: float
) -> MetricResult:
    pred = _aligned(pred, outcomes)
    risk = pred.risk_scores
    t = outcomes.times
    first = outcomes.events & (t <= truncation)
    comparable = first[:, None] & (t[:, None] < t[None, :])
    n_pairs = int(comparable.sum())
    if not n_pairs:
        return MetricResult(CINDEX, landmark, None, float("nan"), 0)
    diff = risk[:, None] - risk[None, :]
    score = np.sum(comparable & (diff > 0)) + 0.5 * np.sum(comparable & (diff == 0))
    return MetricResult(CINDEX, landmark, None, float(score / n_pairs), n_pairs)


def evaluate_prediction(
    pred: SurvivalPrediction,
    outcomes: Outcomes,
    horizons: Sequence[float] = None,
    truncation: float = None,
) -> List[MetricResult]:
    horizons = pred.horizons if horizons is None else np.asarray(horizons, dtype=float)
    truncation = float(np.max(horizons)) if truncation is None else truncation
    censoring = CensoringModel.fit(outcomes, pred.landmark)
    results = []
    for horizon in horizons:
        results.append(brier_score(pred, outcomes, pred.landmark, horizon, censoring))
        results.append(td_auc(pred, outcomes, pred.landmark, horizon, censoring))
    results.append(c_index(pred, outcomes, pred.landmark, truncation))
    return results
