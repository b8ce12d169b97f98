from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
import pandas as pd


@dataclass(frozen=True, eq=False)
class SurvivalPrediction:
    """Conditional survival probabilities S(t | landmark), subjects by horizons."""

    landmark: float
    horizons: np.ndarray
    survival: np.ndarray
    risk_scores: np.ndarray
    ids: Tuple[str, ...] = ()
    extrapolated: np.ndarray = None

    def __post_init__(self):
        horizons = np.atleast_1d(np.asarray(self.horizons, dtype=float))
        survival = np.asarray(self.survival, dtype=float).reshape(-1, len(horizons))
        risk = np.asarray(self.risk_scores, dtype=float).reshape(-1)
        if len(risk) != survival.shape[0]:
            raise ValueError("Risk scores do not match the survival matrix")
        if np.any(horizons <= self.landmark):
            raise ValueError("Horizons must all exceed the landmark")
        ids = tuple(str(i) for i in self.ids) or tuple(str(i) for i in range(len(risk)))
        if len(ids) != len(risk):
            raise ValueError("Subject ids do not match the survival matrix")
        extrapolated = (
            np.zeros(len(horizons), dtype=bool)
            if self.extrapolated is None
            else np.asarray(self.extrapolated, dtype=bool).reshape(len(horizons))
        )
        # rounding can push a probability a hair outside [0, 1] or upwards in t
        survival = np.minimum.accumulate(np.clip(survival, 0.0, 1.0), axis=1)
        object.__setattr__(self, "landmark", float(self.landmark))
        object.__setattr__(self, "horizons", horizons)
        object.__setattr__(self, "survival", survival)
        object.__setattr__(self, "risk_scores", risk)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "extrapolated", extrapolated)

    @property
    def n(self) -> int:
        return len(self.risk_scores)

    def at(self, horizon: float) -> np.ndarray:
        matches = np.flatnonzero(np.isclose(self.horizons, horizon))
        if not len(matches):
            raise ValueError(f"Horizon not predicted: {horizon}")
        return self.survival[:, matches[0]]

    def check(self):
        if np.any(np.diff(self.horizons) <= 0):
            raise ValueError("Horizons must be strictly increasing")
        if np.any(np.diff(self.survival, axis=1) > 0):
            raise ValueError("Survival rows must be non-increasing")
        if np.any((self.survival < 0) | (self.survival > 1)):
            raise ValueError("Survival probabilities outside [0, 1]")

    def subset(self, ids: Iterable[str]) -> "SurvivalPrediction":
        index = {subj_id: pos for pos, subj_id in enumerate(self.ids)}
        rows = [index[str(subj_id)] for subj_id in ids]
        return SurvivalPrediction(
            self.landmark,
            self.horizons,
            self.survival[rows],
            self.risk_scores[rows],
            tuple(self.ids[r] for r in rows),
            self.extrapolated,
        )

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.survival, columns=[repr(h) for h in self.horizons])
        frame.insert(0, "risk_score", self.risk_scores)
        frame.insert(0, "id", list(self.ids))
        return frame

