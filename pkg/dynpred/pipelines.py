import logging

from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .cox import (
    DEFAULT_LAMBDA_GRID,
    CoxFit,
    fit_cox,
    predict_conditional_survival,
    select_ridge_penalty,
)
from .dataset import (
    LandmarkSlice,
    TransformSpec,
    align_to_grid,
    apply_transform,
    fit_transform_spec,
    schedule_grid,
)
from .errors import EstimationError, FitFailed, MonotoneLikelihood, NonEstimable
from .format import normalize_config
from .lmm import LmmFit, fit_lmm_ladder, predict_blup_newdata
from .mfpca import DEFAULT_PVE, MfpcaFit, fit_mfpca, project_mfpca
from .prediction import SurvivalPrediction
from .rsf import ForestConfig, ForestFit, fit_dynforest, fit_rsf, predict_forest_survival

LOGGER = logging.getLogger(__name__)

STATIC_COX = "static_cox"
LOCF = "locf_landmarking"
MFPCCOX = "mfpccox"
PRC = "prc"
FUNRSF = "funrsf"
DYNFOREST = "dynforest"
KINDS = (STATIC_COX, LOCF, MFPCCOX, PRC, FUNRSF, DYNFOREST)

SUMMARY_LAST = "last"
SUMMARY_MEAN = "mean"

STABILIZING_RIDGE = 1e-6
RETRY_RIDGE = 1e-2

# hyperparameters each kind accepts besides kind and name
KIND_PARAMS = {
    STATIC_COX: (),
    LOCF: ("summary",),
    MFPCCOX: ("pve1", "pve2", "grid"),
    PRC: ("lambda_grid", "cv_folds", "transform", "penalize_baseline", "seed", "n_jobs"),
    FUNRSF: ("pve1", "pve2", "grid", "forest"),
    DYNFOREST: ("transform", "forest"),
}


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    name: str = None
    pve1: float = DEFAULT_PVE
    pve2: float = DEFAULT_PVE
    lambda_grid: Tuple[float, ...] = DEFAULT_LAMBDA_GRID
    cv_folds: int = 5
    forest: ForestConfig = None
    transform: bool = None
    grid: Optional[Tuple[float, ...]] = None
    summary: str = SUMMARY_LAST
    penalize_baseline: bool = True
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"Unsupported method kind: {self.kind!r}")
        if self.name is None:
            object.__setattr__(self, "name", self.kind)
        if self.forest is None and self.kind in (FUNRSF, DYNFOREST):
            preset = ForestConfig.funrsf if self.kind == FUNRSF else ForestConfig.dynforest
            object.__setattr__(self, "forest", preset())
        if self.transform is None:
            object.__setattr__(self, "transform", self.kind in (PRC, DYNFOREST))
        object.__setattr__(self, "lambda_grid", tuple(float(v) for v in self.lambda_grid))
        if self.grid is not None:
            object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))
        for pve in (self.pve1, self.pve2):
            if not 0 < pve <= 1:
                raise ValueError(f"Proportion of variance must be in (0, 1]: {pve}")
        if not self.lambda_grid or min(self.lambda_grid) < 0:
            raise ValueError("Penalty grid must be non-empty and non-negative")
        if self.cv_folds < 3:
            raise ValueError(f"Penalty selection requires at least 3 folds: {self.cv_folds}")
        if self.summary not in (SUMMARY_LAST, SUMMARY_MEAN):
            raise ValueError(f"Unsupported landmark summary: {self.summary!r}")

    @classmethod
    def from_dict(cls, value: dict) -> "MethodSpec":
        if not isinstance(value, dict) or "kind" not in value:
            raise ValueError("Method entries must be objects with a kind")
        kind = value["kind"]
        if kind not in KINDS:
            raise ValueError(f"Unsupported method kind: {kind!r}")
        params = {"kind": kind}
        for key, item in value.items():
            if key == "kind":
                continue
            if key != "name" and key not in KIND_PARAMS[kind]:
                raise ValueError(f"Unsupported parameter for {kind}: {key}")
            match key:
                case "name" | "summary":
                    if not isinstance(item, str):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
                case "pve1" | "pve2":
                    if not isinstance(item, (int, float)) or isinstance(item, bool):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
                case "grid" if item is None:
                    pass
                case "lambda_grid" | "grid":
                    if not isinstance(item, list) or not all(
                        isinstance(v, (int, float)) and not isinstance(v, bool) for v in item
                    ):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
                    item = tuple(item)
                case "cv_folds" | "seed" | "n_jobs":
                    if not isinstance(item, int) or isinstance(item, bool):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
                case "transform" | "penalize_baseline":
                    if not isinstance(item, bool):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
                case "forest":
                    if not isinstance(item, dict):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
                    preset = ForestConfig.funrsf if kind == FUNRSF else ForestConfig.dynforest
                    item = ForestConfig.from_dict(item, preset())
            params[key] = item
        return cls(**params)

    def serialize(self) -> dict:
        out = {"kind": self.kind, "name": self.name}
        for key in KIND_PARAMS[self.kind]:
            item = getattr(self, key)
            match key:
                case "forest":
                    item = item.serialize()
                case "lambda_grid" | "grid":
                    item = list(item) if item is not None else None
            out[key] = item
        return out

    def with_seed(self, seed: int) -> "MethodSpec":
        forest = replace(self.forest, seed=seed) if self.forest else None
        return replace(self, seed=seed, forest=forest)

    def with_jobs(self, n_jobs: int) -> "MethodSpec":
        forest = replace(self.forest, n_jobs=n_jobs) if self.forest else None
        return replace(self, n_jobs=n_jobs, forest=forest)


def baseline_values(slice: LandmarkSlice) -> np.ndarray:
    if not slice.n:
        return np.zeros((0, slice.Q))
    return np.vstack([subj.longitudinal[0] for subj in slice.subjects])


def _summarize(slice: LandmarkSlice, landmark: float, how: str) -> np.ndarray:
    out = np.zeros((slice.n, slice.Q))
    for row, subj in enumerate(slice.subjects):
        keep = subj.visits <= landmark
        keep[0] = True
        for q in range(slice.Q):
            values = subj.longitudinal[keep, q]
            values = values[~np.isnan(values)]
            out[row, q] = values[-1] if how == SUMMARY_LAST else values.mean()
    return out


def summarize_last(slice: LandmarkSlice, landmark: float = None) -> np.ndarray:
    """Last non-missing value at or before the landmark, per covariate."""
    return _summarize(slice, slice.landmark if landmark is None else landmark, SUMMARY_LAST)


def summarize_mean(slice: LandmarkSlice, landmark: float = None) -> np.ndarray:
    """Average of the non-missing values at or before the landmark, per covariate."""
    return _summarize(slice, slice.landmark if landmark is None else landmark, SUMMARY_MEAN)


def static_features(slice: LandmarkSlice) -> np.ndarray:
    return np.hstack([slice.baseline_matrix(), baseline_values(slice)])


def locf_features(slice: LandmarkSlice, landmark: float = None, summary: str = SUMMARY_LAST):
    summarize = summarize_last if summary == SUMMARY_LAST else summarize_mean
    return np.hstack([slice.baseline_matrix(), summarize(slice, landmark)])


@dataclass(frozen=True, eq=False)
class FittedPipeline:
    spec: MethodSpec
    landmark: float
    feature_names: Tuple[str, ...]
    model: Union[CoxFit, ForestFit]
    train_ids: Tuple[str, ...] = ()
    train_features: Optional[np.ndarray] = None
    transform: Optional[TransformSpec] = None
    grid: Optional[np.ndarray] = None
    summarizer: Union[None, MfpcaFit, Tuple[LmmFit, ...]] = None
    lmm_indices: Tuple[int, ...] = ()
    notes: Tuple[str, ...] = ()

    @property
    def kind(self) -> str:
        return self.spec.kind

    def transformed(self, slice: LandmarkSlice) -> LandmarkSlice:
        return apply_transform(slice, self.transform) if self.transform is not None else slice

    def features(self, slice: LandmarkSlice) -> np.ndarray:
        match self.kind:
            case "static_cox":
                return static_features(slice)
            case "locf_landmarking":
                return locf_features(slice, slice.landmark, self.spec.summary)
            case "mfpccox" | "funrsf":
                aligned = align_to_grid(slice, self.grid)
                return np.hstack([slice.baseline_matrix(), project_mfpca(self.summarizer, aligned)])
            case "prc":
                transformed = self.transformed(slice)
                blocks = [slice.baseline_matrix()]
                for fit, q in zip(self.summarizer, self.lmm_indices):
                    blocks.append(predict_blup_newdata(fit, transformed, q).values)
                return np.hstack(blocks)
        raise ValueError(f"Pipeline {self.kind} has no fixed feature matrix")

    def predict(self, slice: LandmarkSlice, horizons: Sequence[float]) -> SurvivalPrediction:
        if self.kind == DYNFOREST:
            return predict_forest_survival(
                self.model, self.transformed(slice), slice.landmark, horizons
            )
        X = self.features(slice)
        if isinstance(self.model, CoxFit):
            return predict_conditional_survival(
                self.model, X, slice.landmark, horizons, ids=slice.ids
            )
        return predict_forest_survival(self.model, X, slice.landmark, horizons, ids=slice.ids)

    def export(self) -> Dict[str, str]:
        """Fitted artifacts as file name to text content."""
        files = {}
        header = {
            "spec": self.spec.serialize(),
            "landmark": self.landmark,
            "features": list(self.feature_names),
            "notes": list(self.notes),
        }
        if self.transform is not None:
            header["transform"] = self.transform.serialize()
        files["pipeline.json"] = normalize_config(header).decode("utf-8")
        if self.train_features is not None:
            frame = pd.DataFrame(self.train_features, columns=list(self.feature_names))
            frame.insert(0, "id", list(self.train_ids))
            files["features.csv"] = frame.to_csv(index=False)
        if isinstance(self.model, CoxFit):
            files["coefficients.csv"] = self.model.coefficient_frame().to_csv(index=False)
            files["baseline_hazard.csv"] = self.model.hazard_frame().to_csv(index=False)
        else:
            files["splits.csv"] = self.model.split_frame().to_csv(index=False)
        if isinstance(self.summarizer, MfpcaFit):
            for uni in self.summarizer.univariate:
                frame = self.summarizer.eigenfunction_frame(uni.name)
                files[f"eigenfunctions_{uni.name}.csv"] = frame.to_csv(index=False)
        elif self.summarizer:
            for fit, name in zip(self.summarizer, self._lmm_names()):
                files[f"lmm_{name}.txt"] = fit.to_text() + "\n"
        return files

    def _lmm_names(self) -> Tuple[str, ...]:
        pairs = self.feature_names[len(self.feature_names) - 2 * len(self.lmm_indices):]
        return tuple(name.rsplit(":", 1)[0] for name in pairs[::2])


def _default_grid(train: LandmarkSlice, spec: MethodSpec) -> np.ndarray:
    if spec.grid is not None:
        return np.asarray(spec.grid)
    # visit schedule up to the point nearest the final visit
    end = max(float(subj.visits[-1]) for subj in train.subjects)
    return schedule_grid(end + 0.5)


def _score_names(slice: LandmarkSlice, k: int) -> Tuple[str, ...]:
    return (*slice.baseline_names, *(f"mfpc_{j + 1}" for j in range(k)))


def _fit_mfpca_features(train: LandmarkSlice, spec: MethodSpec):
    grid = _default_grid(train, spec)
    aligned = align_to_grid(train, grid)
    try:
        mfpca = fit_mfpca(aligned, spec.pve1, spec.pve2)
    except NonEstimable as err:
        raise FitFailed(f"MFPCA failed: {err.message}") from None
    X = np.hstack([train.baseline_matrix(), mfpca.scores])
    return grid, mfpca, X


def fit_static_cox(train: LandmarkSlice, spec: MethodSpec = None) -> FittedPipeline:
    spec = spec or MethodSpec(STATIC_COX)
    X = static_features(train)
    names = (*train.baseline_names, *(f"{n}@0" for n in train.longitudinal_names))
    model = fit_cox(X, train.times, train.events, 0.0, feature_names=names)
    return FittedPipeline(spec, train.landmark, names, model, train.ids, X)


def fit_locf(train: LandmarkSlice, spec: MethodSpec = None) -> FittedPipeline:
    spec = spec or MethodSpec(LOCF)
    X = locf_features(train, train.landmark, spec.summary)
    names = (*train.baseline_names, *(f"{n}:{spec.summary}" for n in train.longitudinal_names))
    model = fit_cox(X, train.times, train.events, 0.0, feature_names=names)
    return FittedPipeline(spec, train.landmark, names, model, train.ids, X)


def fit_mfpccox(train: LandmarkSlice, spec: MethodSpec = None) -> FittedPipeline:
    spec = spec or MethodSpec(MFPCCOX)
    grid, mfpca, X = _fit_mfpca_features(train, spec)
    names = _score_names(train, mfpca.K)
    notes = []
    penalty = 0.0
    if X.shape[1] > train.n / 2:
        penalty = STABILIZING_RIDGE
        notes.append(f"stabilizing ridge {STABILIZING_RIDGE!r}")
    try:
        model = fit_cox(X, train.times, train.events, penalty, feature_names=names)
    except MonotoneLikelihood:
        LOGGER.warning("MFPCCox likelihood is monotone, refitting with ridge %r", RETRY_RIDGE)
        notes.append(f"monotone likelihood, ridge {RETRY_RIDGE!r}")
        model = fit_cox(X, train.times, train.events, RETRY_RIDGE, feature_names=names)
    return FittedPipeline(
        spec, train.landmark, names, model, train.ids, X,
        grid=grid, summarizer=mfpca, notes=tuple(notes),
    )


def fit_prc(train: LandmarkSlice, spec: MethodSpec = None) -> FittedPipeline:
    spec = spec or MethodSpec(PRC)
    transform = fit_transform_spec(train) if spec.transform else None
    transformed = apply_transform(train, transform) if transform else train
    fits = []
    indices = []
    for q, name in enumerate(train.longitudinal_names):
        try:
            fits.append(fit_lmm_ladder(transformed, q))
            indices.append(q)
        except NonEstimable as err:
            LOGGER.warning("Dropping %r from PRC: %s", name, err.message)
    failed = train.Q - len(indices)
    if train.Q and failed * 2 >= train.Q:
        raise FitFailed(f"{failed} of {train.Q} mixed models are not estimable")

    blocks = [train.baseline_matrix()]
    names = list(train.baseline_names)
    for fit, q in zip(fits, indices):
        blocks.append(predict_blup_newdata(fit, transformed, q).values)
        name = train.longitudinal_names[q]
        names.extend((f"{name}:intercept", f"{name}:slope"))
    X = np.hstack(blocks)
    weights = np.ones(X.shape[1])
    if not spec.penalize_baseline:
        weights[: train.P] = 0.0
    penalty = select_ridge_penalty(
        X,
        train.times,
        train.events,
        spec.cv_folds,
        spec.lambda_grid,
        penalty_weights=weights,
        seed=spec.seed,
        n_jobs=spec.n_jobs,
    )
    model = fit_cox(
        X, train.times, train.events, penalty, penalty_weights=weights, feature_names=names
    )
    notes = [f"penalty {penalty!r}"]
    notes.extend(
        f"{train.longitudinal_names[q]} covariance {fit.structure}"
        for fit, q in zip(fits, indices)
        if fit.fallback_level
    )
    return FittedPipeline(
        spec, train.landmark, tuple(names), model, train.ids, X,
        transform=transform, summarizer=tuple(fits), lmm_indices=tuple(indices),
        notes=tuple(notes),
    )


def fit_funrsf(train: LandmarkSlice, spec: MethodSpec = None) -> FittedPipeline:
    spec = spec or MethodSpec(FUNRSF)
    grid, mfpca, X = _fit_mfpca_features(train, spec)
    names = _score_names(train, mfpca.K)
    model = fit_rsf(X, train.times, train.events, spec.forest, names)
    return FittedPipeline(
        spec, train.landmark, names, model, train.ids, X, grid=grid, summarizer=mfpca
    )


def fit_dynforest_pipeline(train: LandmarkSlice, spec: MethodSpec = None) -> FittedPipeline:
    spec = spec or MethodSpec(DYNFOREST)
    transform = fit_transform_spec(train) if spec.transform else None
    transformed = apply_transform(train, transform) if transform else train
    try:
        model = fit_dynforest(transformed, None, spec.forest)
    except (NonEstimable, np.linalg.LinAlgError) as err:
        raise FitFailed(f"DynForest failed: {err}") from None
    return FittedPipeline(
        spec, train.landmark, model.feature_names, model, train.ids, transform=transform
    )


def fit_pipeline(spec: MethodSpec, train: LandmarkSlice) -> FittedPipeline:
    match spec.kind:
        case "static_cox":
            return fit_static_cox(train, spec)
        case "locf_landmarking":
            return fit_locf(train, spec)
        case "mfpccox":
            return fit_mfpccox(train, spec)
        case "prc":
            return fit_prc(train, spec)
        case "funrsf":
            return fit_funrsf(train, spec)
        case "dynforest":
            return fit_dynforest_pipeline(train, spec)
    raise ValueError(f"Unsupported method kind: {spec.kind!r}")


def describe_failure(err: Exception) -> dict:
    if isinstance(err, EstimationError):
        return err.serialize()
    return {"error": type(err).__name__, "errorMessage": str(err)}

