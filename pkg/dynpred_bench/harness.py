"""Repeated cross-validation of landmark pipelines."""

import logging

from dataclasses import dataclass
from time import perf_counter
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from joblib import Parallel, delayed
from sklearn.model_selection import KFold, StratifiedKFold

from dynpred.dataset import STRICT, Dataset, make_landmark_slice
from dynpred.errors import EmptyRiskSet, EstimationError
from dynpred.format import format_float
from dynpred.metrics import BRIER, CINDEX, TDAUC, MetricResult, Outcomes, evaluate_prediction
from dynpred.pipelines import MethodSpec, describe_failure, fit_pipeline

LOGGER = logging.getLogger(__name__)

SUBJECTS = "subjects"
PREDICTORS = "predictors"
RESULT_COLUMNS = (
    "method",
    "landmark",
    "horizon",
    "metric",
    "mean",
    "sd",
    "n_failed",
    "mean_fit_seconds",
)


@dataclass(frozen=True)
class CvPlan:
    k: int = 5
    repetitions: int = 20
    seed: int = 0
    stratify: bool = True

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 2:
            raise ValueError(f"Fold count must be at least 2: {self.k}")
        if not isinstance(self.repetitions, int) or self.repetitions < 1:
            raise ValueError(f"Repetition count must be positive: {self.repetitions}")

    def splits(
        self, ids: Sequence[str], strata: Sequence[bool] = None
    ) -> Iterator[Tuple[int, int, Tuple[str, ...], Tuple[str, ...]]]:
        """Yield `(repetition, fold, train_ids, validation_ids)`."""
        ids = np.asarray(ids, dtype=object)
        if len(ids) < self.k:
            raise ValueError(f"Cannot split {len(ids)} subjects into {self.k} folds")
        for rep in range(self.repetitions):
            for fold, (train, valid) in enumerate(self._partition(len(ids), strata, rep)):
                yield rep, fold, tuple(ids[train]), tuple(ids[valid])

    def _partition(self, n: int, strata, rep: int):
        state = self.seed + rep
        if self.stratify and strata is not None:
            strata = np.asarray(strata, dtype=bool)
            _, counts = np.unique(strata, return_counts=True)
            if len(counts) > 1 and counts.min() >= self.k:
                splitter = StratifiedKFold(n_splits=self.k, shuffle=True, random_state=state)
                return list(splitter.split(np.zeros(n), strata))
        splitter = KFold(n_splits=self.k, shuffle=True, random_state=state)
        return list(splitter.split(np.zeros(n)))

    def serialize(self) -> dict:
        return {
            "k": self.k,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "stratify": self.stratify,
        }


def horizon_grid(landmark: float, end: float, step: float = 1.0) -> Tuple[float, ...]:
    """Horizons from the first multiple of `step` past the landmark up to `end`."""
    if step <= 0:
        raise ValueError(f"Horizon step must be positive: {step}")
    first = (np.floor(landmark / step + 1e-9) + 1) * step
    count = int(np.floor((end - first) / step + 1e-9)) + 1
    return tuple(float(first + i * step) for i in range(max(count, 0)))


def _validate_horizons(landmarks, horizons) -> Dict[float, Tuple[float, ...]]:
    if not landmarks:
        raise ValueError("At least one landmark is required")
    if not isinstance(horizons, dict):
        horizons = {lm: horizons for lm in landmarks}
    out = {}
    for lm in landmarks:
        hz = tuple(float(h) for h in horizons.get(lm, ()))
        if not hz:
            raise ValueError(f"No horizons for landmark {lm}")
        if min(hz) <= lm:
            raise ValueError(f"Horizons for landmark {lm} must all exceed it")
        out[float(lm)] = tuple(sorted(hz))
    return out


@dataclass(frozen=True)
class FoldRecord:
    method: str
    landmark: float
    repetition: int
    fold: int
    metrics: Tuple[MetricResult, ...] = ()
    seconds: Optional[float] = None
    failure: Optional[dict] = None

    @property
    def failed(self) -> bool:
        return self.failure is not None


def _job_seed(seed: int, landmark_index: int, rep: int, fold: int) -> int:
    seq = np.random.SeedSequence([seed, landmark_index, rep, fold])
    return int(seq.generate_state(1)[0])


def _run_fold(
    spec: MethodSpec,
    data: Dataset,
    landmark: float,
    horizons: Tuple[float, ...],
    rep: int,
    fold: int,
    train_ids: Tuple[str, ...],
    valid_ids: Tuple[str, ...],
    landmark_mode: str,
) -> FoldRecord:
    start = perf_counter()
    try:
        train = make_landmark_slice(data.subset(train_ids), landmark, landmark_mode)
        valid = make_landmark_slice(data.subset(valid_ids), landmark, STRICT)
        fitted = fit_pipeline(spec, train)
        pred = fitted.predict(valid, horizons)
    except (EstimationError, np.linalg.LinAlgError) as err:
        LOGGER.warning(
            "%s failed at landmark %r (repetition %d, fold %d): %s",
            spec.name, landmark, rep, fold, err,
        )
        return FoldRecord(spec.name, landmark, rep, fold, failure=describe_failure(err))
    seconds = perf_counter() - start
    metrics = evaluate_prediction(pred, Outcomes.from_slice(valid), horizons, max(horizons))
    return FoldRecord(spec.name, landmark, rep, fold, tuple(metrics), seconds)


@dataclass(frozen=True, eq=False)
class BenchmarkResult:
    methods: Tuple[str, ...]
    horizons: Dict[float, Tuple[float, ...]]
    plan: CvPlan
    records: Tuple[FoldRecord, ...] = ()
    timing_in_results: bool = False

    @property
    def landmarks(self) -> Tuple[float, ...]:
        return tuple(sorted(self.horizons))

    def _cell(self, method: str, landmark: float) -> List[FoldRecord]:
        return [r for r in self.records if r.method == method and r.landmark == landmark]

    def fit_count(self, method: str, landmark: float) -> int:
        return len(self._cell(method, landmark))

    def missing(self) -> List[Tuple[str, float]]:
        """Method and landmark cells where every fold failed."""
        out = []
        for method in self.methods:
            for lm in self.landmarks:
                cell = self._cell(method, lm)
                if cell and all(r.failed for r in cell):
                    out.append((method, lm))
        return out

    def _aggregate(self, cell: List[FoldRecord], metric: str, horizon) -> Tuple[float, float]:
        per_rep = {}
        for rec in cell:
            for res in rec.metrics:
                if res.metric == metric and res.horizon == horizon and res.defined:
                    per_rep.setdefault(rec.repetition, []).append(res.value)
        means = np.array([np.mean(per_rep[rep]) for rep in sorted(per_rep)])
        if not len(means):
            return float("nan"), float("nan")
        sd = float(np.std(means, ddof=1)) if len(means) > 1 else float("nan")
        return float(np.mean(means)), sd

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for method in self.methods:
            for lm in self.landmarks:
                cell = self._cell(method, lm)
                n_failed = sum(r.failed for r in cell)
                seconds = [r.seconds for r in cell if not r.failed]
                fit_seconds = float(np.mean(seconds)) if seconds else float("nan")
                keys = [(m, h) for h in self.horizons[lm] for m in (BRIER, TDAUC)]
                keys.append((CINDEX, None))
                for metric, horizon in keys:
                    mean, sd = self._aggregate(cell, metric, horizon)
                    rows.append(
                        (method, lm, horizon, metric, mean, sd, n_failed, fit_seconds)
                    )
        return pd.DataFrame(rows, columns=list(RESULT_COLUMNS))

    def to_csv(self) -> str:
        frame = self.to_frame()
        if not self.timing_in_results:
            frame["mean_fit_seconds"] = float("nan")
        return frame_csv(frame)

    def timing_frame(self) -> pd.DataFrame:
        """Mean fit and predict seconds per fold, one row per method."""
        rows = []
        for method in self.methods:
            row = {"method": method}
            for lm in self.landmarks:
                seconds = [r.seconds for r in self._cell(method, lm) if not r.failed]
                row[format_float(lm)] = float(np.mean(seconds)) if seconds else float("nan")
            values = [v for k, v in row.items() if k != "method" and not np.isnan(v)]
            row["Average"] = float(np.mean(values)) if values else float("nan")
            rows.append(row)
        return pd.DataFrame(rows)

    def failure_frame(self) -> pd.DataFrame:
        rows = [
            {
                "method": r.method,
                "landmark": r.landmark,
                "repetition": r.repetition,
                "fold": r.fold,
                "error": r.failure.get("error"),
                "message": r.failure.get("errorMessage"),
            }
            for r in self.records
            if r.failed
        ]
        return pd.DataFrame(
            rows, columns=["method", "landmark", "repetition", "fold", "error", "message"]
        )


def frame_csv(frame: pd.DataFrame) -> str:
    text = frame.copy()
    for col in text.columns:
        if pd.api.types.is_float_dtype(text[col]) or text[col].dtype == object:
            text[col] = [
                format_float(v) if isinstance(v, float) or v is None else v
                for v in text[col]
            ]
    return text.to_csv(index=False, lineterminator="\n")


def run_benchmark(
    data: Dataset,
    methods: Sequence[MethodSpec],
    landmarks: Sequence[float],
    horizons,
    plan: CvPlan,
    *,
    landmark_mode: str = STRICT,
    n_jobs: int = 1,
    timing_in_results: bool = False,
) -> BenchmarkResult:
    names = [spec.name for spec in methods]
    if len(set(names)) != len(names):
        raise ValueError("Method names must be unique")
    grid = _validate_horizons(sorted(float(lm) for lm in landmarks), horizons)

    jobs = []
    for li, lm in enumerate(sorted(grid)):
        try:
            risk_set = make_landmark_slice(data, lm, STRICT)
        except EmptyRiskSet:
            LOGGER.warning("No subjects at risk at landmark %r, skipping", lm)
            continue
        strata = risk_set.events & (risk_set.times <= max(grid[lm]))
        for rep, fold, train_ids, valid_ids in plan.splits(risk_set.ids, strata):
            seed = _job_seed(plan.seed, li, rep, fold)
            for spec in methods:
                job_spec = spec.with_seed(seed)
                if n_jobs != 1:
                    job_spec = job_spec.with_jobs(1)
                jobs.append(
                    (job_spec, lm, grid[lm], rep, fold, train_ids, valid_ids, landmark_mode)
                )
    LOGGER.info("Running %d fold jobs with %d workers", len(jobs), n_jobs)
    records = Parallel(n_jobs=n_jobs)(
        delayed(_run_fold)(job[0], data, *job[1:]) for job in jobs
    )
    order = {name: pos for pos, name in enumerate(names)}
    records = sorted(
        records, key=lambda r: (r.landmark, r.repetition, r.fold, order[r.method])
    )
    return BenchmarkResult(
        methods=tuple(names),
        horizons=grid,
        plan=plan,
        records=tuple(records),
        timing_in_results=timing_in_results,
    )


def _sample_predictors(data: Dataset, fraction: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)

    def pick(names):
        if not names:
            return ()
        count = max(1, int(round(fraction * len(names))))
        chosen = rng.choice(len(names), size=count, replace=False)
        return tuple(names[i] for i in sorted(chosen))

    return data.select_covariates(pick(data.baseline_names), pick(data.longitudinal_names))


def subsample_ablation(
    data: Dataset,
    fractions: Sequence[float],
    methods: Sequence[MethodSpec],
    landmarks: Sequence[float],
    horizons,
    plan: CvPlan,
    *,
    axis: str = SUBJECTS,
    landmark_mode: str = STRICT,
    n_jobs: int = 1,
) -> Dict[float, BenchmarkResult]:
    if axis not in (SUBJECTS, PREDICTORS):
        raise ValueError(f"Unsupported ablation axis: {axis!r}")
    out = {}
    for fraction in fractions:
        fraction = float(fraction)
        if not 0 < fraction <= 1:
            raise ValueError(f"Ablation fraction must be in (0, 1]: {fraction}")
        subset = data
        if fraction < 1:
            if axis == SUBJECTS:
                rng = np.random.default_rng([plan.seed, int(round(fraction * 1e6))])
                count = int(round(fraction * data.n))
                chosen = np.sort(rng.choice(data.n, size=count, replace=False))
                subset = data.subset(data.ids[i] for i in chosen)
            else:
                subset = _sample_predictors(data, fraction, plan.seed)
        if subset.n < 2 * plan.k:
            LOGGER.warning(
                "Skipping fraction %r: %d subjects is fewer than twice the fold count",
                fraction, subset.n,
            )
            continue
        out[fraction] = run_benchmark(
            subset, methods, landmarks, horizons, plan,
            landmark_mode=landmark_mode, n_jobs=n_jobs,
        )
    return out


def ablation_frame(results: Dict[float, BenchmarkResult], axis: str = SUBJECTS) -> pd.DataFrame:
    frames = []
    for fraction, result in results.items():
        frame = result.to_frame().drop(columns=["mean_fit_seconds"])
        frame.insert(0, "fraction", fraction)
        frame.insert(0, "axis", axis)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["axis", "fraction", *RESULT_COLUMNS[:-1]])
    return pd.concat(frames, ignore_index=True)
