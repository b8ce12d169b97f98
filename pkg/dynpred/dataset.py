import logging

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from scipy import stats

from .errors import DatasetError, EmptyRiskSet
from .format import format_float

LOGGER = logging.getLogger(__name__)

STRICT = "strict"
RELAXED = "relaxed"
LANDMARK_MODES = (STRICT, RELAXED)

BASELINE_COLUMNS = ("id", "event_time", "event_indicator")
LONGITUDINAL_COLUMNS = ("id", "time")

IDENTITY = "identity"
LOG = "log"
CUBIC = "cubic"
SKEW_THRESHOLD = 1.0
LOG_FLOOR = 1e-12

PBC2_BASELINE = ("age", "sex", "drug")
PBC2_MARKERS = (
    "serBilir",
    "serChol",
    "albumin",
    "alkaline",
    "SGOT",
    "platelets",
    "prothrombin",
    "histologic",
)

PathLike = Union[str, Path]


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(len(arr), -1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    id: str
    event_time: float
    event_indicator: bool
    baseline: np.ndarray
    visits: np.ndarray
    longitudinal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "event_time", float(self.event_time))
        object.__setattr__(self, "event_indicator", bool(self.event_indicator))
        object.__setattr__(self, "baseline", _frozen(self.baseline, 1))
        object.__setattr__(self, "visits", _frozen(self.visits, 1))
        longitudinal = _frozen(self.longitudinal, 2)
        if longitudinal.shape[0] != len(self.visits):
            if longitudinal.size == 0:
                longitudinal = _frozen(np.zeros((len(self.visits), 0)), 2)
            else:
                raise DatasetError(
                    "Longitudinal rows do not match visit count", subject=self.id
                )
        object.__setattr__(self, "longitudinal", longitudinal)

    @property
    def m(self) -> int:
        return len(self.visits)

    def check(self):
        if not self.m or self.visits[0] != 0.0:
            raise DatasetError("First visit must be at time 0", subject=self.id)
        if np.any(np.diff(self.visits) <= 0):
            raise DatasetError("Visit times must be strictly increasing", subject=self.id)
        if np.any(self.visits >= self.event_time):
            raise DatasetError("Visit time at or after event_time", subject=self.id)
        if np.isnan(self.baseline).any():
            raise DatasetError("Missing baseline covariate", subject=self.id)
        if np.isnan(self.longitudinal[0]).any():
            raise DatasetError(
                "Missing longitudinal value at the baseline visit", subject=self.id
            )

    def truncated(self, landmark: float) -> "SubjectRecord":
        keep = self.visits <= landmark
        # the baseline visit always survives truncation
        keep[0] = True
        if keep.all():
            return self
        return replace(self, visits=self.visits[keep], longitudinal=self.longitudinal[keep])

    def observations(self, covariate_index: int) -> Tuple[np.ndarray, np.ndarray]:
        values = self.longitudinal[:, covariate_index]
        present = ~np.isnan(values)
        return self.visits[present], values[present]


@dataclass
class LoadReport:
    excluded: dict = field(default_factory=dict)
    dropped_visits: int = 0

    def exclude(self, subject_id: str, reason: str):
        self.excluded[subject_id] = reason

    def summary(self) -> str:
        lines = [
            f"Excluded subjects: {len(self.excluded)}",
            f"Dropped visits: {self.dropped_visits}",
        ]
        reasons = {}
        for reason in self.excluded.values():
            reasons[reason] = reasons.get(reason, 0) + 1
        for reason, count in sorted(reasons.items()):
            lines.append(f"  {reason}: {count}")
        return "\n".join(lines)


class _SubjectCollection:
    subjects: Tuple[SubjectRecord, ...]

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def ids(self) -> Tuple[str, ...]:
        return tuple(subj.id for subj in self.subjects)

    @cached_property
    def index(self) -> dict:
        return {subj_id: pos for pos, subj_id in enumerate(self.ids)}

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([subj.event_time for subj in self.subjects], dtype=float)

    @cached_property
    def events(self) -> np.ndarray:
        return np.array([subj.event_indicator for subj in self.subjects], dtype=bool)

    def baseline_matrix(self) -> np.ndarray:
        if not self.subjects:
            return np.zeros((0, len(self.baseline_names)))
        return np.vstack([subj.baseline for subj in self.subjects])


@dataclass(frozen=True, eq=False)
class Dataset(_SubjectCollection):
    subjects: Tuple[SubjectRecord, ...]
    baseline_names: Tuple[str, ...]
    longitudinal_names: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "baseline_names", tuple(self.baseline_names))
        object.__setattr__(self, "longitudinal_names", tuple(self.longitudinal_names))
        if len(set(self.ids)) != len(self.ids):
            raise DatasetError("Subject ids must be unique")
        for subj in self.subjects:
            if len(subj.baseline) != self.P or subj.longitudinal.shape[1] != self.Q:
                raise DatasetError("Inconsistent covariate dimensions", subject=subj.id)

    @property
    def P(self) -> int:
        return len(self.baseline_names)

    @property
    def Q(self) -> int:
        return len(self.longitudinal_names)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        keep = set(str(subj_id) for subj_id in ids)
        return replace(self, subjects=tuple(s for s in self.subjects if s.id in keep))

    def select_covariates(
        self, baseline_names: Sequence[str], longitudinal_names: Sequence[str]
    ) -> "Dataset":
        base_idx = [self.baseline_names.index(name) for name in baseline_names]
        long_idx = [self.longitudinal_names.index(name) for name in longitudinal_names]
        subjects = tuple(
            replace(
                subj,
                baseline=subj.baseline[base_idx],
                longitudinal=subj.longitudinal[:, long_idx],
            )
            for subj in self.subjects
        )
        return Dataset(subjects, tuple(baseline_names), tuple(longitudinal_names))

    def to_frames(self) -> Tuple[pd.DataFrame, pd.DataFrame]:
        base_rows = []
        long_rows = []
        for subj in self.subjects:
            base_rows.append(
                [
                    subj.id,
                    format_float(subj.event_time),
                    "1" if subj.event_indicator else "0",
                    *(format_float(v) for v in subj.baseline),
                ]
            )
            for t, row in zip(subj.visits, subj.longitudinal):
                long_rows.append([subj.id, format_float(t), *(format_float(v) for v in row)])
        base = pd.DataFrame(base_rows, columns=[*BASELINE_COLUMNS, *self.baseline_names])
        long = pd.DataFrame(
            long_rows, columns=[*LONGITUDINAL_COLUMNS, *self.longitudinal_names]
        )
        return base, long

    def write_csv(self, baseline_csv: PathLike, longitudinal_csv: PathLike):
        base, long = self.to_frames()
        base.to_csv(baseline_csv, index=False)
        long.to_csv(longitudinal_csv, index=False)


def _read_csv(path: PathLike, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise DatasetError(f"Malformed CSV {path}: {err}") from None
    missing = [col for col in required if col not in frame.columns]
    if missing:
        raise DatasetError(f"Malformed CSV {path}: missing columns {missing}")
    return frame


def _numeric(frame: pd.DataFrame, column: str, path: PathLike) -> np.ndarray:
    try:
        return pd.to_numeric(frame[column], errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError):
        bad = pd.to_numeric(frame[column], errors="coerce").isna() & frame[column].notna()
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise DatasetError(f"Non-numeric value in column {column!r} of {path}", row=row)


def encode_baseline(frame: pd.DataFrame, columns: Sequence[str]) -> Tuple[np.ndarray, list]:
    """
    One-hot encode categorical baseline columns, first (sorted) level as reference.

    Numeric columns pass through unchanged; missing values stay missing in every
    indicator column of a categorical covariate.
    """
    blocks = []
    names = []
    for col in columns:
        series = frame[col]
        if pd.api.types.is_numeric_dtype(series) or pd.api.types.is_bool_dtype(series):
            blocks.append(series.to_numpy(dtype=float)[:, None])
            names.append(col)
            continue
        levels = sorted(series.dropna().astype(str).unique())
        if len(levels) < 2:
            # single-level categorical carries no information
            LOGGER.warning("Baseline covariate %r has fewer than two levels", col)
        codes = series.astype("string")
        for level in levels[1:]:
            col_vals = (codes == level).astype(float).to_numpy(dtype=float, na_value=np.nan)
            col_vals[series.isna().to_numpy()] = np.nan
            blocks.append(col_vals[:, None])
            names.append(f"{col}={level}")
    if not blocks:
        return np.zeros((len(frame), 0)), names
    return np.hstack(blocks), names


def load_dataset(
    baseline_csv: PathLike, longitudinal_csv: PathLike
) -> Tuple[Dataset, LoadReport]:
    base = _read_csv(baseline_csv, BASELINE_COLUMNS)
    long = _read_csv(longitudinal_csv, LONGITUDINAL_COLUMNS)
    report = LoadReport()

    if base["id"].isna().any() or long["id"].isna().any():
        raise DatasetError("Missing subject id")
    dup = base["id"].duplicated()
    if dup.any():
        raise DatasetError("Duplicated subject id", row=int(np.flatnonzero(dup)[0]) + 2)
    event_time = _numeric(base, "event_time", baseline_csv)
    indicator = _numeric(base, "event_indicator", baseline_csv)
    bad = np.isnan(event_time) | (event_time < 0) | ~np.isin(indicator, (0.0, 1.0))
    if bad.any():
        raise DatasetError(
            "Invalid event_time or event_indicator", row=int(np.flatnonzero(bad)[0]) + 2
        )

    baseline_cols = [c for c in base.columns if c not in BASELINE_COLUMNS]
    baseline, baseline_names = encode_baseline(base, baseline_cols)
    longitudinal_names = [c for c in long.columns if c not in LONGITUDINAL_COLUMNS]
    visit_time = _numeric(long, "time", longitudinal_csv)
    if np.isnan(visit_time).any() or (visit_time < 0).any():
        row = int(np.flatnonzero(np.isnan(visit_time) | (visit_time < 0))[0]) + 2
        raise DatasetError("Invalid visit time", row=row)
    values = np.column_stack(
        [_numeric(long, c, longitudinal_csv) for c in longitudinal_names]
    ) if longitudinal_names else np.zeros((len(long), 0))

    keys = pd.DataFrame({"id": long["id"], "time": visit_time})
    dup = keys.duplicated()
    if dup.any():
        raise DatasetError("Duplicated (id, time) pair", row=int(np.flatnonzero(dup)[0]) + 2)
    known = set(base["id"])
    unknown = ~long["id"].isin(known)
    if unknown.any():
        raise DatasetError(
            "Longitudinal row for unknown subject", row=int(np.flatnonzero(unknown)[0]) + 2
        )

    rows_by_id = {}
    for pos, subj_id in enumerate(long["id"]):
        rows_by_id.setdefault(subj_id, []).append(pos)

    subjects = []
    for pos, subj_id in enumerate(base["id"]):
        rows = np.array(rows_by_id.get(subj_id, []), dtype=int)
        if rows.size:
            rows = rows[np.argsort(visit_time[rows], kind="stable")]
            late = visit_time[rows] >= event_time[pos]
            if late.any() and event_time[pos] > 0:
                raise DatasetError(
                    "Visit time at or after event_time", row=int(rows[late][0]) + 2
                )
        if np.isnan(baseline[pos]).any():
            report.exclude(subj_id, "missing baseline covariate")
        elif event_time[pos] <= 0:
            report.exclude(subj_id, "no follow-up after baseline")
        elif not rows.size or visit_time[rows[0]] != 0.0:
            report.exclude(subj_id, "missing baseline visit")
        elif np.isnan(values[rows[0]]).any():
            report.exclude(subj_id, "missing longitudinal value at baseline visit")
        else:
            subjects.append(
                SubjectRecord(
                    id=subj_id,
                    event_time=event_time[pos],
                    event_indicator=bool(indicator[pos]),
                    baseline=baseline[pos],
                    visits=visit_time[rows],
                    longitudinal=values[rows],
                )
            )
            continue
        report.dropped_visits += int(rows.size)

    if report.excluded:
        LOGGER.info("Dataset load report:\n%s", report.summary())
    return Dataset(tuple(subjects), tuple(baseline_names), tuple(longitudinal_names)), report


@dataclass(frozen=True, eq=False)
class LandmarkSlice(_SubjectCollection):
    landmark: float
    mode: str
    subjects: Tuple[SubjectRecord, ...]
    baseline_names: Tuple[str, ...]
    longitudinal_names: Tuple[str, ...]
    grid: Optional[np.ndarray] = None
    dropped_visits: int = 0

    @property
    def risk_set_ids(self) -> Tuple[str, ...]:
        return self.ids

    @property
    def P(self) -> int:
        return len(self.baseline_names)

    @property
    def Q(self) -> int:
        return len(self.longitudinal_names)

    def take(self, positions: Sequence[int]) -> "LandmarkSlice":
        return replace(self, subjects=tuple(self.subjects[pos] for pos in positions))


def make_landmark_slice(data: Dataset, landmark: float, mode: str = STRICT) -> LandmarkSlice:
    if not landmark > 0:
        raise ValueError(f"Landmark must be positive: {landmark}")
    if mode not in LANDMARK_MODES:
        raise ValueError(f"Unsupported landmark mode: {mode!r}")
    at_risk = [subj for subj in data.subjects if subj.event_time > landmark]
    if not at_risk:
        raise EmptyRiskSet(f"No subjects at risk at landmark {landmark}")
    if mode == STRICT:
        at_risk = [subj.truncated(landmark) for subj in at_risk]
    return LandmarkSlice(
        landmark=float(landmark),
        mode=mode,
        subjects=tuple(at_risk),
        baseline_names=data.baseline_names,
        longitudinal_names=data.longitudinal_names,
    )


def schedule_grid(
    end: float, early: Sequence[float] = (0.5, 1.0), step: float = 1.0
) -> np.ndarray:
    points = [0.0, *(float(t) for t in early if 0 < t <= end)]
    nxt = points[-1] + step
    while nxt <= end + 1e-9:
        points.append(nxt)
        nxt += step
    return np.array(points)


def align_to_grid(
    slice: LandmarkSlice, grid: Sequence[float], tolerance: float = None
) -> LandmarkSlice:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or not len(grid) or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
        raise ValueError("Grid must be strictly increasing and start at 0")
    if tolerance is None:
        tolerance = np.diff(grid).min() / 2 if len(grid) > 1 else np.inf
    if slice.mode == STRICT:
        grid = grid[grid <= slice.landmark]
    dropped = 0
    subjects = []
    for subj in slice.subjects:
        pos = np.clip(np.searchsorted(grid, subj.visits), 1, max(len(grid) - 1, 1))
        if len(grid) == 1:
            nearest = np.zeros(subj.m, dtype=int)
        else:
            lower = pos - 1
            nearest = np.where(
                np.abs(subj.visits - grid[lower]) <= np.abs(grid[pos] - subj.visits),
                lower,
                pos,
            )
        dist = np.abs(subj.visits - grid[nearest])
        snapped = {}
        for row, (gidx, d) in enumerate(zip(nearest, dist)):
            if d <= tolerance + 1e-12 and grid[gidx] < subj.event_time:
                # later visits overwrite earlier ones at the same grid point
                snapped[int(gidx)] = row
        keep = sorted(snapped)
        dropped += subj.m - len(keep)
        rows = [snapped[g] for g in keep]
        subjects.append(
            replace(subj, visits=grid[keep], longitudinal=subj.longitudinal[rows])
        )
    if dropped:
        LOGGER.info("Grid alignment dropped %d visits", dropped)
    return replace(
        slice,
        subjects=tuple(subjects),
        grid=grid,
        dropped_visits=slice.dropped_visits + dropped,
    )


@dataclass(frozen=True)
class TransformSpec:
    kinds: Tuple[str, ...]
    offsets: Tuple[float, ...]

    def apply_values(self, covariate_index: int, values: np.ndarray) -> np.ndarray:
        match self.kinds[covariate_index]:
            case "log":
                shifted = values + self.offsets[covariate_index]
                return np.log(np.maximum(shifted, LOG_FLOOR))
            case "cubic":
                return values**3
            case _:
                return values

    def serialize(self) -> dict:
        return {"kinds": list(self.kinds), "offsets": list(self.offsets)}


def fit_transform_spec(slice: LandmarkSlice) -> TransformSpec:
    kinds = []
    offsets = []
    for q, name in enumerate(slice.longitudinal_names):
        pooled = np.concatenate(
            [subj.longitudinal[:, q] for subj in slice.subjects] or [np.zeros(0)]
        )
        pooled = pooled[~np.isnan(pooled)]
        kind = IDENTITY
        offset = 0.0
        if len(pooled) < 3:
            LOGGER.warning("Too few values to assess skewness of %r, using identity", name)
        else:
            skew = stats.skew(pooled, bias=False)
            if skew > SKEW_THRESHOLD:
                kind = LOG
                low = pooled.min()
                if low <= 0:
                    offset = 1.0 - low
            elif skew < -SKEW_THRESHOLD:
                kind = CUBIC
        kinds.append(kind)
        offsets.append(float(offset))
    return TransformSpec(tuple(kinds), tuple(offsets))


def apply_transform(slice: LandmarkSlice, spec: TransformSpec) -> LandmarkSlice:
    if len(spec.kinds) != slice.Q:
        raise ValueError("Transform does not match the longitudinal covariates")
    if all(kind == IDENTITY for kind in spec.kinds):
        return slice
    clipped = np.zeros(slice.Q, dtype=int)
    subjects = []
    for subj in slice.subjects:
        values = np.array(subj.longitudinal)
        for q in range(slice.Q):
            if spec.kinds[q] == LOG:
                clipped[q] += int(np.sum(values[:, q] + spec.offsets[q] < LOG_FLOOR))
            values[:, q] = spec.apply_values(q, values[:, q])
        subjects.append(replace(subj, longitudinal=values))
    for q in np.flatnonzero(clipped):
        LOGGER.warning(
            "Clipped %d values of %r below the log offset",
            clipped[q],
            slice.longitudinal_names[q],
        )
    return replace(slice, subjects=tuple(subjects))


def convert_pbc2(
    long_csv: PathLike,
    out_dir: PathLike,
    *,
    baseline_columns: Sequence[str] = PBC2_BASELINE,
    markers: Sequence[str] = PBC2_MARKERS,
) -> Tuple[Path, Path]:
    """
    Convert the public long-format PBC2 table into the two-file dataset schema.

    The source has one row per visit (`id, years, status, ..., year, <markers>`);
    death is the event, transplantation and alive-at-end are censored.
    """
    frame = pd.read_csv(long_csv, dtype={"id": str})
    required = ["id", "years", "status", "year", *baseline_columns, *markers]
    missing = [col for col in required if col not in frame.columns]
    if missing:
        raise DatasetError(f"Malformed PBC2 table: missing columns {missing}")
    first = frame.sort_values(["id", "year"]).groupby("id", sort=False).first()
    base = pd.DataFrame(
        {
            "id": first.index,
            "event_time": first["years"].to_numpy(dtype=float),
            "event_indicator": (first["status"].astype(str) == "dead").astype(int),
        }
    )
    for col in baseline_columns:
        base[col] = first[col].to_numpy()
    long = frame[["id", "year", *markers]].rename(columns={"year": "time"})
    follow_up = frame["id"].map(dict(zip(base["id"], base["event_time"])))
    late = long["time"] >= follow_up
    if late.any():
        LOGGER.info("Dropping %d PBC2 visits at or after the event time", int(late.sum()))
    long = long[~late].drop_duplicates(["id", "time"], keep="last")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_path = out_dir.joinpath("pbc2_baseline.csv")
    long_path = out_dir.joinpath("pbc2_longitudinal.csv")
    base.to_csv(base_path, index=False)
    long.sort_values(["id", "time"]).to_csv(long_path, index=False)
    return base_path, long_path
