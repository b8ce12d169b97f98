import logging
import math

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from joblib import Parallel, delayed

from .dataset import LandmarkSlice
from .errors import FitFailed, NonEstimable
from .lmm import LmmData, LmmFit, blup, fit_lmm_ladder
from .prediction import SurvivalPrediction

LOGGER = logging.getLogger(__name__)

LEAF = -1
DECILES = np.linspace(0.1, 0.9, 9)

RSF = "rsf"
DYNFOREST = "dynforest"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 1000
    mtry: Optional[int] = None
    min_node_subjects: Tuple[int, ...] = (15,)
    min_node_events: int = 0
    max_split_candidates: int = 50
    bootstrap: bool = True
    seed: int = 0
    n_jobs: int = 1
    debug: bool = False

    def __post_init__(self):
        ladder = self.min_node_subjects
        if isinstance(ladder, int):
            ladder = (ladder,)
        ladder = tuple(int(s) for s in ladder)
        object.__setattr__(self, "min_node_subjects", ladder)
        if not isinstance(self.n_trees, int) or self.n_trees < 1:
            raise ValueError(f"Invalid tree count: {self.n_trees}")
        if self.mtry is not None and (not isinstance(self.mtry, int) or self.mtry < 1):
            raise ValueError(f"Invalid mtry: {self.mtry}")
        if not ladder or min(ladder) < 1 or list(ladder) != sorted(ladder):
            raise ValueError(f"Invalid minimum node size ladder: {ladder}")
        if not isinstance(self.min_node_events, int) or self.min_node_events < 0:
            raise ValueError(f"Invalid minimum node events: {self.min_node_events}")
        if self.max_split_candidates < 2:
            raise ValueError(f"Invalid split candidate count: {self.max_split_candidates}")

    @classmethod
    def funrsf(cls, **overrides) -> "ForestConfig":
        return cls(**{"n_trees": 1000, "min_node_subjects": (15,), **overrides})

    @classmethod
    def dynforest(cls, **overrides) -> "ForestConfig":
        return cls(
            **{
                "n_trees": 200,
                "min_node_subjects": (15, 30, 50),
                "min_node_events": 5,
                **overrides,
            }
        )

    @classmethod
    def from_dict(cls, value: dict, base: "ForestConfig" = None) -> "ForestConfig":
        base = base or cls()
        params = asdict(base)
        for key, item in value.items():
            if key not in params:
                raise ValueError(f"Unsupported forest parameter: {key}")
            match key:
                case "min_node_subjects":
                    if isinstance(item, list):
                        item = tuple(item)
                case "debug" | "bootstrap":
                    if not isinstance(item, bool):
                        raise ValueError(f"Unsupported value for {key}: {item!r}")
            params[key] = item
        return cls(**params)

    def serialize(self) -> dict:
        out = asdict(self)
        out["min_node_subjects"] = list(self.min_node_subjects)
        return out

    def resolve_mtry(self, n_variables: int) -> int:
        mtry = self.mtry or math.ceil(math.sqrt(n_variables))
        return max(1, min(mtry, n_variables))


def nelson_aalen(times: np.ndarray, events: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    event_times, deaths = np.unique(times[events], return_counts=True)
    if not len(event_times):
        return event_times, np.zeros(0)
    at_risk = len(times) - np.searchsorted(np.sort(times), event_times, side="left")
    return event_times, np.cumsum(deaths / at_risk)


def candidate_thresholds(values: np.ndarray, max_candidates: int = 50) -> np.ndarray:
    distinct = np.unique(values)
    if len(distinct) < 2:
        return np.zeros(0)
    if len(distinct) <= max_candidates:
        return (distinct[:-1] + distinct[1:]) / 2
    cuts = np.unique(np.quantile(values, DECILES))
    return cuts[cuts < distinct[-1]]


def logrank_statistics(
    values: np.ndarray, thresholds: np.ndarray, times: np.ndarray, events: np.ndarray
) -> np.ndarray:
    """Squared standardized two-sample log-rank statistic of `values <= c` per threshold."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    event_times = np.unique(times[events])
    if not len(event_times) or not len(thresholds):
        return np.zeros(len(thresholds))
    at_risk = (times[:, None] >= event_times[None, :]).astype(float)
    deaths = ((times[:, None] == event_times[None, :]) & events[:, None]).astype(float)
    left = (np.asarray(values)[:, None] <= np.asarray(thresholds)[None, :]).astype(float)
    Y = at_risk.sum(axis=0)
    d = deaths.sum(axis=0)
    Y1 = left.T @ at_risk
    d1 = left.T @ deaths
    frac = Y1 / Y
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where(Y > 1, frac * (1 - frac) * d * (Y - d) / (Y - 1), 0.0)
    num = np.sum(d1 - frac * d, axis=1)
    den = var.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num**2 / den, 0.0)


class _StaticFeatures:
    def __init__(self, features: np.ndarray):
        self.features = np.asarray(features, dtype=float)
        self.n_variables = self.features.shape[1]

    def candidates(self, variable: int, members: np.ndarray):
        return [(variable, self.features[members, variable], None)]

    def values(self, column: int, fit: Optional[LmmFit], idx: np.ndarray) -> np.ndarray:
        return self.features[idx, column]


class _DynamicFeatures:
    """Baseline columns plus random-effect columns refitted on each node's subjects."""

    def __init__(self, baseline: np.ndarray, longitudinal: Sequence[LmmData]):
        self.baseline = np.asarray(baseline, dtype=float)
        self.longitudinal = tuple(longitudinal)
        self.P = self.baseline.shape[1]
        self.n_variables = self.P + len(self.longitudinal)

    @classmethod
    def from_slice(cls, slice: LandmarkSlice, baseline: np.ndarray = None) -> "_DynamicFeatures":
        baseline = slice.baseline_matrix() if baseline is None else baseline
        return cls(baseline, [LmmData.from_slice(slice, q) for q in range(slice.Q)])

    def candidates(self, variable: int, members: np.ndarray):
        if variable < self.P:
            return [(variable, self.baseline[members, variable], None)]
        q = variable - self.P
        data = self.longitudinal[q].take(members)
        try:
            fit = fit_lmm_ladder(data)
        except (NonEstimable, np.linalg.LinAlgError):
            return None
        if not fit.converged:
            return None
        effects = blup(fit, data).values
        column = self.P + 2 * q
        return [(column, effects[:, 0], fit), (column + 1, effects[:, 1], fit)]

    def values(self, column: int, fit: Optional[LmmFit], idx: np.ndarray) -> np.ndarray:
        if column < self.P:
            return self.baseline[idx, column]
        q, component = divmod(column - self.P, 2)
        return blup(fit, self.longitudinal[q].take(idx)).values[:, component]


@dataclass(frozen=True, eq=False)
class SurvivalTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    node_fits: Tuple[Optional[LmmFit], ...]
    leaf_times: Tuple[np.ndarray, ...]
    leaf_chf: Tuple[np.ndarray, ...]
    inbag: np.ndarray
    oob: np.ndarray
    audit: Tuple[dict, ...] = ()
    # root left terminal because no candidate model could be fitted at any node size
    failed: bool = False

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_stump(self) -> bool:
        return self.feature[0] == LEAF

    def route(self, provider, n: int) -> np.ndarray:
        leaves = np.zeros(n, dtype=int)
        stack = [(0, np.arange(n))]
        while stack:
            node, idx = stack.pop()
            if not len(idx):
                continue
            if self.feature[node] == LEAF:
                leaves[idx] = node
                continue
            values = provider.values(self.feature[node], self.node_fits[node], idx)
            go_left = values <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return leaves

    def cumulative_hazard(self, provider, n: int, horizons: np.ndarray) -> np.ndarray:
        leaves = self.route(provider, n)
        out = np.zeros((n, len(horizons)))
        for leaf in np.unique(leaves):
            times, chf = self.leaf_times[leaf], self.leaf_chf[leaf]
            pos = np.searchsorted(times, horizons, side="right") - 1
            curve = np.where(pos >= 0, chf[np.maximum(pos, 0)] if len(chf) else 0.0, 0.0)
            out[leaves == leaf] = curve
        return out


@dataclass
class _Split:
    column: int
    threshold: float
    statistic: float
    fit: Optional[LmmFit]
    go_left: np.ndarray


def _best_split(provider, members, times, events, config, min_subjects, rng, audit):
    t = times[members]
    d = events[members]
    n_node = len(members)
    n_events = int(d.sum())
    e = config.min_node_events
    if n_node < 2 * min_subjects or n_events < max(2 * e, 1):
        return None, False
    variables = rng.choice(
        provider.n_variables, size=config.resolve_mtry(provider.n_variables), replace=False
    )
    best = None
    failed = 0
    for variable in variables:
        cands = provider.candidates(int(variable), members)
        if cands is None:
            failed += 1
            continue
        for column, values, fit in cands:
            thresholds = candidate_thresholds(values, config.max_split_candidates)
            if not len(thresholds):
                continue
            stats = logrank_statistics(values, thresholds, t, d)
            left = values[:, None] <= thresholds[None, :]
            n_left = left.sum(axis=0)
            e_left = (left & d[:, None]).sum(axis=0)
            valid = (
                (n_left >= min_subjects)
                & (n_node - n_left >= min_subjects)
                & (e_left >= e)
                & (n_events - e_left >= e)
                & (stats > 0)
            )
            if not valid.any():
                continue
            pos = int(np.argmax(np.where(valid, stats, -np.inf)))
            if audit is not None:
                audit.append({"column": column, "threshold": thresholds[pos],
                              "statistic": stats[pos]})
            if best is None or stats[pos] > best.statistic:
                best = _Split(column, float(thresholds[pos]), float(stats[pos]), fit, left[:, pos])
    return best, bool(failed) and failed == len(variables)


def _grow_tree(provider, times, events, config: ForestConfig, tree_index: int) -> SurvivalTree:
    rng = np.random.default_rng([config.seed, tree_index])
    n = len(times)
    sample = rng.integers(0, n, n) if config.bootstrap else np.arange(n)
    ladder = config.min_node_subjects

    feature, threshold, left, right, fits, leaf_times, leaf_chf = [], [], [], [], [], [], []
    audit = []
    root_failed = False

    def new_node() -> int:
        for col, val in (
            (feature, LEAF), (threshold, np.nan), (left, LEAF), (right, LEAF), (fits, None)
        ):
            col.append(val)
        leaf_times.append(np.zeros(0))
        leaf_chf.append(np.zeros(0))
        return len(feature) - 1

    stack = [(new_node(), sample, 0, 0)]
    while stack:
        node, members, depth, level = stack.pop()
        split = None
        failed = False
        candidates = [] if config.debug else None
        while level < len(ladder):
            split, failed = _best_split(
                provider, members, times, events, config, ladder[level], rng, candidates
            )
            if not failed:
                break
            # every candidate mixed model failed: retry with a larger minimum size
            level += 1
        if split is None:
            leaf_times[node], leaf_chf[node] = nelson_aalen(times[members], events[members])
            root_failed = root_failed or (node == 0 and failed)
            continue
        feature[node] = split.column
        threshold[node] = split.threshold
        fits[node] = split.fit
        row = {
            "tree": tree_index,
            "node": node,
            "depth": depth,
            "n_subjects": len(members),
            "n_events": int(events[members].sum()),
            "column": split.column,
            "threshold": split.threshold,
            "statistic": split.statistic,
            "min_node_subjects": ladder[level],
            "chosen": True,
        }
        audit.append(row)
        for cand in candidates or ():
            if cand["column"] != split.column or cand["threshold"] != split.threshold:
                audit.append({**row, **cand, "chosen": False})
        left[node] = new_node()
        right[node] = new_node()
        stack.append((right[node], members[~split.go_left], depth + 1, level))
        stack.append((left[node], members[split.go_left], depth + 1, level))

    inbag = np.unique(sample)
    return SurvivalTree(
        feature=np.array(feature, dtype=int),
        threshold=np.array(threshold, dtype=float),
        left=np.array(left, dtype=int),
        right=np.array(right, dtype=int),
        node_fits=tuple(fits),
        leaf_times=tuple(leaf_times),
        leaf_chf=tuple(leaf_chf),
        inbag=inbag,
        oob=np.setdiff1d(np.arange(n), inbag),
        audit=tuple(audit),
        failed=root_failed,
    )


@dataclass(frozen=True, eq=False)
class ForestFit:
    trees: Tuple[SurvivalTree, ...]
    feature_names: Tuple[str, ...]
    kind: str
    config: ForestConfig
    n_train: int
    max_time: float
    n_baseline: int = 0

    def failed_trees(self) -> int:
        return sum(tree.failed for tree in self.trees)

    def oob_fraction(self) -> float:
        return float(np.mean([len(tree.oob) / self.n_train for tree in self.trees]))

    def split_frame(self) -> pd.DataFrame:
        rows = [dict(row) for tree in self.trees for row in tree.audit]
        frame = pd.DataFrame(
            rows,
            columns=[
                "tree", "node", "depth", "n_subjects", "n_events", "column",
                "threshold", "statistic", "min_node_subjects", "chosen",
            ],
        )
        frame.insert(6, "feature", [self.feature_names[c] for c in frame["column"]])
        return frame.drop(columns="column")

    def root_split_counts(self) -> pd.Series:
        names = [self.feature_names[t.feature[0]] for t in self.trees if not t.is_stump]
        return pd.Series(names, dtype=object).value_counts()


def _check_outcomes(n: int, times, events):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if len(times) != n or len(events) != n:
        raise ValueError("Features do not match the outcomes")
    if n < 2:
        raise NonEstimable("Forest requires at least two subjects")
    return times, events


def _fit_forest(provider, times, events, config, kind, names, n_baseline=0) -> ForestFit:
    trees = Parallel(n_jobs=config.n_jobs)(
        delayed(_grow_tree)(provider, times, events, config, b) for b in range(config.n_trees)
    )
    return ForestFit(
        trees=tuple(trees),
        feature_names=tuple(names),
        kind=kind,
        config=config,
        n_train=len(times),
        max_time=float(times[events].max()) if events.any() else 0.0,
        n_baseline=n_baseline,
    )


def fit_rsf(
    features: np.ndarray,
    times: np.ndarray,
    events: np.ndarray,
    config: ForestConfig = None,
    feature_names: Sequence[str] = (),
) -> ForestFit:
    config = config or ForestConfig.funrsf()
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ValueError("Forest features must be a finite matrix")
    times, events = _check_outcomes(X.shape[0], times, events)
    names = tuple(feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
    return _fit_forest(_StaticFeatures(X), times, events, config, RSF, names)


def dynamic_feature_names(slice: LandmarkSlice) -> Tuple[str, ...]:
    names = list(slice.baseline_names)
    for name in slice.longitudinal_names:
        names.extend((f"{name}:intercept", f"{name}:slope"))
    return tuple(names)


def fit_dynforest(
    slice: LandmarkSlice, baseline_features: np.ndarray = None, config: ForestConfig = None
) -> ForestFit:
    config = config or ForestConfig.dynforest()
    provider = _DynamicFeatures.from_slice(slice, baseline_features)
    times, events = _check_outcomes(provider.baseline.shape[0], slice.times, slice.events)
    fit = _fit_forest(
        provider, times, events, config, DYNFOREST, dynamic_feature_names(slice), provider.P
    )
    failed = fit.failed_trees()
    if failed == len(fit.trees):
        raise FitFailed(f"Mixed models failed at the root of all {failed} trees")
    if failed:
        LOGGER.warning("Mixed models failed at the root of %d of %d trees", failed, len(fit.trees))
    return fit


def _tree_hazard(tree: SurvivalTree, provider, n: int, horizons: np.ndarray) -> np.ndarray:
    return tree.cumulative_hazard(provider, n, horizons)


def predict_forest_survival(
    fit: ForestFit,
    new: Union[np.ndarray, LandmarkSlice],
    landmark: float,
    horizons: Sequence[float],
    ids: Sequence[str] = (),
) -> SurvivalPrediction:
    horizons = np.asarray(horizons, dtype=float)
    if np.any(horizons <= landmark):
        raise ValueError("Horizons must all exceed the landmark")
    if isinstance(new, LandmarkSlice):
        if fit.kind != DYNFOREST:
            raise ValueError("Slices can only be predicted by node-refitting forests")
        provider = _DynamicFeatures.from_slice(new)
        n = new.n
        ids = new.ids
    else:
        provider = _StaticFeatures(new)
        n = provider.features.shape[0]
    if not n:
        return SurvivalPrediction(landmark, horizons, np.zeros((0, len(horizons))), [], ())
    parts = Parallel(n_jobs=fit.config.n_jobs)(
        delayed(_tree_hazard)(tree, provider, n, horizons) for tree in fit.trees
    )
    hazard = np.mean(parts, axis=0)
    return SurvivalPrediction(
        landmark=landmark,
        horizons=horizons,
        survival=np.exp(-hazard),
        risk_scores=hazard[:, -1],
        ids=tuple(ids),
        extrapolated=horizons > fit.max_time,
    )
