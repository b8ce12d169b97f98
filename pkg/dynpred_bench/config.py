import json
import logging
import os

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from dynpred.dataset import LANDMARK_MODES, STRICT, Dataset, load_dataset
from dynpred.format import config_hash
from dynpred.pipelines import MethodSpec

from .const import THREADS_ENV
from .harness import PREDICTORS, SUBJECTS, CvPlan, horizon_grid
from .simulation import SimConfig, simulate_joint_data

LOGGER = logging.getLogger(__name__)


def _number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


@dataclass(frozen=True)
class DataSource:
    baseline: Path
    longitudinal: Path
    baseline_covariates: Optional[Tuple[str, ...]] = None
    longitudinal_covariates: Optional[Tuple[str, ...]] = None

    @classmethod
    def from_dict(cls, value: dict, root: Path) -> "DataSource":
        if not isinstance(value, dict):
            raise ValueError("Unsupported value for 'data'")
        params = {}
        for key, item in value.items():
            if key in ("baseline", "longitudinal"):
                if not isinstance(item, str) or not item:
                    raise ValueError(f"Unsupported value for 'data.{key}': {item!r}")
                params[key] = root.joinpath(item)
            elif key in ("baseline_covariates", "longitudinal_covariates"):
                if not isinstance(item, list) or not all(isinstance(v, str) for v in item):
                    raise ValueError(f"Unsupported value for 'data.{key}': {item!r}")
                params[key] = tuple(item)
            else:
                raise ValueError(f"Unsupported data parameter: {key}")
        if "baseline" not in params or "longitudinal" not in params:
            raise ValueError("Data source requires 'baseline' and 'longitudinal' paths")
        return cls(**params)

    def load(self) -> Dataset:
        data, report = load_dataset(self.baseline, self.longitudinal)
        if report.excluded or report.dropped_visits:
            LOGGER.warning(report.summary())
        if self.baseline_covariates is not None or self.longitudinal_covariates is not None:
            data = data.select_covariates(
                self.baseline_covariates
                if self.baseline_covariates is not None
                else data.baseline_names,
                self.longitudinal_covariates
                if self.longitudinal_covariates is not None
                else data.longitudinal_names,
            )
        return data

    def serialize(self) -> dict:
        out = {"baseline": str(self.baseline), "longitudinal": str(self.longitudinal)}
        if self.baseline_covariates is not None:
            out["baseline_covariates"] = list(self.baseline_covariates)
        if self.longitudinal_covariates is not None:
            out["longitudinal_covariates"] = list(self.longitudinal_covariates)
        return out


@dataclass(frozen=True)
class AblationSpec:
    fractions: Tuple[float, ...]
    axis: str = SUBJECTS

    @classmethod
    def from_dict(cls, value: dict) -> "AblationSpec":
        if not isinstance(value, dict):
            raise ValueError("Unsupported value for 'ablation'")
        params = {}
        for key, item in value.items():
            if key == "fractions":
                if (
                    not isinstance(item, list)
                    or not item
                    or not all(_number(v) and 0 < v <= 1 for v in item)
                ):
                    raise ValueError(f"Unsupported value for 'ablation.fractions': {item!r}")
                params[key] = tuple(float(v) for v in item)
            elif key == "axis":
                if item not in (SUBJECTS, PREDICTORS):
                    raise ValueError(f"Unsupported ablation axis: {item!r}")
                params[key] = item
            else:
                raise ValueError(f"Unsupported ablation parameter: {key}")
        if "fractions" not in params:
            raise ValueError("Ablation requires 'fractions'")
        return cls(**params)

    def serialize(self) -> dict:
        return {"fractions": list(self.fractions), "axis": self.axis}


@dataclass(frozen=True)
class RunConfig:
    methods: Tuple[MethodSpec, ...]
    landmarks: Tuple[float, ...]
    horizons: Union[Tuple[float, ...], Dict[str, float]]
    cv: CvPlan
    out: Path
    data: Optional[DataSource] = None
    simulation: Optional[SimConfig] = None
    seed: int = 0
    threads: int = 1
    landmark_mode: str = STRICT
    ablation: Optional[AblationSpec] = None
    export: bool = False
    timing_in_results: bool = False

    def resolved_horizons(self) -> Dict[float, Tuple[float, ...]]:
        if isinstance(self.horizons, dict):
            return {
                lm: horizon_grid(lm, self.horizons["end"], self.horizons.get("step", 1.0))
                for lm in self.landmarks
            }
        return {lm: tuple(self.horizons) for lm in self.landmarks}

    def load_data(self) -> Dataset:
        if self.data is not None:
            return self.data.load()
        return simulate_joint_data(self.simulation)

    def serialize(self) -> dict:
        """The resolved run settings; thread count and output location are excluded."""
        out = {
            "methods": [spec.serialize() for spec in self.methods],
            "landmarks": list(self.landmarks),
            "horizons": dict(self.horizons)
            if isinstance(self.horizons, dict)
            else list(self.horizons),
            "cv": self.cv.serialize(),
            "seed": self.seed,
            "landmark_mode": self.landmark_mode,
            "export": self.export,
            "timing_in_results": self.timing_in_results,
        }
        if self.data is not None:
            out["data"] = self.data.serialize()
        if self.simulation is not None:
            out["simulation"] = self.simulation.serialize()
        if self.ablation is not None:
            out["ablation"] = self.ablation.serialize()
        return out

    def config_hash(self) -> str:
        return config_hash(self.serialize())


def _parse_horizons(item):
    if isinstance(item, list):
        if not item or not all(_number(v) for v in item):
            raise ValueError(f"Unsupported value for 'horizons': {item!r}")
        return tuple(float(v) for v in item)
    if isinstance(item, dict):
        if "end" not in item or set(item) - {"end", "step"}:
            raise ValueError(f"Unsupported value for 'horizons': {item!r}")
        if not all(_number(v) for v in item.values()) or item.get("step", 1.0) <= 0:
            raise ValueError(f"Unsupported value for 'horizons': {item!r}")
        return {k: float(v) for k, v in item.items()}
    raise ValueError(f"Unsupported value for 'horizons': {item!r}")


def _parse_cv(item) -> dict:
    if not isinstance(item, dict):
        raise ValueError("Unsupported value for 'cv'")
    params = {}
    for key, value in item.items():
        if key in ("k", "repetitions"):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ValueError(f"Unsupported value for 'cv.{key}': {value!r}")
        elif key == "stratify":
            if not isinstance(value, bool):
                raise ValueError(f"Unsupported value for 'cv.stratify': {value!r}")
        else:
            raise ValueError(f"Unsupported cv parameter: {key}")
        params[key] = value
    return params


def default_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        threads = int(value)
    except ValueError:
        raise ValueError(f"Invalid {THREADS_ENV} value: {value!r}") from None
    if threads == 0:
        raise ValueError(f"Invalid {THREADS_ENV} value: {value!r}")
    return threads


def parse_run_config(value: dict, root: Path = None, overrides: dict = None) -> RunConfig:
    if not isinstance(value, dict):
        raise ValueError("Run configuration must be an object")
    root = Path(root or ".")
    value = {**value, **{k: v for k, v in (overrides or {}).items() if v is not None}}
    params = {"threads": default_threads()}
    cv = {}
    sim = None
    for key, item in value.items():
        if key == "data":
            params["data"] = DataSource.from_dict(item, root)
        elif key == "simulation":
            if not isinstance(item, dict):
                raise ValueError("Unsupported value for 'simulation'")
            sim = item
        elif key == "methods":
            if not isinstance(item, list) or not item:
                raise ValueError("At least one method is required")
            methods = tuple(MethodSpec.from_dict(entry) for entry in item)
            names = [spec.name for spec in methods]
            if len(set(names)) != len(names):
                raise ValueError("Method names must be unique")
            params["methods"] = methods
        elif key == "landmarks":
            if not isinstance(item, list) or not item or not all(
                _number(v) and v > 0 for v in item
            ):
                raise ValueError(f"Unsupported value for 'landmarks': {item!r}")
            params["landmarks"] = tuple(sorted(float(v) for v in item))
        elif key == "horizons":
            params["horizons"] = _parse_horizons(item)
        elif key == "cv":
            cv = _parse_cv(item)
        elif key == "seed":
            if not isinstance(item, int) or isinstance(item, bool) or item < 0:
                raise ValueError(f"Unsupported value for 'seed': {item!r}")
            params["seed"] = item
        elif key == "out":
            if not isinstance(item, (str, Path)) or not str(item):
                raise ValueError(f"Unsupported value for 'out': {item!r}")
            params["out"] = root.joinpath(item)
        elif key == "threads":
            if not isinstance(item, int) or isinstance(item, bool) or item == 0:
                raise ValueError(f"Unsupported value for 'threads': {item!r}")
            params["threads"] = item
        elif key == "landmark_mode":
            if item not in LANDMARK_MODES:
                raise ValueError(f"Unsupported landmark mode: {item!r}")
            params["landmark_mode"] = item
        elif key == "ablation":
            params["ablation"] = AblationSpec.from_dict(item)
        elif key in ("export", "timing_in_results"):
            if not isinstance(item, bool):
                raise ValueError(f"Unsupported value for '{key}': {item!r}")
            params[key] = item
        else:
            raise ValueError(f"Unsupported configuration key: {key}")

    for key in ("methods", "landmarks", "horizons", "out"):
        if key not in params:
            raise ValueError(f"Missing configuration key: {key!r}")
    if ("data" in params) == (sim is not None):
        raise ValueError("Exactly one of 'data' and 'simulation' is required")
    seed = params.get("seed", 0)
    if sim is not None:
        # a seed given on the command line wins over the simulation section
        sim = {"seed": seed, **sim}
        if (overrides or {}).get("seed") is not None:
            sim["seed"] = seed
        params["simulation"] = SimConfig.from_dict(sim)
    params["cv"] = CvPlan(seed=seed, **cv)
    for lm, hz in RunConfig(**params).resolved_horizons().items():
        if not hz or min(hz) <= lm:
            raise ValueError(f"Horizons for landmark {lm} must all exceed it")
    return RunConfig(**params)


def load_run_config(path: Union[str, Path], overrides: dict = None) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as config_file:
            value = json.load(config_file)
    except OSError as err:
        raise ValueError(f"Cannot read configuration: {err}") from None
    except json.JSONDecodeError as err:
        raise ValueError(f"Invalid configuration JSON: {err}") from None
    return parse_run_config(value, path.parent, overrides)

