"""Joint longitudinal and survival data from random-effect trajectories."""

from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import numpy as np

from dynpred.dataset import Dataset, SubjectRecord

DEFAULT_GRID = (0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0)

Pair = Tuple[float, float]
Matrix = Tuple[Pair, Pair]


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    beta: Tuple[Pair, ...] = ((1.0, 0.5),)
    Sigma: Tuple[Matrix, ...] = (((0.4, 0.0), (0.0, 0.1)),)
    sigma2: Tuple[float, ...] = (0.25,)
    link_intercept: Tuple[float, ...] = (0.0,)
    link_slope: Tuple[float, ...] = (0.0,)
    baseline_effects: Tuple[float, ...] = ()
    visit_grid: Tuple[float, ...] = DEFAULT_GRID
    weibull_scale: float = 6.0
    weibull_shape: float = 1.5
    censoring_rate: float = 0.05
    administrative_censoring: Optional[float] = None
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("beta", "Sigma", "sigma2", "link_intercept", "link_slope"):
            object.__setattr__(self, name, _tuples(getattr(self, name)))
        object.__setattr__(self, "baseline_effects", _tuples(self.baseline_effects))
        object.__setattr__(self, "visit_grid", _tuples(self.visit_grid))
        Q = len(self.beta)
        for name in ("Sigma", "sigma2", "link_intercept", "link_slope"):
            if len(getattr(self, name)) != Q:
                raise ValueError(f"Parameter {name} must have one entry per covariate")
        if not isinstance(self.n, int) or self.n < 0:
            raise ValueError(f"Invalid subject count: {self.n}")
        grid = np.asarray(self.visit_grid, dtype=float)
        if not len(grid) or grid[0] != 0 or np.any(np.diff(grid) <= 0):
            raise ValueError("Visit grid must be strictly increasing and start at 0")
        for cov in self.Sigma:
            cov = np.asarray(cov, dtype=float)
            if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
                raise ValueError("Random-effect covariances must be symmetric 2x2")
            if np.linalg.eigvalsh(cov).min() < -1e-12:
                raise ValueError("Random-effect covariances must be positive semidefinite")
        if any(s2 <= 0 for s2 in self.sigma2):
            raise ValueError("Residual variances must be positive")
        if self.weibull_scale <= 0 or self.weibull_shape <= 0:
            raise ValueError("Weibull scale and shape must be positive")
        if self.censoring_rate < 0:
            raise ValueError(f"Invalid censoring rate: {self.censoring_rate}")
        if self.administrative_censoring is not None and self.administrative_censoring <= 0:
            raise ValueError("Administrative censoring time must be positive")
        if not 0 <= self.missing_rate < 1:
            raise ValueError(f"Invalid missing rate: {self.missing_rate}")

    @property
    def Q(self) -> int:
        return len(self.beta)

    @property
    def P(self) -> int:
        return len(self.baseline_effects)

    @classmethod
    def null(cls, n: int = 500, Q: int = 3, P: int = 2, **overrides) -> "SimConfig":
        params = {
            "n": n,
            "beta": ((1.0, 0.5),) * Q,
            "Sigma": (((0.4, 0.0), (0.0, 0.1)),) * Q,
            "sigma2": (0.25,) * Q,
            "link_intercept": (0.0,) * Q,
            "link_slope": (0.0,) * Q,
            "baseline_effects": (0.0,) * P,
        }
        return cls(**{**params, **overrides})

    @classmethod
    def slope_driven(cls, n: int = 800, Q: int = 5, P: int = 2, **overrides) -> "SimConfig":
        slopes = [0.0] * Q
        slopes[0] = 3.0
        if Q > 1:
            slopes[1] = 1.5
        params = {
            "n": n,
            "beta": ((1.0, 0.5),) * Q,
            "Sigma": (((0.4, 0.05), (0.05, 0.1)),) * Q,
            "sigma2": (0.25,) * Q,
            "link_intercept": (0.0,) * Q,
            "link_slope": tuple(slopes),
            "baseline_effects": (0.3,) + (0.0,) * (P - 1) if P else (),
        }
        return cls(**{**params, **overrides})

    @classmethod
    def from_dict(cls, value: dict) -> "SimConfig":
        value = dict(value)
        preset = value.pop("preset", None)
        allowed = {f.name for f in fields(cls)}
        for key in value:
            if key not in allowed and key not in ("Q", "P"):
                raise ValueError(f"Unsupported simulation parameter: {key}")
        if preset == "null":
            return cls.null(**value)
        elif preset == "slope_driven":
            return cls.slope_driven(**value)
        elif preset is not None:
            raise ValueError(f"Unsupported simulation preset: {preset!r}")
        if "Q" in value or "P" in value:
            raise ValueError("Covariate counts are only accepted with a preset")
        return cls(**value)

    def serialize(self) -> dict:
        return _lists(asdict(self))


def _tuples(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuples(v) for v in value)
    return value


def _lists(value):
    if isinstance(value, dict):
        return {k: _lists(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_lists(v) for v in value]
    return value


def simulate_joint_data(config: SimConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n, P, Q = config.n, config.P, config.Q
    grid = np.asarray(config.visit_grid, dtype=float)

    baseline = rng.standard_normal((n, P))
    effects = np.stack(
        [rng.multivariate_normal(np.zeros(2), np.asarray(cov), size=n) for cov in config.Sigma],
        axis=1,
    ) if Q else np.zeros((n, 0, 2))
    eta = baseline @ np.asarray(config.baseline_effects, dtype=float)
    for q in range(Q):
        eta = eta + config.link_intercept[q] * effects[:, q, 0]
        eta = eta + config.link_slope[q] * effects[:, q, 1]

    # Weibull proportional hazards by inversion of S(t) = exp(-(t/scale)^shape e^eta)
    uniform = rng.uniform(size=n)
    event = config.weibull_scale * (-np.log(uniform) * np.exp(-eta)) ** (
        1.0 / config.weibull_shape
    )
    if config.censoring_rate > 0:
        censor = rng.exponential(1.0 / config.censoring_rate, size=n)
    else:
        censor = np.full(n, np.inf)
    if config.administrative_censoring is not None:
        censor = np.minimum(censor, config.administrative_censoring)
    observed = np.minimum(event, censor)
    indicator = event <= censor

    noise = rng.standard_normal((n, len(grid), Q)) * np.sqrt(config.sigma2)
    missing = rng.uniform(size=(n, len(grid), Q)) < config.missing_rate
    missing[:, 0, :] = False
    beta = np.asarray(config.beta, dtype=float).reshape(Q, 2)

    subjects = []
    for i in range(n):
        visits = grid[grid < observed[i]]
        m = len(visits)
        values = (
            beta[:, 0] + effects[i, :, 0]
            + np.outer(visits, beta[:, 1] + effects[i, :, 1])
            + noise[i, :m]
        )
        values[missing[i, :m]] = np.nan
        subjects.append(
            SubjectRecord(
                id=str(i + 1),
                event_time=observed[i],
                event_indicator=bool(indicator[i]),
                baseline=baseline[i],
                visits=visits,
                longitudinal=values.reshape(m, Q),
            )
        )
    return Dataset(
        tuple(subjects),
        tuple(f"x{j + 1}" for j in range(P)),
        tuple(f"y{q + 1}" for q in range(Q)),
    )
