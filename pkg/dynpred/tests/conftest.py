import numpy as np
import pytest

from dynpred.dataset import Dataset, SubjectRecord


def build_dataset(rows, baseline_names=("x1",), longitudinal_names=("y1",)) -> Dataset:
    """Rows are `(event_time, event_indicator, baseline, visits, longitudinal)`."""
    subjects = []
    for pos, (time, event, base, visits, values) in enumerate(rows):
        subjects.append(
            SubjectRecord(
                id=str(pos + 1),
                event_time=time,
                event_indicator=event,
                baseline=base,
                visits=visits,
                longitudinal=np.asarray(values, dtype=float).reshape(len(visits), -1),
            )
        )
    return Dataset(tuple(subjects), baseline_names, longitudinal_names)


@pytest.fixture
def dataset_factory():
    return build_dataset


@pytest.fixture
def linear_dataset():
    """60 subjects with linear trajectories observed yearly until their event time."""
    rng = np.random.default_rng(11)
    rows = []
    for _ in range(60):
        slope = rng.normal(0.5, 0.3)
        intercept = rng.normal(1.0, 0.5)
        time = float(rng.uniform(1.5, 8.0))
        visits = np.arange(0.0, time, 1.0)
        values = intercept + slope * visits + rng.normal(0.0, 0.1, len(visits))
        rows.append((time, bool(rng.uniform() < 0.7), [rng.normal()], visits, values))
    return build_dataset(rows)
