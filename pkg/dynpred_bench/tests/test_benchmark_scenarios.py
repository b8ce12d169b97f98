import pytest

from dynpred.metrics import CINDEX, TDAUC
from dynpred.pipelines import DYNFOREST, FUNRSF, KINDS, MFPCCOX, PRC, STATIC_COX, MethodSpec

from dynpred_bench.harness import CvPlan, horizon_grid, run_benchmark
from dynpred_bench.simulation import SimConfig, simulate_joint_data

pytestmark = pytest.mark.slow

FORESTS = {FUNRSF: {"n_trees": 100}, DYNFOREST: {"n_trees": 50}}


def methods(*kinds):
    specs = []
    for kind in kinds:
        value = {"kind": kind}
        if kind in FORESTS:
            value["forest"] = FORESTS[kind]
        specs.append(MethodSpec.from_dict(value))
    return tuple(specs)


def concordance(frame, method, landmark) -> float:
    rows = frame[
        (frame["method"] == method) & (frame["landmark"] == landmark) & (frame["metric"] == CINDEX)
    ]
    return float(rows["mean"].iloc[0])


def test_null_signal_scores_near_chance():
    data = simulate_joint_data(SimConfig.null(n=2000, Q=2, P=1, seed=11))
    plan = CvPlan(k=5, repetitions=3, seed=1)
    frame = run_benchmark(data, methods(*KINDS), [2.0], horizon_grid(2.0, 5.0), plan).to_frame()
    scores = frame[frame["metric"].isin([CINDEX, TDAUC])]["mean"]
    assert scores.notna().all()
    assert scores.between(0.47, 0.53).all()


def test_slope_driven_dynamic_methods_beat_static():
    kinds = (STATIC_COX, PRC, FUNRSF, DYNFOREST)
    wins = 0
    for seed in range(5):
        data = simulate_joint_data(SimConfig.slope_driven(n=800, Q=5, P=2, seed=seed))
        plan = CvPlan(k=5, repetitions=1, seed=seed)
        frame = run_benchmark(
            data, methods(*kinds), [1.0, 2.0, 3.0], horizon_grid(3.0, 7.0), plan
        ).to_frame()
        c = {kind: concordance(frame, kind, 3.0) for kind in kinds}
        wins += (
            c[PRC] >= c[STATIC_COX] + 0.05
            and c[DYNFOREST] >= c[STATIC_COX] + 0.05
            and c[PRC] >= c[FUNRSF]
        )
    assert wins >= 3


def test_relative_fit_times():
    # cohort size of the PBC2 data
    data = simulate_joint_data(SimConfig.slope_driven(n=312, Q=3, P=2, seed=2))
    specs = (MethodSpec(MFPCCOX), MethodSpec(PRC), MethodSpec(DYNFOREST))
    result = run_benchmark(data, specs, [2.5], horizon_grid(2.5, 8.0), CvPlan(k=5, repetitions=1))
    seconds = result.timing_frame().set_index("method")["Average"]
    assert seconds[DYNFOREST] >= 5 * seconds[PRC]
    assert seconds[MFPCCOX] <= seconds[PRC]
