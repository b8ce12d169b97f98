import logging

from sys import argv
from time import perf_counter

from dynpred.dataset import make_landmark_slice
from dynpred.pipelines import KINDS, MethodSpec, fit_pipeline
from dynpred.rsf import ForestConfig
from dynpred_bench.harness import CvPlan, horizon_grid, run_benchmark
from dynpred_bench.simulation import SimConfig, simulate_joint_data


def demo(n: int = 300, seed: int = 7, perf_check: bool = False):
    data = simulate_joint_data(SimConfig.slope_driven(n=n, Q=3, seed=seed))
    print(f"Simulated {data.n} subjects, {int(data.events.sum())} events")

    landmarks = (1.0, 2.0)
    horizons = {lm: horizon_grid(lm, 6.0) for lm in landmarks}
    methods = []
    for kind in KINDS:
        forest = None
        if kind == "funrsf":
            forest = ForestConfig.from_dict({"n_trees": 50}, ForestConfig.funrsf())
        elif kind == "dynforest":
            forest = ForestConfig.from_dict({"n_trees": 20}, ForestConfig.dynforest())
        methods.append(MethodSpec(kind, forest=forest))

    start = perf_counter()
    plan = CvPlan(k=3, repetitions=1, seed=seed)
    result = run_benchmark(data, methods, landmarks, horizons, plan)
    print(f"Benchmark duration: {perf_counter() - start:0.2f}")

    frame = result.to_frame()
    print(frame[frame["metric"] == "cindex"][["method", "landmark", "mean", "n_failed"]])
    print(result.timing_frame())

    # fitted pipeline on the full risk set at the last landmark
    train = make_landmark_slice(data, landmarks[-1])
    fitted = fit_pipeline(MethodSpec("prc"), train)
    print(fitted.model.coefficient_frame())

    if perf_check:
        for kind in ("prc", "dynforest"):
            start = perf_counter()
            fit_pipeline(methods[KINDS.index(kind)], train)
            print(f"{kind} fit duration: {perf_counter() - start:0.2f}")


if __name__ == "__main__":
    logging.basicConfig(level=logging.WARNING)
    sizes = [arg for arg in argv[1:] if arg.isdigit()]
    n = int(sizes[0]) if sizes else 300
    demo(n, perf_check="--perf" in argv)
