import argparse
import asyncio
import json
import logging
import sys

from pathlib import Path
from typing import Dict, Sequence

from dynpred.dataset import LANDMARK_MODES, Dataset, convert_pbc2, make_landmark_slice
from dynpred.format import config_hash, format_float, normalize_config
from dynpred.pipelines import describe_failure, fit_pipeline

from .artifacts import save_run, write_artifacts
from .config import RunConfig, load_run_config
from .const import (
    BASELINE_FILENAME,
    CONFIG_FILENAME,
    FAILURES_FILENAME,
    FITS_DIRNAME,
    LONGITUDINAL_FILENAME,
    RESULTS_FILENAME,
    TIMING_FILENAME,
)
from .harness import ablation_frame, frame_csv, run_benchmark, subsample_ablation
from .plot import load_results, render_plots
from .simulation import SimConfig, simulate_joint_data

LOGGER = logging.getLogger(__name__)

ABLATION_FILENAME = "ablation.csv"


def _dataset_files(data: Dataset) -> Dict[str, str]:
    base, long = data.to_frames()
    return {
        BASELINE_FILENAME: base.to_csv(index=False, lineterminator="\n"),
        LONGITUDINAL_FILENAME: long.to_csv(index=False, lineterminator="\n"),
    }


def cmd_simulate(args) -> int:
    if not args.config:
        raise SystemExit("Simulation failed: --config is required")
    try:
        with open(args.config) as config_file:
            value = json.load(config_file)
        if isinstance(value, dict) and "simulation" in value:
            value = value["simulation"]
        if not isinstance(value, dict):
            raise ValueError("Simulation settings must be an object")
        if args.seed is not None:
            value = {**value, "seed": args.seed}
        config = SimConfig.from_dict(value)
    except (OSError, ValueError, TypeError) as err:
        raise SystemExit(f"Simulation failed: {err}")
    data = simulate_joint_data(config)
    out = Path(args.out or ".")
    config_text = normalize_config(config.serialize()).decode("utf-8")
    files = {**_dataset_files(data), CONFIG_FILENAME: config_text + "\n"}
    save_run(out, files, seed=config.seed, config_hash=config_hash(config.serialize()))
    print(f"Simulated {data.n} subjects with seed {config.seed} in {out}")
    return 0


def _export_fits(config: RunConfig, data: Dataset) -> Dict[str, str]:
    files = {}
    for spec in config.methods:
        for lm in config.landmarks:
            try:
                train = make_landmark_slice(data, lm, config.landmark_mode)
                fitted = fit_pipeline(spec.with_seed(config.seed), train)
            except Exception as err:
                LOGGER.warning(
                    "Export of %s at landmark %r failed: %s",
                    spec.name, lm, describe_failure(err)["errorMessage"],
                )
                continue
            prefix = f"{FITS_DIRNAME}/{spec.name}/landmark_{format_float(lm)}"
            for name, content in fitted.export().items():
                files[f"{prefix}/{name}"] = content
    return files


def cmd_benchmark(args) -> int:
    if not args.config:
        raise SystemExit("Benchmark failed: --config is required")
    overrides = {
        "seed": args.seed,
        "threads": args.threads,
        "out": str(Path(args.out).resolve()) if args.out else None,
        "landmark_mode": args.landmark_mode,
    }
    try:
        config = load_run_config(args.config, overrides)
        data = config.load_data()
        horizons = config.resolved_horizons()
        result = run_benchmark(
            data,
            config.methods,
            config.landmarks,
            horizons,
            config.cv,
            landmark_mode=config.landmark_mode,
            n_jobs=config.threads,
            timing_in_results=config.timing_in_results,
        )
        ablation = None
        if config.ablation is not None:
            ablation = subsample_ablation(
                data,
                config.ablation.fractions,
                config.methods,
                config.landmarks,
                horizons,
                config.cv,
                axis=config.ablation.axis,
                landmark_mode=config.landmark_mode,
                n_jobs=config.threads,
            )
    except (OSError, ValueError) as err:
        raise SystemExit(f"Benchmark failed: {err}")

    files = {
        RESULTS_FILENAME: result.to_csv(),
        TIMING_FILENAME: frame_csv(result.timing_frame()),
        FAILURES_FILENAME: frame_csv(result.failure_frame()),
        CONFIG_FILENAME: normalize_config(config.serialize()).decode("utf-8") + "\n",
    }
    if ablation is not None:
        files[ABLATION_FILENAME] = frame_csv(ablation_frame(ablation, config.ablation.axis))
    if config.export:
        files.update(_export_fits(config, data))
    save_run(config.out, files, seed=config.seed, config_hash=config.config_hash())
    print(f"Wrote {len(files) + 1} artifacts to {config.out}")

    missing = result.missing()
    if missing:
        for method, lm in missing:
            print(f"{method} failed on every fold at landmark {lm!r}", file=sys.stderr)
        return 2
    if result.to_frame()["mean"].isna().all():
        print("Benchmark produced no defined results", file=sys.stderr)
        return 2
    return 0


def cmd_plot(args) -> int:
    try:
        frame = load_results(args.results)
    except (OSError, ValueError) as err:
        raise SystemExit(f"Plotting failed: {err}")
    if frame.empty:
        print("Results table is empty", file=sys.stderr)
        return 2
    files = render_plots(frame)
    out = Path(args.out or Path(args.results).parent)
    asyncio.run(write_artifacts(out, files))
    print(f"Wrote {len(files)} figures to {out}")
    return 0


def cmd_convert_pbc2(args) -> int:
    try:
        paths = convert_pbc2(args.source, args.out or ".")
    except (OSError, ValueError) as err:
        raise SystemExit(f"Conversion failed: {err}")
    print("Wrote", *paths)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynpred_bench", description="landmark dynamic survival prediction benchmarks"
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="write a simulated dataset")
    simulate.add_argument("--config", help="simulation settings (JSON)")
    simulate.add_argument("--seed", type=int, help="override the simulation seed")
    simulate.add_argument("--out", help="output directory (default current directory)")
    simulate.set_defaults(handler=cmd_simulate)

    bench = commands.add_parser("benchmark", help="run repeated cross-validation")
    bench.add_argument("--config", help="run configuration (JSON)")
    bench.add_argument("--seed", type=int, help="override the run seed")
    bench.add_argument(
        "--threads", type=int, help="worker count (default from DYNPRED_THREADS or 1)"
    )
    bench.add_argument("--out", help="override the output directory")
    bench.add_argument(
        "--landmark-mode", choices=LANDMARK_MODES, help="training slice mode (default strict)"
    )
    bench.set_defaults(handler=cmd_benchmark)

    plot = commands.add_parser("plot", help="render SVG figures from a results table")
    plot.add_argument("results", help="the results CSV written by benchmark")
    plot.add_argument("--out", help="output directory (default next to the results)")
    plot.set_defaults(handler=cmd_plot)

    convert = commands.add_parser("convert-pbc2", help="convert the long-format PBC2 table")
    convert.add_argument("source", help="the long-format PBC2 CSV")
    convert.add_argument("--out", help="output directory (default current directory)")
    convert.set_defaults(handler=cmd_convert_pbc2)
    return parser


def main(argv: Sequence[str] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(
        level=level,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.handler(args)


if __name__ == "__main__":
    raise SystemExit(main())
