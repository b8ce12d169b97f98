VERSION = "0.1.0"

BASELINE_FILENAME = "baseline.csv"
LONGITUDINAL_FILENAME = "longitudinal.csv"
RESULTS_FILENAME = "results.csv"
TIMING_FILENAME = "timing.csv"
FAILURES_FILENAME = "failures.csv"
CONFIG_FILENAME = "config.json"
MANIFEST_FILENAME = "manifest.json"
CINDEX_TABLE_FILENAME = "cindex.svg"
FITS_DIRNAME = "fits"

THREADS_ENV = "DYNPRED_THREADS"
