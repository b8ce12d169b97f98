from . import cox, dataset, errors, format, lmm, metrics, mfpca, pipelines, prediction, rsf

__all__ = [
    "cox",
    "dataset",
    "errors",
    "format",
    "lmm",
    "metrics",
    "mfpca",
    "pipelines",
    "prediction",
    "rsf",
]
