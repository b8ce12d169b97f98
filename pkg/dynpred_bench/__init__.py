from . import artifacts, config, const, harness, plot, simulation

__all__ = ["artifacts", "config", "const", "harness", "plot", "simulation"]
