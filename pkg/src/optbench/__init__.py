"""optbench: a reproducible benchmark harness for stochastic optimizers."""

__version__ = "1.0.0"

# Results produced by harnesses that agree in MAJOR.MINOR are directly comparable.
HARNESS_VERSION = __version__
