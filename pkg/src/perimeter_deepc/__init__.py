"""Data-enabled predictive perimeter control for multi-region urban traffic."""
from . import analysis, deepc, harness, lti, mfd, mpc, partition, plant, qp, scenario

__all__ = ["analysis", "deepc", "harness", "lti", "mfd", "mpc", "partition", "plant", "qp", "scenario"]
__version__ = "0.1.0"
