"""Self-re-labeling time-series classification under label noise."""

__version__ = "0.1.0"

from . import data, evaluate, nn, noise, tensor, train  # noqa: F401
from .nn import SreaModel, build_model  # noqa: F401
from .train import LossFlags, ScheduleParams  # noqa: F401
