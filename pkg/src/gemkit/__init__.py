"""Dirichlet evidential classifiers with energy gating, density scaling and routed heads.

NumPy-only: a small reverse-mode tape (``autodiff``) drives every model.
"""

from gemkit.model import GemConfig, GemModel
from gemkit.trainer import TrainSchedule, fit

__all__ = ["GemConfig", "GemModel", "TrainSchedule", "fit"]
__version__ = "0.1.0"
