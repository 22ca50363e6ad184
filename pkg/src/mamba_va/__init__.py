"""Continuous valence/arousal regression with a TCN front end and a selective state-space stack."""

from .errors import MambaVAError
from .layers import MambaConfig, MambaVA, TcnConfig
from .metrics import ccc, p_va
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = ["MambaVAError", "MambaConfig", "MambaVA", "TcnConfig", "TrainConfig", "ccc", "fit", "p_va"]
