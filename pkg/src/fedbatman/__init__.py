"""Federated LSTM route prediction for a B.A.T.M.A.N.-style mesh, on a deterministic simulator."""

from .core import LinkCostTrace, ParameterVector, SeededRng, param_average
from .nn import LstmConfig

__all__ = ["LinkCostTrace", "LstmConfig", "ParameterVector", "SeededRng", "param_average"]
