"""Causal link estimation for confounded time series: a sequential
causal-effect VAE trained on observational data, intervened on with knockoff
copies of the cause variable, plus a fully specified synthetic structural
model and metric suite for validation against ground truth."""

from ._kernels import backend
from .scevae_core import ElboConfig, GaussianSequence, ScevaeParams

__version__ = "0.1.0"

__all__ = ["backend", "ElboConfig", "GaussianSequence", "ScevaeParams", "__version__"]
