"""Population-size-dependent branching processes conditioned on survival."""
from .offspring import MeanModel, OffspringSpec
from .qprocess import SpectralTriple, TruncatedKernel, build_kernel, spectral
from .simulator import Trajectory, TreeSample, simulate, simulate_tree
from .estimators import EstimateReport

__all__ = [
    "MeanModel", "OffspringSpec", "SpectralTriple", "TruncatedKernel", "build_kernel",
    "spectral", "Trajectory", "TreeSample", "simulate", "simulate_tree", "EstimateReport",
]
__version__ = "0.1.0"
