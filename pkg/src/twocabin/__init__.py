"""Two-cabin dynamic pricing: demand kernels, backward induction, counterfactuals and estimation."""

__version__ = "0.1.0"

from .demand import FlightParams  # noqa: E402
from .market import CabinState, PolicyEntry  # noqa: E402
from .solver import SolvedModel, SolverConfig, solve  # noqa: E402

__all__ = ["FlightParams", "CabinState", "PolicyEntry", "SolvedModel", "SolverConfig", "solve", "__version__"]
