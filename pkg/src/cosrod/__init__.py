"""Dynamics of soft slender rods with frictional contact.

The rod is a Cosserat continuum discretized with piecewise linear strain
fields; contact with rigid obstacles and other rods is resolved through a
slack-variable reformulation of the complementarity conditions, smoothed by
interchangeable kernel functions, and integrated implicitly in time.
"""

from .liegroup import Pose
from .errors import ConfigError, SolverError, BranchCutError

__all__ = ["Pose", "ConfigError", "SolverError", "BranchCutError"]

__version__ = "0.1.0"
