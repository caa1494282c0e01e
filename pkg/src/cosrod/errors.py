"""Exception taxonomy shared across the package."""


class ConfigError(ValueError):
    """Invalid scenario, rod, or marker input. CLI maps this to exit code 2."""


class SolverError(RuntimeError):
    """Newton iteration failed to converge. Carries the best iterate found.

    CLI maps this to exit code 3 after writing partial outputs.
    """

    def __init__(self, message, best=None, residual_norm=None, iterations=None,
                 step_index=None):
        super().__init__(message)
        self.best = best
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.step_index = step_index


class BranchCutError(ValueError):
    """SE(3)/SO(3) logarithm evaluated too close to the pi branch cut."""


class DegenerateFrameError(ValueError):
    """Contact frame tangents are parallel (zero stretch with flat curvature)."""


class RankDeficiencyError(ValueError):
    """Observer constraint set leaves free modes; names them in the message."""

    def __init__(self, message, free_modes=None):
        super().__init__(message)
        self.free_modes = free_modes or []
