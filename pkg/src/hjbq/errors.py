"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violated a documented precondition (shape, bound, range)."""


class DivergenceError(RuntimeError):
    """A rollout left the numerically safe region.

    ``step`` is the integrator substep index at which the state was found
    non-finite or beyond the divergence radius.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingDivergenceError(RuntimeError):
    """Loss or parameter gradient became non-finite during training."""

    def __init__(self, message, iteration=None, state=None):
        super().__init__(message)
        self.iteration = iteration
        # (params, target, adam) at the moment of failure, when known
        self.state = state


class NonConvergenceError(RuntimeError):
    """Grid value iteration hit ``max_iter`` before reaching ``tol``."""

    def __init__(self, message, last_update=None, solution=None):
        super().__init__(message)
        self.last_update = last_update
        self.solution = solution


class ArtifactError(ValueError):
    """A checkpoint or grid artifact is malformed or does not fit the environment."""
