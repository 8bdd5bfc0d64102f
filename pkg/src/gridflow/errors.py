"""Exception hierarchy shared across gridflow modules."""


class GridflowError(Exception):
    """Base class for every error raised by gridflow."""


class ConfigError(GridflowError):
    """An input document failed to parse or violated an invariant.

    ``locus`` names the offending key, index or file when known.
    """

    def __init__(self, message, locus=None):
        self.locus = locus
        if locus is not None:
            message = f"{locus}: {message}"
        super().__init__(message)


class CyclicWorkflow(GridflowError):
    pass


class InvalidTransition(GridflowError):
    def __init__(self, state, event):
        self.state = state
        self.event = event
        super().__init__(f"no transition from {state.value} on {event.value}")


class DuplicateService(GridflowError):
    pass


class InvalidDescriptor(GridflowError):
    pass


class UnknownService(GridflowError):
    pass


class NoCandidates(GridflowError):
    pass


class NoViableBinding(GridflowError):
    pass


class UnknownDefinition(GridflowError):
    pass


class TimeTravel(GridflowError):
    pass


class EventBudgetExceeded(GridflowError):
    pass


class ForeignSnapshot(GridflowError):
    pass


class UnknownResource(GridflowError):
    pass


class NoAliveCandidate(GridflowError):
    pass


class UnknownFile(GridflowError):
    pass


class InvalidWidth(GridflowError):
    pass


class InvalidLength(GridflowError):
    pass


class InsufficientCapacity(GridflowError):
    """Every alive candidate rejected the task for lack of disk space."""
