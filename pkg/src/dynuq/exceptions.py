class NumericalFailureError(RuntimeError):
    """A factorization failed even after the jitter floor was applied."""

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params


class ForecastFailureError(RuntimeError):
    """Too many forecast chains diverged, or a point forecast went non-finite."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
