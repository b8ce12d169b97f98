from typing import Optional


class EstimationError(Exception):
    error: str = "estimationError"
    message: Optional[str] = None

    def __init__(self, message: str = None, *, error: str = None):
        super().__init__(message)
        if error:
            self.error = error
        self.message = message

    def serialize(self) -> dict:
        return {
            "error": self.error,
            "errorMessage": self.message,
        }


class NonEstimable(EstimationError):
    error = "nonEstimable"


class MonotoneLikelihood(EstimationError):
    error = "monotoneLikelihood"


class FitFailed(EstimationError):
    error = "fitFailed"


class EmptyRiskSet(EstimationError, ValueError):
    error = "emptyRiskSet"


class DatasetError(ValueError):
    def __init__(self, message: str, *, row: int = None, subject: str = None):
        if row is not None:
            message = f"{message} (row {row})"
        elif subject is not None:
            message = f"{message} (subject {subject!r})"
        super().__init__(message)
        self.row = row
        self.subject = subject
