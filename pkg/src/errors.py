from typing import Optional


class ScoreQcdError(Exception):
    pass


class InputError(ScoreQcdError, ValueError):
    pass


class UsageError(ScoreQcdError):
    def __init__(self, message: str, field_path: Optional[str] = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class NumericError(ScoreQcdError, ArithmeticError):
    def __init__(self, message: str, where=None):
        self.where = where
        if where is not None:
            message = f"{message} (at {where})"
        super().__init__(message)


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int, learning_rate: float):
        self.epoch = epoch
        self.learning_rate = learning_rate
        super().__init__(f"{message} [epoch={epoch} lr={learning_rate}]")


class EstimationError(ScoreQcdError):
    pass
