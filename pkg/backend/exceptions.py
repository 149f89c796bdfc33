from typing import Optional


class StepRegError(Exception):
    """Base class for registration toolkit errors"""


class ValidationError(StepRegError, ValueError):
    """Raised when an input violates a precondition"""


class DataFormatError(StepRegError, ValueError):
    """Raised when a point-cloud or manifest file cannot be parsed"""

    def __init__(self, message: str, path: Optional[str] = None, line_number: Optional[int] = None):
        self.path = path
        self.line_number = line_number
        location = ""
        if path is not None:
            location = f"{path}"
            if line_number is not None:
                location += f":{line_number}"
            location += ": "
        super().__init__(f"{location}{message}")


class DegenerateInputError(StepRegError, ValueError):
    """Raised when a rigid solve has too few or collinear correspondences"""


class NumericalError(StepRegError, ArithmeticError):
    """Raised when a computation produces non-finite values"""

    def __init__(self, message: str, block: Optional[str] = None):
        self.block = block
        super().__init__(message if block is None else f"{message} (parameter block '{block}')")


class RegistrationStepError(StepRegError, RuntimeError):
    """Raised when the reward source fails inside the registration loop"""

    def __init__(self, iteration: int, cause: Exception):
        self.iteration = iteration
        super().__init__(f"Reward source failed at iteration {iteration}: {cause}")
