from __future__ import annotations


class SampNetError(Exception):
    pass


class ValidationError(SampNetError, ValueError):
    pass


class AnnotationError(ValidationError):
    def __init__(self, message: str, *, line: int | None = None, field: str | None = None) -> None:
        self.line = line
        self.field = field
        location = []
        if line is not None:
            location.append(f"line {line}")
        if field is not None:
            location.append(f"field '{field}'")
        prefix = f"{', '.join(location)}: " if location else ""
        super().__init__(f"{prefix}{message}")


class FormatError(ValidationError):
    pass


class UndefinedStatisticError(ValidationError):
    pass


class NumericError(SampNetError, ArithmeticError):
    def __init__(self, message: str, *, tensor: str | None = None) -> None:
        self.tensor = tensor
        super().__init__(message)
