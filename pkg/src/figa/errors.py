"""Exception hierarchy. Each error class carries the CLI exit code it maps to."""

from __future__ import annotations


class FigaError(Exception):
    exit_code = 1


class ConfigError(FigaError):
    exit_code = 2


class StructuralError(FigaError, ValueError):
    exit_code = 2


class IngestionError(FigaError):
    exit_code = 3

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ServiceError(FigaError):
    exit_code = 4


class RolloutError(ServiceError):
    pass


class ScoringError(ServiceError):
    pass


class RevisionError(ServiceError):
    pass


class AnnotationError(ServiceError):
    def __init__(self, message: str, raw: str | None = None) -> None:
        self.raw = raw
        super().__init__(message if raw is None else f"{message}; raw payload: {raw!r}")


class BuildError(FigaError):
    exit_code = 4


class TrainingDivergence(FigaError):
    exit_code = 5

    def __init__(self, epoch: int, record_id: str, value: float) -> None:
        self.epoch = epoch
        self.record_id = record_id
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, record {record_id}")


class VocabularyError(FigaError, KeyError):
    exit_code = 2

    def __str__(self) -> str:
        return Exception.__str__(self)


class StatsError(FigaError):
    exit_code = 3
