from typing import Optional


class PipelineError(Exception):
    """Base error carrying a detail message and the CLI exit code it maps to."""

    exit_code: int = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return self.detail


# ===== USAGE / CONFIG (exit 2) =====

class UsageError(PipelineError):
    exit_code = 2


class ConfigError(PipelineError):
    exit_code = 2


class IntegrityError(PipelineError):
    """Artifact hashes recorded upstream do not match the files on disk."""

    exit_code = 2

    def __init__(self, path: str, expected: str, actual: str):
        super().__init__(
            f"Pipeline integrity check failed for {path}: manifest hash {expected} != file hash {actual}"
        )
        self.path = path
        self.expected = expected
        self.actual = actual


# ===== RUNTIME (exit 1) =====

class DimensionError(PipelineError, ValueError):
    pass


class VocabularyError(PipelineError, ValueError):
    pass


class LeakageError(VocabularyError):
    pass


class LookupFailure(PipelineError, IndexError):
    pass


class DataIntegrityError(PipelineError, ValueError):
    pass


class CapacityError(PipelineError, ValueError):
    pass


class InfeasibleError(PipelineError, ValueError):
    pass


class EmptyFeatureError(PipelineError, ValueError):
    pass


class LengthError(PipelineError, ValueError):
    pass


class TrainingError(PipelineError):
    pass
