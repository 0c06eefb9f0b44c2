# poolforge/errors.py


class PoolforgeError(Exception):
    """Base class for every error raised by poolforge."""


class ManifestError(PoolforgeError, LookupError):
    pass


class ConfigError(PoolforgeError):
    pass


class PromptError(PoolforgeError):
    pass


class StrataPlanError(PoolforgeError):
    """A planning response that does not yield a valid five-strata plan."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class BackendError(PoolforgeError):
    pass


class PartitionError(PoolforgeError, ValueError):
    pass


class GeometryError(PoolforgeError, ValueError):
    pass


class MetricError(PoolforgeError, ValueError):
    pass


class ScoreFileError(PoolforgeError):
    pass


class AnalysisError(PoolforgeError):
    pass


class StageError(PoolforgeError):
    """Upstream artifacts are missing; the message names the stage to run."""

    def __init__(self, missing: str, stage: str):
        self.missing = missing
        self.stage = stage
        super().__init__(f"{missing} missing: run `poolforge {stage}` first")


class CellFailure(PoolforgeError):
    """A cell could not be completed; partial artifacts stay on disk."""

    def __init__(self, message: str, partial: dict | None = None):
        self.partial = partial or {}
        super().__init__(message)
