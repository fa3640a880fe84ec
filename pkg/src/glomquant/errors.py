"""Exception hierarchy shared by every stage of the pipeline."""


class GlomError(Exception):
    """Base class for all package errors."""


class ConfigError(GlomError, ValueError):
    pass


class InvalidGeometryError(GlomError, ValueError):
    pass


class OutOfBoundsError(GlomError, ValueError):
    pass


class ShapeError(GlomError, ValueError):
    pass


class FormatError(GlomError, ValueError):
    """Raised for malformed on-disk slides, manifests, or truth files."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class PlacementError(GlomError, RuntimeError):
    pass


class InsufficientGroupsError(GlomError, ValueError):
    pass


class StratificationError(GlomError, ValueError):
    pass


class UndefinedMetricError(GlomError, ValueError):
    pass


class DegenerateEmbeddingError(GlomError, ValueError):
    pass


class TrainingDivergedError(GlomError, RuntimeError):
    def __init__(self, step):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


class ReconciliationError(GlomError, ValueError):
    def __init__(self, missing_in_pred, missing_in_truth):
        self.missing_in_pred = sorted(missing_in_pred)
        self.missing_in_truth = sorted(missing_in_truth)
        super().__init__(
            f"prediction/truth id mismatch: only in truth {self.missing_in_pred}, "
            f"only in predictions {self.missing_in_truth}"
        )


class UnsupportedSourceError(GlomError, ValueError):
    pass


class BackendError(GlomError, RuntimeError):
    pass


class ProtocolError(BackendError):
    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class BackendTimeout(BackendError):
    def __init__(self, request_id, timeout):
        super().__init__(f"request {request_id} timed out after {timeout:g} s")
        self.request_id = request_id


class AnnotationParseError(GlomError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class SchemaError(GlomError, ValueError):
    pass
