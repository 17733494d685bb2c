"""Exception hierarchy shared across the package."""


class TopaError(Exception):
    """Base class for all package errors."""


# -- corpus schema ---------------------------------------------------------


class SchemaViolation(TopaError):
    """A record failed schema validation."""


class MalformedRecord(SchemaViolation):
    def __init__(self, path: str, message: str = "missing or invalid field"):
        self.path = path
        super().__init__(f"{message} at {path}")


class FrameCountOutOfRange(SchemaViolation):
    def __init__(self, count: int, low: int = 5, high: int = 15):
        self.count = count
        super().__init__(f"frame count {count} outside [{low}, {high}]")


class EmptyCaption(SchemaViolation):
    def __init__(self, frame: int, object_index: int | None = None):
        self.frame = frame
        self.object_index = object_index
        where = f"frame {frame}" if object_index is None else f"frame {frame}, object {object_index}"
        super().__init__(f"empty caption in {where}")


class AnswerOutOfRange(SchemaViolation):
    def __init__(self, answer_index: int, n_options: int):
        self.answer_index = answer_index
        super().__init__(f"answer_index {answer_index} out of range for {n_options} options")


class DuplicateOptions(SchemaViolation):
    def __init__(self, option: str):
        self.option = option
        super().__init__(f"duplicate option after normalization: {option!r}")


class IdMismatch(SchemaViolation):
    def __init__(self, expected: str, got: str):
        super().__init__(f"annotation tideo_id {got!r} does not match tideo {expected!r}")


# -- generation ------------------------------------------------------------


class EmptySource(TopaError):
    pass


class MissingTemplate(TopaError):
    pass


class UnfilledPlaceholder(TopaError):
    pass


class UnparseableStructure(TopaError):
    def __init__(self, offset: int, message: str):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class GenerationRejected(SchemaViolation):
    """Schema violation in a parsed response; keeps the raw text for audit."""

    def __init__(self, cause: SchemaViolation, raw_response: str):
        self.cause = cause
        self.raw_response = raw_response
        super().__init__(f"{type(cause).__name__}: {cause}")


class ClientExhausted(TopaError):
    pass


# -- encoders / memory -----------------------------------------------------


class EncoderFailure(TopaError):
    pass


class DimensionMismatch(TopaError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"expected dimension {expected}, got {got}")


class EmptyVocabulary(TopaError):
    pass


class EmptyCaptionStream(TopaError):
    pass


class NonPositiveTemperature(TopaError):
    pass


# -- training / evaluation -------------------------------------------------


class MissingAnnotationField(TopaError):
    pass


class NonFiniteLoss(TopaError):
    def __init__(self, position: int | None = None):
        self.position = position
        super().__init__(f"non-finite loss at target position {position}")


class DivergenceDetected(TopaError):
    def __init__(self, step: int, last_good: object = None):
        self.step = step
        self.last_good = last_good
        super().__init__(f"loss diverged at step {step}")


class EmptyOption(TopaError):
    pass


class MissingMemory(TopaError):
    pass


class FingerprintMismatch(TopaError):
    pass
