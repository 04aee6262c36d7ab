class GroundingError(Exception):
    """Base class for every failure raised by the grounding engine."""
    exit_code = 1


class DimensionError(GroundingError, ValueError):
    pass


class DegenerateRowError(GroundingError):
    pass


class ContractError(GroundingError):
    pass


class NumericError(GroundingError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, step, components):
        self.step = step
        self.components = dict(components)
        detail = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"Non-finite loss at step {step}: {detail}")


class VisualIndexError(GroundingError, IndexError):
    pass


class CapacityError(GroundingError):
    pass


class VocabularyError(GroundingError):
    pass


class ConfigurationError(GroundingError):
    pass


class GenerationError(GroundingError):
    pass


class MissingInputError(GroundingError):
    exit_code = 2


class FormatError(GroundingError):
    exit_code = 3

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = f" at byte offset {offset}" if offset is not None else ""
        source = f" ({path})" if path else ""
        super().__init__(f"{message}{where}{source}")


class AnnotationParseError(FormatError):
    def __init__(self, message, line, path=None):
        self.line = line
        super().__init__(f"line {line}: {message}", path=path)


class CheckpointMismatchError(DimensionError):
    def __init__(self, name, expected, found):
        self.name = name
        if found is None:
            message = f"Checkpoint is missing parameter '{name}' (model expects {tuple(expected)})"
        else:
            message = f"Checkpoint parameter '{name}' has shape {tuple(found)}, model expects {tuple(expected)}"
        super().__init__(message)
