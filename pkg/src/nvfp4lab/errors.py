"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not compose."""


class LayoutError(ValueError):
    """Tensor dimensions are not exact multiples of the block dimensions."""


class CodecError(ValueError):
    """Non-finite or otherwise unencodable codec input."""


class ConfigError(ValueError):
    """Invalid compensation or recipe configuration."""


class StateError(RuntimeError):
    """Operation called out of order (e.g. backward before forward)."""


class ParseError(ValueError):
    """Malformed dump file.  ``offset`` is the byte position of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
