"""Exception hierarchy shared by every module."""


class HarlensError(Exception):
    """Base class; the CLI maps it to a runtime failure exit code."""


class ConfigError(HarlensError):
    pass


class ShapeError(HarlensError, ValueError):
    def __init__(self, node: str, shapes: str, detail: str = ""):
        self.node = node
        self.shapes = shapes
        msg = f"shape mismatch at node '{node}': {shapes}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class NumericOverflowError(HarlensError, ArithmeticError):
    def __init__(self, node: str):
        self.node = node
        super().__init__(f"non-finite value produced at node '{node}'")


class StructureError(HarlensError, ValueError):
    """Two parameter-shaped objects are not congruent."""


class SchemaError(HarlensError, ValueError):
    pass


class ParseError(HarlensError, ValueError):
    def __init__(self, path, line: int, detail: str):
        self.line = line
        super().__init__(f"{path}:{line}: {detail}")


class InsufficientDataError(HarlensError, ValueError):
    pass
