"""Exception hierarchy shared by all modules."""


class SpecOffloadError(Exception):
    """Base class; ``kind`` is the machine-readable tag the CLI prints."""

    kind = "error"


class InvalidInputError(SpecOffloadError, ValueError):
    kind = "invalid-input"


class CapacityError(SpecOffloadError):
    kind = "capacity"


class StructureError(SpecOffloadError, ValueError):
    kind = "structure"


class InfeasibleBudgetError(SpecOffloadError):
    kind = "infeasible-budget"


class ConfigError(SpecOffloadError, ValueError):
    kind = "config"

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
