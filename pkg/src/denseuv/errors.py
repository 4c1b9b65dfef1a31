"""Exception types shared across the package."""


class SchemaError(ValueError):
    """Landmark sets disagree on structure names or per-structure counts."""


class DegeneracyError(ValueError):
    """Input geometry is degenerate (coincident or collinear points)."""


class InsufficientSupportError(ValueError):
    """Fewer masked pixels than requested candidates."""


class EmptyStructureError(ValueError):
    """A structure has an empty mask."""


class EmptySupportError(ValueError):
    """A reduction has no valid pixels to average over."""


class ExtractionError(ValueError):
    """One or more structures/landmarks could not be extracted.

    ``failures`` maps structure name to a list of ``(index, reason)`` pairs;
    index is ``None`` when the whole structure failed.
    """

    def __init__(self, failures: dict):
        self.failures = failures
        parts = []
        for name, items in failures.items():
            for idx, reason in items:
                where = name if idx is None else f"{name}[{idx}]"
                parts.append(f"{where}: {reason}")
        super().__init__("; ".join(parts))

    @property
    def structures(self) -> list[str]:
        return list(self.failures)


class StaleTapeError(RuntimeError):
    """backward() was called without a matching forward()."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""


class SpecError(ValueError):
    """Invalid synthetic shape specification; ``field`` names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
