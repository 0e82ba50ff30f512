"""Exception hierarchy shared by every module.

Errors split into two families: :class:`BadInput` for problems with user
supplied data or configuration (CLI exit code 2) and plain
:class:`CausalAdjError` for everything else (exit code 1).
"""


class CausalAdjError(Exception):
    """Base class for all toolkit errors."""


class BadInput(CausalAdjError):
    """Raised when inputs violate a documented precondition."""


class MissingFile(BadInput):
    pass


class RaggedRow(BadInput):
    def __init__(self, row, path=None):
        self.row = row
        where = f" in {path}" if path else ""
        super().__init__(f"row {row}{where} has the wrong number of cells")


class NonNumericCell(BadInput):
    def __init__(self, row, col, value=None, path=None):
        self.row = row
        self.col = col
        where = f" in {path}" if path else ""
        super().__init__(f"non-numeric cell at row {row}, column {col}{where}: {value!r}")


class DuplicateNodeId(BadInput):
    pass


class ShapeMismatch(BadInput):
    pass


class SizeMismatch(ShapeMismatch):
    pass


class RegionTooShort(BadInput):
    pass


class AsymmetricInput(BadInput):
    pass


class NegativeDistance(BadInput):
    pass


class NegativeWeight(BadInput):
    pass


class NonFiniteInput(BadInput):
    pass


class SampleCountMismatch(BadInput):
    pass


class TooFewSamples(BadInput):
    pass


class InsufficientSamples(BadInput):
    pass


class MTooLarge(BadInput):
    pass


class UnstableSpec(BadInput):
    pass


class SingularMatrix(CausalAdjError):
    pass


class Divergence(CausalAdjError):
    pass
