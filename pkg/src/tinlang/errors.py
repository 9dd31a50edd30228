"""Exception hierarchy for the tinlang engine."""


class TinError(Exception):
    """Base class for all tinlang errors."""


# --- tensor construction / access ---

class DuplicateCoordinate(TinError):
    pass


class CoordinateOutOfRange(TinError):
    pass


class ValueEqualsFill(TinError):
    pass


class PrefixNotPresent(TinError):
    """The requested fiber prefix holds no stored entries (all-fill sub-fiber)."""


class OracleDimensionLimitExceeded(TinError):
    pass


# --- parsing / program structure ---

class ProgramSyntaxError(TinError):
    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, col {col})")
        self.line = line
        self.col = col


class UnknownOperator(TinError):
    pass


class UnboundAlias(TinError):
    pass


class UnboundName(TinError):
    pass


class ExpansionLimitExceeded(TinError):
    pass


# --- statistics ---

class ExtentMismatch(TinError):
    pass


class FillNotAnnihilator(TinError):
    pass


class UnknownIndex(TinError):
    pass


class UnreachableFullSet(TinError):
    pass


# --- optimization / execution ---

class CyclicConstraints(TinError):
    pass


class IndexNotAnnotated(TinError):
    pass


class SearchBudgetExceeded(TinError):
    pass


class DiscordantAccess(TinError):
    pass


class TimeoutExceeded(TinError):
    pass
