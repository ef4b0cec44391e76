"""Exception types shared across the package."""

from __future__ import annotations


class SofaError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(SofaError):
    """Invalid configuration. Carries a list of (json_pointer, message) issues."""

    def __init__(self, issues):
        if isinstance(issues, str):
            issues = [("", issues)]
        self.issues = [(str(p), str(m)) for p, m in issues]
        super().__init__("; ".join(f"{p or '/'}: {m}" for p, m in self.issues))


class ValidationError(SofaError):
    """A data structure violates one of its invariants."""


class EmptyRowError(ValidationError):
    """A donor is left with no eligible recipient."""

    def __init__(self, donor_id: str, detail: str = ""):
        self.donor_id = donor_id
        msg = f"donor {donor_id!r} has no eligible recipients"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class EmptyTargetError(ValidationError):
    """A redistribution predicate selects no eligible agent."""

    def __init__(self, predicate: str, donor_id: str = ""):
        self.predicate = predicate
        self.donor_id = donor_id
        who = f" for donor {donor_id!r}" if donor_id else ""
        super().__init__(f"predicate {predicate!r} selects no eligible recipient{who}")


class SizeGuardError(ValidationError):
    """An exact (dense) code path was asked to handle a problem above its size guard."""


class ConvergenceError(SofaError):
    """Fixed-point iteration failed to reach the requested tolerance."""


class InsufficientHistoryError(SofaError):
    """The donation ledger covers fewer rounds than the detector requires."""


class UndefinedMetricError(SofaError):
    """A metric is undefined for the given input (e.g. all-zero totals)."""


class OutputLockError(SofaError):
    """The output directory is locked by another writer."""
