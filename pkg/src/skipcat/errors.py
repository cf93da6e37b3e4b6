"""Exception hierarchy shared across the toolkit."""

from __future__ import annotations


class SkipCatError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SkipCatError, ValueError):
    """Arguments outside an operation's domain (bad rank, shape mismatch...)."""


class NumericError(SkipCatError, ArithmeticError):
    """A numerical routine failed or refused to produce a meaningful result."""


class SvdConvergenceError(NumericError):
    pass


class RankDeficiencyError(NumericError):
    pass


class IllConditionedBlockError(NumericError):
    """The leading r x r block is too ill-conditioned to invert safely."""


class FactorizationError(NumericError):
    pass


class ContainerFormatError(SkipCatError, ValueError):
    """Malformed tensor container or manifest."""
