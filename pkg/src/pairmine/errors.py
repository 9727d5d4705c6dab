"""Exception taxonomy shared across the package.

Every error carries an ``exit_code`` so the CLI and service agree on how a
failure is reported: 2 = configuration / input format, 3 = missing or stale
artifact, 4 = numeric failure.
"""

from __future__ import annotations


class PairmineError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(PairmineError):
    """Bad configuration value, unreadable input, or unknown option."""

    exit_code = 2


class CorpusFormatError(ConfigError):
    """Malformed corpus or seed file; message names the offending line."""


class MissingArtifactError(PairmineError):
    """A required upstream stage artifact is absent."""

    exit_code = 3


class StaleArtifactError(MissingArtifactError):
    """An upstream artifact exists but no longer matches its recorded hash."""


class UnresolvableRecordError(MissingArtifactError):
    """A candidate references a record id unknown to the corpus."""


class NumericError(PairmineError):
    """Non-finite values, degenerate geometry, or shape mismatches."""

    exit_code = 4


class UnembeddableRecordError(NumericError):
    """Record produced no features, so it cannot be embedded."""


class DegenerateEmbeddingError(NumericError):
    """Pre-normalization embedding norm is numerically zero."""


class DegenerateMarginError(NumericError):
    """Margin denominator is numerically zero; pair must be excluded."""


class DimensionMismatchError(NumericError):
    """Vector or feature width does not match the model/index."""
