"""Exception types shared across the package.

The CLI maps these onto exit codes (see :mod:`metasampler.cli`).
"""


class ConfigurationError(ValueError):
    """Invalid architecture, sampler settings or run configuration."""


class ContractError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class FormatError(ValueError):
    """A file could not be parsed.  ``offset`` is the byte position, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    """A persisted artifact was written by an unsupported format version."""


class ChainDivergence(FloatingPointError):
    """A sampler step produced a non-finite state."""

    def __init__(self, step, what="state"):
        super().__init__(f"chain diverged at step {step}: non-finite {what}")
        self.step = step
        self.what = what


class MetaTrainingDiverged(RuntimeError):
    """Meta-training saw too many consecutive diverged rollouts."""
