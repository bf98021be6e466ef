"""Exception hierarchy shared by all volmae modules.

Exit-code mapping used by the CLI:
    2 - configuration / contract / dimension problems (bad flags, shape
        mismatches, invalid masks)
    3 - I/O and data problems (missing files, bad MVOL payloads, failed
        generation)
    4 - numeric failures (NaN/Inf detected, diverged training)
    5 - undefined metrics (single-class evaluation input)
"""


class VolmaeError(Exception):
    """Base class for all volmae errors."""

    exit_code = 2


class DimensionError(VolmaeError):
    """Array or volume shapes do not satisfy an operation's contract."""

    exit_code = 2


class ConfigError(VolmaeError):
    """Invalid configuration value or combination."""

    exit_code = 2


class ContractError(VolmaeError):
    """An operation was called outside its contract (e.g. missing grads)."""

    exit_code = 2


class ValidationError(VolmaeError):
    """Input fails a value-level check (e.g. non-binary mask)."""

    exit_code = 2


class FormatError(VolmaeError):
    """On-disk payload is not a valid MVOL/checkpoint file."""

    exit_code = 3


class DataError(VolmaeError):
    """Dataset-level problem (empty dataset, undersized volumes)."""

    exit_code = 3


class GenerationError(VolmaeError):
    """Phantom generation could not satisfy its constraints."""

    exit_code = 3


class CheckpointError(VolmaeError):
    """Checkpoint payload is inconsistent with the requested model."""

    exit_code = 3


class DegenerateInputError(VolmaeError):
    """Input is degenerate for the requested operation (e.g. zero std)."""

    exit_code = 2


class NumericError(VolmaeError):
    """Non-finite values encountered."""

    exit_code = 4


class UndefinedMetricError(VolmaeError):
    """Metric is undefined for the given labels (e.g. single class)."""

    exit_code = 5
