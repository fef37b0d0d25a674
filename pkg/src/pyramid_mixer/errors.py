"""Exception hierarchy shared across the package.

The CLI maps each class to a distinct exit code, so keep the taxonomy
small and stable.
"""


class PymxError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PymxError):
    """Invalid or inconsistent configuration (bad field values, unknown keys)."""


class DataError(PymxError):
    """Problems with input data: unreadable files, malformed records, out-of-vocab indices."""


class DimensionError(PymxError):
    """Tensor shape mismatch; the message names the offending shapes."""


class ContractError(PymxError):
    """An operation was called outside its contract (e.g. non-scalar loss, all-masked batch)."""


class GraphError(PymxError):
    """Compute-graph state violation, e.g. backward invoked twice without a new forward."""


class NumericError(PymxError):
    """Non-finite values produced where finite ones were required."""


class DivergenceError(PymxError):
    """Training diverged (non-finite loss or gradients)."""


class FormatError(PymxError):
    """A serialized artifact (checkpoint, vocab file) failed to parse."""
