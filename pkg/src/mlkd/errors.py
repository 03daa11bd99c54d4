"""Exception hierarchy shared by every module.

Two families matter to callers: configuration problems (bad hyperparameters,
malformed config files, impossible requests) and runtime problems (numeric
blowups, degenerate inputs, broken files).  The CLI maps the first family to
exit code 1 and everything else to exit code 2.
"""


class MLKDError(Exception):
    """Base class for all toolkit errors."""

    code = "RUNTIME"


class ConfigurationError(MLKDError):
    """Invalid configuration: unknown keys, bad values, impossible setups."""

    code = "CONFIG"


class ParameterError(ConfigurationError):
    """A call-level parameter is out of its valid range."""


class SpecError(ConfigurationError):
    """An architecture or dataset spec is malformed."""


class ShapeError(MLKDError):
    """Operands have incompatible shapes; the message carries both."""


class ContractError(MLKDError):
    """A caller violated an operation's stated contract."""


class NumericError(MLKDError):
    """A computation produced non-finite values; names the operation."""


class DegenerateInputError(MLKDError):
    """Input is structurally unusable (zero-norm rows, constant features)."""


class DistributionError(MLKDError):
    """Rows expected to be probability distributions are not."""


class CapabilityError(MLKDError):
    """The requested operation needs capabilities the object lacks
    (e.g. logits from a feature-only teacher)."""


class LabelError(MLKDError):
    """A class label is outside the declared range."""


class DataError(MLKDError):
    """A dataset is empty or otherwise unusable for the request."""


class SubsampleError(DataError):
    """Subsampling would leave a class empty."""


class SplitError(DataError):
    """A split fraction would leave a class empty in some part."""


class AugmentationError(MLKDError):
    """The requested augmentation is undefined for this input shape."""


class FormatError(MLKDError):
    """A container file is corrupt; carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
