"""Exception hierarchy shared by all modules.

The CLI maps these onto its exit-code contract: config errors exit 2,
data errors 3, numeric errors 4, compatibility errors 5.
"""


class DeclmError(Exception):
    """Base class for all library errors."""


class ConfigError(DeclmError):
    """Invalid configuration value, unknown key, or malformed option."""


class ContractError(DeclmError):
    """A caller violated an API precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class NumericDomainError(DeclmError):
    """An operation received values outside its numeric domain (NaN, inf, log of <= 0)."""


class TrainingDivergedError(DeclmError):
    """Training produced a non-finite loss."""


class VocabularyError(DeclmError):
    """A token id lies outside the vocabulary."""


class DataError(DeclmError):
    """Problem with input data files or their contents."""


class ManifestError(DataError):
    """Malformed manifest line or duplicate utterance id."""


class FeatureFormatError(DataError):
    """Feature file has a bad magic, bad header, or truncated payload."""


class CompatibilityError(DeclmError):
    """Two artifacts (model, fusion LM, vocabulary) do not fit together."""


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before the declared payload is complete."""


class CheckpointShapeError(CheckpointError):
    """Stored parameter shapes are internally inconsistent."""
