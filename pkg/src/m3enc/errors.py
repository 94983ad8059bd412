"""Exception types shared across the toolkit."""


class M3Error(Exception):
    """Base class for all toolkit errors."""


class ShapeError(M3Error):
    """Operands have incompatible or invalid extents."""


class NumericsError(M3Error):
    """A tensor left the finite-value domain (NaN/Inf) or a numeric
    precondition failed."""


class ConfigError(M3Error):
    """Invalid model, stage, or run configuration."""


class ContractError(M3Error):
    """A caller violated an operation's documented precondition."""


class CorpusError(M3Error):
    """Malformed corpus input (encoding, structure, or field content)."""


class CheckpointError(M3Error):
    """Checkpoint or index file is unreadable, corrupt, or version-mismatched."""


class TrainingAbort(M3Error):
    """Training stopped mid-stage; the last good checkpoint is retained."""
