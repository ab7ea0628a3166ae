"""Exception hierarchy shared by the library and the command line.

Format and configuration problems subclass ``ValueError`` so callers that only
know the builtin still catch them; the CLI maps every ``EvSignError`` to exit
code 2.
"""


class EvSignError(Exception):
    """Base class for all errors raised on purpose by evsign."""


class EventFormatError(EvSignError, ValueError):
    """Malformed `evsign-events v1` text or an invalid event record."""


class VoxelFormatError(EvSignError, ValueError):
    """Malformed `EVVG` voxel container."""


class CheckpointError(EvSignError, ValueError):
    """Malformed `EVCK` container or a checkpoint that does not fit the config."""


class ConfigError(EvSignError, ValueError):
    """Configuration failed schema or sanity validation."""


class ShapeError(EvSignError, ValueError):
    """Operands of a tensor op have incompatible shapes."""


class CorpusError(EvSignError, RuntimeError):
    """The synthetic corpus is missing or inconsistent."""


class NonFiniteError(EvSignError, FloatingPointError):
    """A NaN or Inf appeared while checked mode was active."""
