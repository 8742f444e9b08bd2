"""Energy-based constraint networks over frozen-encoder embedding sequences."""

from .errors import ConfigError, DataError, NumericFault, ShapeError
from .sequences import (
    LABEL_COHERENT,
    LABEL_CORRUPTED,
    LABEL_UNLABELED,
    EmbeddingSequence,
)
from .autodiff import Tape, Tensor, backward, grad_check
from .network import (
    ConstraintNetwork,
    EnergyReport,
    NetworkConfig,
    aggregate_energy,
    load_checkpoint,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "NumericFault",
    "ShapeError",
    "EmbeddingSequence",
    "LABEL_COHERENT",
    "LABEL_CORRUPTED",
    "LABEL_UNLABELED",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "ConstraintNetwork",
    "EnergyReport",
    "NetworkConfig",
    "aggregate_energy",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
