"""Full-precision group LIF token mixing and the SNN-MLP backbone, with
handwritten forward and backward passes on numpy."""
from .lif import (
    BACKEND,
    Direction,
    LifConfig,
    LifGrads,
    LifParams,
    LifSaved,
    lif_backward,
    lif_classical_binary,
    lif_forward,
    lif_oracle_scalar,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Direction",
    "LifConfig",
    "LifGrads",
    "LifParams",
    "LifSaved",
    "lif_backward",
    "lif_classical_binary",
    "lif_forward",
    "lif_oracle_scalar",
]
