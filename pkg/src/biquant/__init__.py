"""Mixed-precision post-training quantization with importance-driven bit allocation,
learnable rounding, and contrastive channel-restoration fine-tuning."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AUCUndefinedError,
    BiquantError,
    ContractError,
    DomainError,
    FormatError,
    InfeasibleError,
    OptimizationError,
    StageError,
    TrainingError,
)
