"""Fine-grained quality-aware alignment tuning at desk scale."""

from .errors import (
    ConfigError,
    FigaError,
    IngestionError,
    ServiceError,
    TrainingDivergence,
    VocabularyError,
)
from .records import Instance, RevisionReason, RewardTriple, RolloutRecord, SpaRecord
from .tokens import EditScript, TokenTag, detokenize, edit_distance, edit_script, tokenize
from .weighting import TokenWeights, WeightConfig, apply_nll_filter, assign_weights

__version__ = "0.1.0"
