"""Token-level weights for the revised and initial responses.

The revised side gets ``alpha`` on added/substituted tokens and ``gamma``
elsewhere; the initial side gets ``beta`` on deleted/substituted tokens and
0 elsewhere. Variants swap in other ways of picking the encouraged tokens
or filter the penalised ones by the rollout model's confidence.
"""

from __future__ import annotations

import ast
import enum
import logging
import math
import re
from dataclasses import dataclass
from typing import Sequence

from . import prompts
from .errors import AnnotationError, ConfigError, ServiceError, StructuralError
from .records import RewardTriple, SpaRecord
from .services import CompletionService
from .tokens import EditScript, TokenTag, tokenize

logger = logging.getLogger(__name__)


class NllMode(str, enum.Enum):
    BELOW = "below"
    INVERTED = "inverted"
    NONE = "none"


class Strategy(str, enum.Enum):
    LEVENSHTEIN = "levenshtein"
    BAG_OF_WORDS = "bag-of-words"
    EXTERNAL = "external"
    REWARD_SCALED = "reward-scaled"


_TAG_BASED = (Strategy.LEVENSHTEIN, Strategy.REWARD_SCALED)


@dataclass(frozen=True)
class WeightConfig:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.0
    nll_threshold: float = 0.6
    nll_mode: NllMode = NllMode.BELOW
    strategy: Strategy = Strategy.LEVENSHTEIN

    def __post_init__(self) -> None:
        object.__setattr__(self, "nll_mode", NllMode(self.nll_mode))
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        for name in ("alpha", "beta", "gamma", "nll_threshold"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"{name} must be a finite number, got {value!r}")
        if self.beta < 0 or self.gamma < 0 or self.alpha < 0:
            raise ConfigError("alpha, beta and gamma must be non-negative")
        # min-max scaling can legitimately put alpha at 0
        if self.alpha == 0 and self.strategy not in (Strategy.EXTERNAL, Strategy.REWARD_SCALED):
            raise ConfigError(f"alpha must be > 0 for strategy {self.strategy.value}")
        if self.nll_threshold <= 0:
            raise ConfigError("nll_threshold must be > 0")


@dataclass(frozen=True)
class TokenWeights:
    revised_weights: tuple[float, ...]
    initial_weights: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "revised_weights", tuple(float(w) for w in self.revised_weights))
        object.__setattr__(self, "initial_weights", tuple(float(w) for w in self.initial_weights))
        for w in self.revised_weights + self.initial_weights:
            if not (w >= 0 and math.isfinite(w)):
                raise StructuralError(f"token weights must be finite and non-negative, got {w!r}")


def assign_weights(script: EditScript, config: WeightConfig) -> TokenWeights:
    if config.strategy not in _TAG_BASED:
        raise ConfigError(f"assign_weights needs a tag-based strategy, got {config.strategy.value}")
    encouraged = (TokenTag.ADDED, TokenTag.SUBSTITUTED)
    penalised = (TokenTag.DELETED, TokenTag.SUBSTITUTED)
    revised = [config.alpha if tag in encouraged else config.gamma for tag in script.revised_tags]
    initial = [config.beta if tag in penalised else 0.0 for tag in script.initial_tags]
    return TokenWeights(tuple(revised), tuple(initial))


def apply_nll_filter(weights: TokenWeights, initial_nlls: Sequence[float], config: WeightConfig) -> TokenWeights:
    """Keep penalties only on tokens the rollout model was (or was not) confident about.

    ``below`` keeps a penalised token only if its NLL is under the threshold,
    ``inverted`` only if it is at or above it, ``none`` keeps everything.
    NLLs are in nats.
    """
    if len(initial_nlls) != len(weights.initial_weights):
        raise StructuralError(
            f"got {len(initial_nlls)} NLLs for {len(weights.initial_weights)} initial tokens"
        )
    if any(not (nll >= 0) for nll in initial_nlls):
        raise StructuralError("NLLs must be non-negative")
    if config.nll_mode is NllMode.NONE:
        return weights
    threshold = config.nll_threshold
    if config.nll_mode is NllMode.BELOW:
        keep = [nll < threshold for nll in initial_nlls]
    else:
        keep = [nll >= threshold for nll in initial_nlls]
    initial = tuple(w if (w == 0 or k) else 0.0 for w, k in zip(weights.initial_weights, keep))
    return TokenWeights(weights.revised_weights, initial)


def bag_of_words_weights(initial: Sequence[str], revised: Sequence[str]) -> TokenWeights:
    seen = set(initial)
    return TokenWeights(
        tuple(0.0 if tok in seen else 1.0 for tok in revised),
        (0.0,) * len(initial),
    )


def minmax(value: float, lo: float, hi: float) -> float:
    if not lo < hi:
        raise ConfigError(f"degenerate min-max range [{lo}, {hi}]")
    return min(1.0, max(0.0, (value - lo) / (hi - lo)))


def reward_scaled_config(
    rewards: RewardTriple,
    revised_range: tuple[float, float],
    initial_range: tuple[float, float],
    base: WeightConfig | None = None,
    scale_beta: bool = True,
) -> WeightConfig:
    """Per-record coefficients: alpha and beta from min-max scaled rewards, gamma 0.

    With ``scale_beta`` off only alpha is scaled and beta comes from ``base``.
    """
    if rewards.r_revised is None:
        raise ConfigError("reward-scaled weighting needs r_revised")
    base = base or WeightConfig()
    return WeightConfig(
        alpha=minmax(rewards.r_revised, *revised_range),
        beta=minmax(rewards.r_initial, *initial_range) if scale_beta else base.beta,
        gamma=0.0,
        nll_threshold=base.nll_threshold,
        nll_mode=base.nll_mode,
        strategy=Strategy.REWARD_SCALED,
    )


class AnnotatorMode(str, enum.Enum):
    WEIGHTED = "weighted"
    BINARY = "binary"


_PAIR_RE = re.compile(r"""[(\[]\s*(['"])(.*?)\1\s*,\s*(-?\d+)\s*[)\]]""")


def parse_annotation(raw: str) -> list[tuple[str, int]]:
    """Parse a ``[(word, score), ...]`` listing; scores must be integers 0-5."""
    pairs: list[tuple[str, int]] | None = None
    start, end = raw.find("["), raw.rfind("]")
    if start != -1 and end > start:
        try:
            value = ast.literal_eval(raw[start : end + 1])
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            value = None
        if isinstance(value, list) and all(
            isinstance(p, (tuple, list)) and len(p) == 2 and isinstance(p[0], str) and isinstance(p[1], int)
            for p in value
        ):
            pairs = [(str(w), int(s)) for w, s in value]
    if pairs is None:
        found = _PAIR_RE.findall(raw)
        if not found:
            raise ValueError("no (word, score) pairs found")
        pairs = [(word, int(score)) for _, word, score in found]
    for word, score in pairs:
        if not 0 <= score <= 5:
            raise ValueError(f"score {score} for {word!r} outside 0-5")
    return pairs


def annotation_weights(
    revised: Sequence[str], pairs: Sequence[tuple[str, int]], mode: AnnotatorMode
) -> tuple[float, ...]:
    """Map annotated words onto revised tokens, first unmatched occurrence wins."""
    scores: list[int | None] = [None] * len(revised)
    for word, score in pairs:
        for i, tok in enumerate(revised):
            if scores[i] is None and tok == word:
                scores[i] = score
                break
    if mode is AnnotatorMode.BINARY:
        return tuple(1.0 if s else 0.0 for s in scores)
    return tuple(0.3 if s is None else 0.7 + 0.6 * s / 5 for s in scores)


def external_annotator_weights(
    record: SpaRecord,
    annotator: CompletionService,
    mode: AnnotatorMode = AnnotatorMode.WEIGHTED,
    attempts: int = 2,
) -> TokenWeights:
    prompt = prompts.annotation_prompt(record.instance.query, record.initial_response, record.revised_response)
    raw = ""
    for attempt in range(attempts):
        try:
            raw = annotator.complete(prompt)
        except ServiceError as exc:
            raise AnnotationError(f"annotator unreachable: {exc}") from exc
        try:
            pairs = parse_annotation(raw)
        except ValueError as exc:
            logger.warning("unparseable annotation for %s (attempt %d): %s", record.instance.id, attempt + 1, exc)
            continue
        revised = tokenize(record.revised_response)
        initial = tokenize(record.initial_response)
        return TokenWeights(annotation_weights(revised, pairs, AnnotatorMode(mode)), (0.0,) * len(initial))
    raise AnnotationError(f"unparseable annotation for record {record.instance.id}", raw=raw)
