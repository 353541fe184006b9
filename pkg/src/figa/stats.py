"""Dataset reports, reward histograms and reward evaluation of trained models."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ServiceError, StatsError
from .model import ModelParams, Vocab, greedy_decode
from .pipeline import read_spa, score
from .records import Instance, RevisionReason, SpaRecord
from .services import RewardService
from .tokens import detokenize, edit_distance, tokenize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetStats:
    n_records: int
    mean_r_initial: float
    mean_r_reference: float
    mean_r_revised: float | None
    mean_ops_reference: float
    mean_ops_revised: float
    reason_histogram: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "mean_r_initial": self.mean_r_initial,
            "mean_r_reference": self.mean_r_reference,
            "mean_r_revised": self.mean_r_revised,
            "mean_ops_reference": self.mean_ops_reference,
            "mean_ops_revised": self.mean_ops_revised,
            "reason_histogram": dict(self.reason_histogram),
        }


def _mean(values: Sequence[float]) -> float:
    return float(sum(values) / len(values))


def stats_from_records(records: Sequence[SpaRecord]) -> DatasetStats:
    if not records:
        raise StatsError("dataset is empty")
    # sorted so the report does not depend on record order
    r_init = sorted(r.rewards.r_initial for r in records)
    r_ref = sorted(r.rewards.r_reference for r in records)
    revised = [r.rewards.r_revised for r in records]
    ops_ref = sorted(
        edit_distance(tokenize(r.initial_response), tokenize(r.instance.reference)) for r in records
    )
    ops_rev = sorted(edit_distance(tokenize(r.initial_response), tokenize(r.revised_response)) for r in records)
    hist = {reason.value: 0 for reason in RevisionReason}
    for r in records:
        hist[r.reason.value] += 1
    return DatasetStats(
        n_records=len(records),
        mean_r_initial=_mean(r_init),
        mean_r_reference=_mean(r_ref),
        mean_r_revised=None if any(v is None for v in revised) else _mean(sorted(revised)),  # type: ignore[arg-type]
        mean_ops_reference=_mean(ops_ref),
        mean_ops_revised=_mean(ops_rev),
        reason_histogram=hist,
    )


def dataset_stats(path: str | os.PathLike) -> DatasetStats:
    return stats_from_records(read_spa(path))


@dataclass(frozen=True)
class Histogram:
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]

    def to_tsv(self) -> str:
        lines = ["bin_start\tbin_end\tcount"]
        for lo, hi, n in zip(self.bin_edges, self.bin_edges[1:], self.counts):
            lines.append(f"{lo:.6g}\t{hi:.6g}\t{n}")
        return "\n".join(lines) + "\n"


def reward_histogram(
    scores: Sequence[float], n_bins: int, value_range: tuple[float, float] | None = None
) -> Histogram:
    """Equal-width bins; every bin is half-open except the last, which includes its right edge."""
    if n_bins < 1:
        raise StatsError("n_bins must be at least 1")
    if len(scores) == 0:
        raise StatsError("no scores to histogram")
    counts, edges = np.histogram(np.asarray(scores, dtype=float), bins=n_bins, range=value_range)
    return Histogram(tuple(float(e) for e in edges), tuple(int(c) for c in counts))


@dataclass(frozen=True)
class EvalReport:
    mean_score: float
    scores: tuple[float | None, ...]
    responses: tuple[str, ...]
    excluded: int
    errors: dict[str, str] = field(default_factory=dict)


def eval_reward(
    params: ModelParams,
    vocab: Vocab,
    pool: Sequence[Instance],
    scorer: RewardService,
    max_len: int = 64,
    workers: int = 1,
) -> EvalReport:
    """Greedy-decode a response per query and score it.

    Query tokens unknown to the vocabulary are dropped before decoding.
    Scorer failures exclude the instance from the mean and are reported.
    """
    if not pool:
        raise StatsError("evaluation pool is empty")
    responses = []
    for inst in pool:
        query_ids = [vocab.stoi[t] for t in tokenize(inst.query) if t in vocab.stoi]
        responses.append(detokenize(vocab.decode(greedy_decode(params, query_ids, max_len))))

    def work(pair: tuple[Instance, str]) -> float | str:
        inst, response = pair
        try:
            return score(inst.query, response, scorer, reference=inst.reference)
        except ServiceError as exc:
            return str(exc)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        results = list(ex.map(work, zip(pool, responses)))
    scores: list[float | None] = []
    errors = {}
    for inst, res in zip(pool, results):
        if isinstance(res, str):
            errors[inst.id] = res
            scores.append(None)
        else:
            scores.append(res)
    valid = [s for s in scores if s is not None]
    if not valid:
        raise StatsError("every instance failed to score")
    return EvalReport(_mean(valid), tuple(scores), tuple(responses), len(errors), errors)


def field_values(records: Iterable[SpaRecord], name: str) -> list[float]:
    getters = {
        "r_initial": lambda r: r.rewards.r_initial,
        "r_reference": lambda r: r.rewards.r_reference,
        "r_revised": lambda r: r.rewards.r_revised,
        "edit_ops": lambda r: r.edit_ops,
    }
    if name not in getters:
        raise StatsError(f"unknown field {name!r}; choose from {', '.join(getters)}")
    return [float(v) for v in (getters[name](r) for r in records) if v is not None]
