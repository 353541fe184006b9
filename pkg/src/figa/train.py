"""SGD training on weighted records, and a seeded synthetic correction corpus."""

from __future__ import annotations

import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, StructuralError, TrainingDivergence
from .model import (
    EncodedRecord,
    LossReport,
    ModelParams,
    Vocab,
    WeightedRecord,
    encode_record,
    loss_and_grad,
    sequence_logprobs,
)
from .tokens import TokenTag, edit_script
from .weighting import TokenWeights, WeightConfig, apply_nll_filter, assign_weights

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainOptions:
    lr: float = 0.1
    epochs: int = 30
    clip: float = 5.0
    seed: int = 0
    batch_size: int = 1

    def __post_init__(self) -> None:
        if self.lr < 0 or self.epochs < 0 or self.clip <= 0 or self.batch_size < 1:
            raise ConfigError(f"invalid training options: {self}")


def _clip(grads: ModelParams, max_norm: float) -> None:
    norm = grads.norm()
    if norm > max_norm:
        scale = max_norm / norm
        for arr in grads.arrays():
            arr *= scale


def train(
    params: ModelParams,
    dataset: Sequence[EncodedRecord],
    opts: TrainOptions = TrainOptions(),
) -> tuple[ModelParams, list[LossReport]]:
    """Plain minibatch SGD with global-norm clipping.

    Each batch gradient is the mean of per-record gradients (each the raw
    sum over that record's tokens). The returned trace holds, per epoch,
    the summed loss of every record as seen right before its update.
    Deterministic for a fixed seed.
    """
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    with np.errstate(over="ignore", invalid="ignore"):
        return _train(params.copy(), dataset, opts)


def _train(
    params: ModelParams, dataset: Sequence[EncodedRecord], opts: TrainOptions
) -> tuple[ModelParams, list[LossReport]]:
    rng = np.random.default_rng(opts.seed)
    trace: list[LossReport] = []
    for epoch in range(1, opts.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_report = LossReport.of(0.0, 0.0, {"encouraged": 0, "penalised": 0})
        for start in range(0, len(order), opts.batch_size):
            batch = [dataset[i] for i in order[start : start + opts.batch_size]]
            total: ModelParams | None = None
            for rec in batch:
                report, g = loss_and_grad(params, rec)
                if not math.isfinite(report.total):
                    raise TrainingDivergence(epoch, rec.id, report.total)
                epoch_report = epoch_report + report
                if total is None:
                    total = g
                else:
                    for acc, part in zip(total.arrays(), g.arrays()):
                        acc += part
            assert total is not None
            if len(batch) > 1:
                for arr in total.arrays():
                    arr /= len(batch)
            _clip(total, opts.clip)
            for p, g in zip(params.arrays(), total.arrays()):
                p -= opts.lr * g
            if not params.is_finite():
                raise TrainingDivergence(epoch, batch[-1].id, float("nan"))
        trace.append(epoch_report)
        logger.debug("epoch %d: %s", epoch, epoch_report)
    return params, trace


def sft_records(records: Iterable[WeightedRecord]) -> list[WeightedRecord]:
    """The SFT baseline: every revised token weighted 1, nothing penalised."""
    out = []
    for rec in records:
        weights = TokenWeights((1.0,) * len(rec.revised_tokens), (0.0,) * len(rec.initial_tokens))
        out.append(WeightedRecord(rec.id, rec.query_tokens, rec.revised_tokens, rec.initial_tokens, weights))
    return out


def build_vocab(records: Iterable[WeightedRecord]) -> Vocab:
    seqs = []
    for rec in records:
        seqs.extend((rec.query_tokens, rec.revised_tokens, rec.initial_tokens))
    return Vocab.build(seqs)


def write_weighted(records: Iterable[WeightedRecord], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_weighted(path: str | os.PathLike) -> list[WeightedRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(WeightedRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise StructuralError(f"{path}:{lineno}: bad weighted record: {exc}") from None
    return out


@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 20
    n_instances: int = 500
    len_range: tuple[int, int] = (8, 12)
    p_sub: float = 0.3
    p_del: float = 0.05
    p_ins: float = 0.05
    seed: int = 0
    query_len: int = 3
    peak: float = 0.8

    def __post_init__(self) -> None:
        probs = (self.p_sub, self.p_del, self.p_ins)
        if any(not 0 <= p <= 1 for p in (*probs, self.peak)) or sum(probs) > 1:
            raise ConfigError(f"corruption probabilities must lie in [0, 1] and sum to at most 1: {probs}")
        lo, hi = self.len_range
        if not 0 <= lo <= hi or self.vocab_size < 2 or self.n_instances < 0:
            raise ConfigError(f"invalid synthetic corpus spec: {self}")


@dataclass(frozen=True)
class SynthTruth:
    """What the corruption actually did to one instance."""

    truth: tuple[str, ...]
    substituted: tuple[int, ...] = field(default=())
    deleted: tuple[int, ...] = field(default=())
    inserted_after: tuple[int, ...] = field(default=())


def synth_corpus(
    spec: SynthSpec, config: WeightConfig | None = None
) -> tuple[list[WeightedRecord], list[SynthTruth]]:
    """Truth sequences plus independently corrupted copies of them.

    Truths come from a seeded order-2 Markov source: with probability
    ``peak`` the next symbol is the one a fixed random table assigns to the
    two preceding symbols, otherwise it is uniform. The corrupted copy plays
    the initial response and the truth plays the revision; weights come from
    the edit script under ``config``. The NLL filter is not applied here
    since it needs a model; see :func:`apply_model_nll_filter`.
    """
    config = config or WeightConfig()
    rng = random.Random(spec.seed)
    symbols = [f"s{i}" for i in range(spec.vocab_size)]
    starts = ["^", *symbols]
    table = {(a, b): rng.choice(symbols) for a in starts for b in starts}
    records: list[WeightedRecord] = []
    truths: list[SynthTruth] = []
    for n in range(spec.n_instances):
        query = tuple(rng.choice(symbols) for _ in range(spec.query_len))
        truth: list[str] = []
        for _ in range(rng.randint(*spec.len_range)):
            ctx = (truth[-2] if len(truth) > 1 else "^", truth[-1] if truth else "^")
            truth.append(table[ctx] if rng.random() < spec.peak else rng.choice(symbols))
        initial: list[str] = []
        subs, dels, ins = [], [], []
        for i, tok in enumerate(truth):
            u = rng.random()
            if u < spec.p_sub:
                initial.append(rng.choice([s for s in symbols if s != tok]))
                subs.append(i)
            elif u < spec.p_sub + spec.p_del:
                dels.append(i)
            else:
                initial.append(tok)
            if rng.random() < spec.p_ins:
                initial.append(rng.choice(symbols))
                ins.append(i)
        weights = assign_weights(edit_script(initial, truth), config)
        records.append(WeightedRecord(f"synth-{n:05d}", query, tuple(truth), tuple(initial), weights))
        truths.append(SynthTruth(tuple(truth), tuple(subs), tuple(dels), tuple(ins)))
    return records, truths


def edited_positions(record: WeightedRecord) -> list[int]:
    script = edit_script(record.initial_tokens, record.revised_tokens)
    return [t for t, tag in enumerate(script.revised_tags) if tag in (TokenTag.ADDED, TokenTag.SUBSTITUTED)]


def mean_edited_logprob(params: ModelParams, vocab: Vocab, records: Iterable[WeightedRecord]) -> float:
    """Mean teacher-forced log-prob of revised tokens at added/substituted positions."""
    total, count = 0.0, 0
    for rec in records:
        positions = edited_positions(rec)
        if not positions:
            continue
        lp = sequence_logprobs(params, vocab.encode(rec.query_tokens), vocab.encode(rec.revised_tokens))
        total += float(lp[positions].sum())
        count += len(positions)
    if count == 0:
        raise StructuralError("no edited positions to evaluate")
    return total / count


def encode_all(records: Iterable[WeightedRecord], vocab: Vocab) -> list[EncodedRecord]:
    return [encode_record(rec, vocab) for rec in records]


def initial_nlls(params: ModelParams, vocab: Vocab, query: Sequence[str], initial: Sequence[str]) -> list[float]:
    """Per-token NLL (nats) of the initial response under ``params``."""
    lp = sequence_logprobs(params, vocab.encode(query), vocab.encode(initial))
    return [float(-x) for x in lp]


def apply_model_nll_filter(
    records: Iterable[WeightedRecord], params: ModelParams, vocab: Vocab, config: WeightConfig
) -> list[WeightedRecord]:
    """Filter penalties by NLLs computed once under a frozen model."""
    out = []
    for rec in records:
        nlls = initial_nlls(params, vocab, rec.query_tokens, rec.initial_tokens)
        weights = apply_nll_filter(rec.weights, nlls, config)
        out.append(WeightedRecord(rec.id, rec.query_tokens, rec.revised_tokens, rec.initial_tokens, weights))
    return out
