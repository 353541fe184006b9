"""SPA dataset construction: rollout, reward filtering, reason analysis and revision."""

from __future__ import annotations

import csv
import json
import logging
import os
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

from . import prompts
from .errors import (
    BuildError,
    IngestionError,
    RevisionError,
    RolloutError,
    ScoringError,
    ServiceError,
)
from .records import Instance, RevisionReason, RewardTriple, RolloutRecord, SpaRecord
from .services import CompletionService, RewardService
from .tokens import edit_distance, tokenize

logger = logging.getLogger(__name__)

POOL_FIELDS = ("id", "query", "reference", "source")

PREDICATE_NAMES = {
    1: "initial_not_below_eta1",
    2: "reference_not_above_eta2",
    3: "gap_not_above_eta3",
}


@dataclass(frozen=True)
class FilterThresholds:
    eta1: float = 1.0
    eta2: float = 3.0
    eta3: float = 3.5


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    failed_predicate: int | None = None

    @property
    def reason(self) -> str | None:
        return None if self.failed_predicate is None else PREDICATE_NAMES[self.failed_predicate]


def _instance_from_row(row: Any, line: int) -> tuple[Instance, str | None]:
    if not isinstance(row, dict):
        raise IngestionError("row is not an object", line=line)
    missing = [k for k in ("id", "query", "reference") if k not in row]
    if missing:
        raise IngestionError(f"missing field(s) {', '.join(missing)}", line=line)
    for key in POOL_FIELDS:
        if key in row and not isinstance(row[key], (str, int)):
            raise IngestionError(f"field {key!r} must be a string", line=line)
    try:
        inst = Instance(str(row["id"]), row["query"], row["reference"], str(row.get("source", "")))
    except (ValueError, TypeError) as exc:
        raise IngestionError(str(exc), line=line) from None
    initial = row.get("initial_response")
    if initial is not None and not isinstance(initial, str):
        raise IngestionError("field 'initial_response' must be a string", line=line)
    return inst, initial


def _iter_rows(path: Path, fmt: str) -> Iterable[tuple[int, Any]]:
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise IngestionError(f"invalid JSON: {exc.msg}", line=lineno) from None
        elif fmt in ("csv", "tsv"):
            reader = csv.DictReader(fh, delimiter="," if fmt == "csv" else "\t")
            for row in reader:
                if None in row or any(v is None for v in row.values()):
                    raise IngestionError("wrong number of columns", line=reader.line_num)
                yield reader.line_num, row
        else:
            raise IngestionError(f"unknown pool format {fmt!r}")


def _load(path: str | os.PathLike, fmt: str) -> list[tuple[Instance, str | None]]:
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"no such pool file: {path}")
    seen: set[str] = set()
    out = []
    for lineno, row in _iter_rows(path, fmt):
        inst, initial = _instance_from_row(row, lineno)
        if inst.query in seen:
            continue
        seen.add(inst.query)
        out.append((inst, initial))
    return out


def ingest_pool(path: str | os.PathLike, fmt: str = "jsonl") -> list[Instance]:
    """Read an instance pool, dropping rows whose query was already seen."""
    return [inst for inst, _ in _load(path, fmt)]


def ingest_rollouts(path: str | os.PathLike, fmt: str = "jsonl") -> list[Instance | RolloutRecord]:
    """Like :func:`ingest_pool`, but rows carrying ``initial_response`` become rollouts."""
    return [inst if initial is None else RolloutRecord(inst, initial) for inst, initial in _load(path, fmt)]


def write_pool(instances: Iterable[Instance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def rollout(instance: Instance, completion: CompletionService, **decoding: Any) -> RolloutRecord:
    try:
        text = completion.complete(prompts.rollout_prompt(instance.query), **decoding)
    except ServiceError as exc:
        raise RolloutError(f"rollout failed for {instance.id}: {exc}") from exc
    return RolloutRecord(instance, text)


def score(query: str, response: str, scorer: RewardService, reference: str | None = None) -> float:
    try:
        value = scorer.score(query, response, reference=reference)
    except ScoringError:
        raise
    except ServiceError as exc:
        raise ScoringError(f"reward service failed: {exc}") from exc
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScoringError(f"non-numeric score {value!r}")
    return float(value)


def filter_instance(rewards: RewardTriple, thresholds: FilterThresholds) -> FilterDecision:
    if not rewards.r_initial < thresholds.eta1:
        return FilterDecision(False, 1)
    if not rewards.r_reference > thresholds.eta2:
        return FilterDecision(False, 2)
    if not rewards.r_reference - rewards.r_initial > thresholds.eta3:
        return FilterDecision(False, 3)
    return FilterDecision(True)


_CHOICE_RE = re.compile(r"\A[\W_]*([A-Da-d])(?:[\W_].*)?\Z", re.S)


def parse_choice(text: str) -> RevisionReason | None:
    m = _CHOICE_RE.match(text.strip())
    return RevisionReason(m.group(1).upper()) if m else None


def classify_reason(
    record: RolloutRecord, completion: CompletionService, attempts: int = 2
) -> tuple[RevisionReason, bool]:
    """Ask the completion service which of A-D best explains the weak rollout.

    Returns ``(reason, defaulted)``; after ``attempts`` unparseable replies the
    reason falls back to B with ``defaulted`` set.
    """
    inst = record.instance
    prompt = prompts.reason_prompt(inst.query, record.initial_response, inst.reference)
    for _ in range(attempts):
        try:
            reply = completion.complete(prompt)
        except ServiceError as exc:
            raise RevisionError(f"reason analysis failed for {inst.id}: {exc}") from exc
        reason = parse_choice(reply)
        if reason is not None:
            return reason, False
        logger.info("unparseable reason reply for %s: %r", inst.id, reply)
    return RevisionReason.LACK_OF_DETAIL, True


def _finish(
    record: RolloutRecord,
    revised: str,
    reason: RevisionReason,
    scorer: RewardService,
    flags: Sequence[str],
) -> SpaRecord:
    inst = record.instance
    assert record.rewards is not None
    r_revised = score(inst.query, revised, scorer, reference=inst.reference)
    rewards = RewardTriple(record.rewards.r_initial, record.rewards.r_reference, r_revised)
    ops = edit_distance(tokenize(record.initial_response), tokenize(revised))
    return SpaRecord(inst, record.initial_response, revised, rewards, reason, ops, tuple(flags))


def revise(
    record: RolloutRecord,
    reason: RevisionReason,
    completion: CompletionService,
    scorer: RewardService,
    flags: Sequence[str] = (),
) -> SpaRecord:
    """Produce the revised response. Reason D takes the reference outright."""
    inst = record.instance
    if record.rewards is None:
        raise RevisionError(f"record {inst.id} has not been scored")
    flags = list(flags)
    if reason is RevisionReason.OTHER:
        revised = inst.reference
        flags.append("reason_d_reference")
    else:
        prompt = prompts.revision_prompt(reason, inst.query, record.initial_response, inst.reference)
        try:
            revised = completion.complete(prompt)
        except ServiceError as exc:
            raise RevisionError(f"revision failed for {inst.id}: {exc}") from exc
        if not revised.strip():
            raise RevisionError(f"empty revision for {inst.id}")
    return _finish(record, revised, reason, scorer, flags)


@dataclass
class BuildCounts:
    ingested: int = 0
    rolled_out: int = 0
    errors: int = 0
    filtered_out: dict[str, int] = field(default_factory=lambda: {name: 0 for name in PREDICATE_NAMES.values()})
    kept: int = 0
    revised: int = 0
    reason_defaulted: int = 0
    reasons: dict[str, int] = field(default_factory=lambda: {r.value: 0 for r in RevisionReason})


@dataclass(frozen=True)
class _Outcome:
    record: SpaRecord | None = None
    filtered: int | None = None
    error: str | None = None
    rolled_out: bool = False


def _process(
    item: Union[Instance, RolloutRecord],
    completion: CompletionService,
    scorer: RewardService,
    thresholds: FilterThresholds,
    skip_filter: bool,
    skip_revision: bool,
    decoding: dict[str, Any],
) -> _Outcome:
    rolled = False
    try:
        if isinstance(item, RolloutRecord):
            record = item
        else:
            record = rollout(item, completion, **decoding)
        rolled = True
        inst = record.instance
        rewards = RewardTriple(
            score(inst.query, record.initial_response, scorer, reference=inst.reference),
            score(inst.query, inst.reference, scorer, reference=inst.reference),
        )
        record = RolloutRecord(inst, record.initial_response, rewards)
        flags: list[str] = []
        if skip_filter:
            flags.append("filter_skipped")
        else:
            decision = filter_instance(rewards, thresholds)
            if not decision.keep:
                return _Outcome(filtered=decision.failed_predicate, rolled_out=True)
        if skip_revision:
            flags.append("revision_skipped")
            return _Outcome(_finish(record, inst.reference, RevisionReason.OTHER, scorer, flags), rolled_out=True)
        reason, defaulted = classify_reason(record, completion)
        if defaulted:
            flags.append("reason_defaulted")
        return _Outcome(revise(record, reason, completion, scorer, flags), rolled_out=True)
    except ServiceError as exc:
        item_id = item.instance.id if isinstance(item, RolloutRecord) else item.id
        logger.error("skipping %s: %s", item_id, exc)
        return _Outcome(error=str(exc), rolled_out=rolled)


def meta_path(dataset: str | os.PathLike) -> Path:
    return Path(str(dataset) + ".meta")


def build_spa(
    pool: Sequence[Union[Instance, RolloutRecord]],
    completion: CompletionService,
    scorer: RewardService,
    out_path: str | os.PathLike,
    thresholds: FilterThresholds = FilterThresholds(),
    skip_filter: bool = False,
    skip_revision: bool = False,
    workers: int = 8,
    seed: int | None = None,
    config_hash: str | None = None,
    decoding: dict[str, Any] | None = None,
) -> dict[str, Any]:
    """Run the pipeline over ``pool`` and write ``out_path`` plus its ``.meta`` sidecar.

    Records are processed concurrently but written in pool order. Per-record
    service errors are logged and skipped; more than half erroring raises
    :class:`BuildError` and leaves no dataset behind.
    """
    out_path = Path(out_path)
    counts = BuildCounts(ingested=len(pool))
    tmp = out_path.with_name(out_path.name + ".tmp")
    decoding = dict(decoding or {})

    def work(item: Union[Instance, RolloutRecord]) -> _Outcome:
        return _process(item, completion, scorer, thresholds, skip_filter, skip_revision, decoding)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool_exec, open(tmp, "w", encoding="utf-8") as fh:
        for outcome in pool_exec.map(work, pool):
            counts.rolled_out += outcome.rolled_out
            if outcome.error is not None:
                counts.errors += 1
            elif outcome.filtered is not None:
                counts.filtered_out[PREDICATE_NAMES[outcome.filtered]] += 1
            else:
                rec = outcome.record
                assert rec is not None
                counts.kept += 1
                counts.reasons[rec.reason.value] += 1
                counts.revised += "revision_skipped" not in rec.flags and rec.reason is not RevisionReason.OTHER
                counts.reason_defaulted += "reason_defaulted" in rec.flags
                fh.write(rec.to_json() + "\n")

    if counts.errors * 2 > counts.ingested:
        tmp.unlink()
        raise BuildError(f"{counts.errors} of {counts.ingested} records failed")
    os.replace(tmp, out_path)
    meta = {
        "config_hash": config_hash,
        "counts": asdict(counts),
        "flags": {"skip_filter": skip_filter, "skip_revision": skip_revision},
        "seed": seed,
        "services": {"completion": completion.identity, "reward": scorer.identity},
        "thresholds": asdict(thresholds),
    }
    meta_path(out_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta


def read_spa(path: str | os.PathLike) -> list[SpaRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SpaRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise IngestionError(f"bad SPA record: {exc}", line=lineno) from None
    return records


def read_meta(path: str | os.PathLike) -> dict[str, Any]:
    return json.loads(meta_path(path).read_text(encoding="utf-8"))


_WORDS = (
    "the a model answer question data user helpful safe clear detail step list example code "
    "error fix explain reason result value test plan note idea part first second third final "
    "simple short long good bad true false open close start stop read write check verify "
    "source target input output number text word token line file"
).split()


def synth_pool(n: int, seed: int = 0, source: str = "synthetic") -> list[Instance]:
    """Seeded toy pool whose queries share a varying fraction of words with the reference.

    With the stub services this spreads initial rewards over the whole
    filter range, so every predicate gets exercised.
    """
    rng = random.Random(seed)
    out = []
    for i in range(n):
        ref = rng.sample(_WORDS, rng.randint(6, 14))
        share = rng.random()
        shared = [w for w in ref if rng.random() < share]
        filler = rng.sample(_WORDS, rng.randint(1, 5))
        query_words = shared + filler
        rng.shuffle(query_words)
        query = " ".join(query_words) + f" q{i}?"
        reference = " ".join(ref) + "."
        out.append(Instance(f"syn-{i:05d}", query, reference, source))
    return out
