import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from figa.errors import BuildError, IngestionError, RevisionError, RolloutError
from figa.pipeline import (
    FilterThresholds,
    build_spa,
    classify_reason,
    filter_instance,
    ingest_pool,
    ingest_rollouts,
    meta_path,
    read_meta,
    read_spa,
    revise,
    rollout,
    score,
    synth_pool,
    write_pool,
)
from figa.records import Instance, RevisionReason, RewardTriple, RolloutRecord
from figa.services import StubCompletionService, StubRewardService
from figa.tokens import edit_distance, tokenize

from fakes import Failing, Scripted

ETA = FilterThresholds(1.0, 3.0, 3.5)
stub_scorer = StubRewardService()


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


def test_ingest_dedups_exact_query(tmp_path):
    p = write_lines(
        tmp_path / "pool.jsonl",
        [
            {"id": "1", "query": "hi?", "reference": "hello", "source": "s"},
            {"id": "2", "query": "bye?", "reference": "ciao"},
            {"id": "3", "query": "hi?", "reference": "other"},
        ],
    )
    pool = ingest_pool(p)
    assert [i.id for i in pool] == ["1", "2"]
    assert pool[0] == Instance("1", "hi?", "hello", "s")


def test_ingest_empty(tmp_path):
    assert ingest_pool(write_lines(tmp_path / "e.jsonl", [])) == []


def test_ingest_names_bad_line(tmp_path):
    rows = [{"id": str(i), "query": f"q{i}", "reference": "r"} for i in range(6)] + ["{not json"]
    with pytest.raises(IngestionError) as info:
        ingest_pool(write_lines(tmp_path / "bad.jsonl", rows))
    assert info.value.line == 7
    assert "line 7" in str(info.value)


def test_ingest_missing_field_and_missing_file(tmp_path):
    with pytest.raises(IngestionError) as info:
        ingest_pool(write_lines(tmp_path / "m.jsonl", [{"id": "1", "query": "q"}]))
    assert info.value.line == 1
    with pytest.raises(IngestionError):
        ingest_pool(tmp_path / "absent.jsonl")


def test_ingest_tsv_and_rollout_rows(tmp_path):
    p = tmp_path / "pool.tsv"
    p.write_text("id\tquery\treference\tsource\n1\tq one\tr one\tx\n2\tq two\tr two\tx\n")
    assert [i.query for i in ingest_pool(p, "tsv")] == ["q one", "q two"]
    j = write_lines(tmp_path / "r.jsonl", [{"id": "1", "query": "q", "reference": "r", "initial_response": "y"}])
    (item,) = ingest_rollouts(j)
    assert isinstance(item, RolloutRecord) and item.initial_response == "y"


def test_pool_round_trip(tmp_path):
    pool = synth_pool(12, seed=4)
    write_pool(pool, tmp_path / "p.jsonl")
    assert ingest_pool(tmp_path / "p.jsonl") == pool


def test_rollout_stub_echo():
    inst = Instance("1", "Why is the sky blue?", "ref")
    rec = rollout(inst, StubCompletionService(), temperature=0.3)
    assert rec.initial_response == "STUB:Why is the sky blue?"
    assert rec.instance is inst


def test_rollout_failure_is_rollout_error():
    with pytest.raises(RolloutError):
        rollout(Instance("1", "q", "r"), Failing())


def test_score_stub_values():
    assert score("q", "a b c", stub_scorer, reference="a b c") == 4.0
    assert score("q", "x y", stub_scorer, reference="a b") == -1.0
    assert score("q", "a b", stub_scorer, reference="a b c d") == 1.5


@pytest.mark.parametrize(
    "r_init, r_ref, keep, predicate",
    [(-1.0, 4.0, True, None), (2.0, 5.0, False, 1), (0.0, 3.2, False, 3), (0.0, 3.0, False, 2), (1.0, 5.0, False, 1)],
)
def test_filter_examples(r_init, r_ref, keep, predicate):
    d = filter_instance(RewardTriple(r_init, r_ref), ETA)
    assert d.keep is keep
    assert d.failed_predicate == predicate


def predicates_hold(rewards, eta):
    return (
        rewards.r_initial < eta.eta1
        and rewards.r_reference > eta.eta2
        and rewards.r_reference - rewards.r_initial > eta.eta3
    )


rewards_st = st.builds(RewardTriple, st.floats(-5, 5), st.floats(-5, 5))
eta_st = st.builds(FilterThresholds, st.floats(-3, 3), st.floats(-3, 5), st.floats(0, 6))


@given(rewards_st, eta_st, st.floats(0, 2))
def test_filter_monotone_in_thresholds(rewards, eta, bump):
    keep = filter_instance(rewards, eta).keep
    assert keep == predicates_hold(rewards, eta)
    looser = FilterThresholds(eta.eta1 + bump, eta.eta2, eta.eta3)
    assert filter_instance(rewards, looser).keep >= keep
    for tighter in (
        FilterThresholds(eta.eta1, eta.eta2 + bump, eta.eta3),
        FilterThresholds(eta.eta1, eta.eta2, eta.eta3 + bump),
    ):
        assert filter_instance(rewards, tighter).keep <= keep


def scored(query="q", initial="the cat", reference="the dog sat"):
    inst = Instance("i1", query, reference)
    return RolloutRecord(inst, initial, RewardTriple(-1.0, 4.0))


@pytest.mark.parametrize(
    "reply, reason", [("B", RevisionReason.LACK_OF_DETAIL), (" c.", RevisionReason.STRUCTURE), ("(a)", RevisionReason.INACCURACY)]
)
def test_classify_parses(reply, reason):
    assert classify_reason(scored(), Scripted(reply)) == (reason, False)


def test_classify_defaults_after_two_unparseable():
    svc = Scripted("unsure")
    assert classify_reason(scored(), svc) == (RevisionReason.LACK_OF_DETAIL, True)
    assert len(svc.prompts) == 2


def test_classify_second_reply_counts():
    assert classify_reason(scored(), Scripted("hmm", "D")) == (RevisionReason.OTHER, False)


def test_revise_reason_d_uses_reference():
    svc = Scripted("should not be called")
    rec = revise(scored(), RevisionReason.OTHER, svc, stub_scorer)
    assert rec.revised_response == rec.instance.reference
    assert "reason_d_reference" in rec.flags and svc.prompts == []


def test_revise_verbatim_reference():
    r = scored()
    rec = revise(r, RevisionReason.LACK_OF_DETAIL, Scripted("the dog sat"), stub_scorer)
    assert rec.revised_response == "the dog sat"
    assert rec.edit_ops == edit_distance(tokenize("the cat"), tokenize("the dog sat"))
    assert rec.rewards.r_revised == 4.0


@pytest.mark.parametrize("svc", [Scripted("   "), Failing()])
def test_revise_errors(svc):
    with pytest.raises(RevisionError):
        revise(scored(), RevisionReason.INACCURACY, svc, stub_scorer)


def run_build(tmp_path, name="spa.jsonl", seed=3, n=100, **kw):
    out = tmp_path / name
    meta = build_spa(synth_pool(n, seed=seed), StubCompletionService(seed), stub_scorer, out, ETA, seed=seed, **kw)
    return out, meta


def test_build_records_satisfy_predicates(tmp_path):
    out, meta = run_build(tmp_path)
    records = read_spa(out)
    assert records and len(records) == meta["counts"]["kept"]
    eta = FilterThresholds(**read_meta(out)["thresholds"])
    for rec in records:
        assert predicates_hold(rec.rewards, eta)
        assert rec.edit_ops == edit_distance(tokenize(rec.initial_response), tokenize(rec.revised_response))
        if rec.reason is RevisionReason.OTHER:
            assert rec.revised_response == rec.instance.reference
    counts = meta["counts"]
    assert counts["kept"] + sum(counts["filtered_out"].values()) + counts["errors"] == 100
    assert meta["services"] == {"completion": "stub-completion:seed=3", "reward": "stub-reward:jaccard"}


def test_build_is_byte_identical(tmp_path):
    a, _ = run_build(tmp_path, "a.jsonl", workers=8)
    b, _ = run_build(tmp_path, "b.jsonl", workers=1)
    assert a.read_bytes() == b.read_bytes()
    assert meta_path(a).read_bytes() == meta_path(b).read_bytes()


def test_skip_filter_keeps_every_rollout(tmp_path):
    out, meta = run_build(tmp_path, skip_filter=True)
    records = read_spa(out)
    assert len(records) == meta["counts"]["rolled_out"] - meta["counts"]["errors"] == 100
    assert all("filter_skipped" in r.flags for r in records)


def test_skip_revision_uses_reference(tmp_path):
    out, _ = run_build(tmp_path, skip_revision=True)
    records = read_spa(out)
    assert records
    for r in records:
        assert r.revised_response == r.instance.reference
        assert "revision_skipped" in r.flags


def test_build_output_order_follows_pool(tmp_path):
    out, _ = run_build(tmp_path, skip_filter=True, workers=16)
    assert [r.instance.id for r in read_spa(out)] == [i.id for i in synth_pool(100, seed=3)]


class FlakyScorer:
    identity = "flaky"

    def __init__(self, bad_ids):
        self.bad = bad_ids

    def score(self, query, response, reference=None):
        if any(query.endswith(f" q{i}?") for i in self.bad):
            raise RolloutError("boom")
        return stub_scorer.score(query, response, reference)


def test_build_tolerates_minority_errors(tmp_path):
    pool = synth_pool(10, seed=1)
    meta = build_spa(pool, StubCompletionService(1), FlakyScorer({0, 1, 2}), tmp_path / "o.jsonl", skip_filter=True)
    assert meta["counts"]["errors"] == 3
    assert len(read_spa(tmp_path / "o.jsonl")) == 7


def test_build_fails_on_majority_errors(tmp_path):
    pool = synth_pool(10, seed=1)
    with pytest.raises(BuildError):
        build_spa(pool, StubCompletionService(1), FlakyScorer(set(range(6))), tmp_path / "o.jsonl")
    assert not (tmp_path / "o.jsonl").exists()
    assert not (tmp_path / "o.jsonl.tmp").exists()


def test_defaulted_reason_is_flagged(tmp_path):
    class Unsure(StubCompletionService):
        def complete(self, prompt, **params):
            return "not sure" if prompt.startswith("Question:") and "Among them" in prompt else super().complete(prompt)

    meta = build_spa(synth_pool(20, seed=2), Unsure(2), stub_scorer, tmp_path / "o.jsonl", skip_filter=True)
    records = read_spa(tmp_path / "o.jsonl")
    assert all("reason_defaulted" in r.flags and r.reason is RevisionReason.LACK_OF_DETAIL for r in records)
    assert meta["counts"]["reason_defaulted"] == 20
