"""``figa`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 ingestion error,
4 remote-service error, 5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from . import pipeline, stats
from .config import PRESETS, RunConfig, resolve_config
from .errors import ConfigError, FigaError
from .model import ModelParams, WeightedRecord, load_checkpoint, save_checkpoint
from .services import HttpCompletionService, HttpRewardService, StubCompletionService, StubRewardService
from .tokens import edit_script, tokenize
from .train import (
    build_vocab,
    encode_all,
    initial_nlls,
    read_weighted,
    sft_records,
    train,
    write_weighted,
)
from .weighting import (
    AnnotatorMode,
    NllMode,
    Strategy,
    apply_nll_filter,
    assign_weights,
    bag_of_words_weights,
    external_annotator_weights,
    reward_scaled_config,
)

log = logging.getLogger("figa")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flat key/value overrides")
    p.add_argument("--preset", choices=sorted(PRESETS))


def _resolve(args: argparse.Namespace, keys: Sequence[str]) -> RunConfig:
    flags = {k: getattr(args, k, None) for k in keys}
    flags["preset"] = args.preset
    return resolve_config(args.config, flags)


def _completion(cfg: RunConfig, endpoint: str | None = None) -> Any:
    if cfg.stub_services:
        return StubCompletionService(cfg.seed)
    endpoint = endpoint or cfg.completion_endpoint
    if not endpoint:
        raise ConfigError("no completion endpoint configured (set completion_endpoint or FIGA_COMPLETION_ENDPOINT)")
    return HttpCompletionService(endpoint, cfg.completion_model, temperature=cfg.temperature)


def _scorer(cfg: RunConfig, stub: bool = False) -> Any:
    if stub or cfg.stub_services:
        return StubRewardService()
    if not cfg.reward_endpoint:
        raise ConfigError("no reward endpoint configured (set reward_endpoint or FIGA_REWARD_ENDPOINT)")
    return HttpRewardService(cfg.reward_endpoint)


def _emit(obj: Any) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_build_spa(args: argparse.Namespace) -> int:
    cfg = _resolve(args, ["eta1", "eta2", "eta3", "seed", "workers", "stub_services"])
    pool = pipeline.ingest_rollouts(args.pool, args.pool_format)
    meta = pipeline.build_spa(
        pool,
        _completion(cfg),
        _scorer(cfg),
        args.out,
        thresholds=cfg.thresholds,
        skip_filter=args.skip_filter,
        skip_revision=args.skip_revision,
        workers=cfg.workers,
        seed=cfg.seed,
        config_hash=cfg.hash(),
        decoding={"temperature": cfg.temperature},
    )
    _emit(meta["counts"])
    return 0


def cmd_synth_pool(args: argparse.Namespace) -> int:
    pipeline.write_pool(pipeline.synth_pool(args.n, args.seed), args.out)
    return 0


def _raw_rows(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_annotate(args: argparse.Namespace) -> int:
    cfg = _resolve(
        args, ["alpha", "beta", "gamma", "nll_threshold", "nll_mode", "strategy", "annotator_mode", "stub_services"]
    )
    weight_cfg = cfg.weight
    records = pipeline.read_spa(args.spa)
    rows = _raw_rows(args.spa)
    nll_model = load_checkpoint(args.nll_ckpt)[:2] if args.nll_ckpt else None
    strategy = weight_cfg.strategy
    if strategy is Strategy.REWARD_SCALED:
        revised_scores = [r.rewards.r_revised for r in records if r.rewards.r_revised is not None]
        initial_scores = [r.rewards.r_initial for r in records]
        if len(revised_scores) != len(records) or not records:
            raise ConfigError("reward-scaled weighting needs r_revised on every record")
        revised_range = (min(revised_scores), max(revised_scores))
        initial_range = (min(initial_scores), max(initial_scores))
    annotator = _completion(cfg, cfg.annotator_endpoint) if strategy is Strategy.EXTERNAL else None

    out = []
    for rec, row in zip(records, rows):
        query = tokenize(rec.instance.query)
        initial = tokenize(rec.initial_response)
        revised = tokenize(rec.revised_response)
        if strategy is Strategy.BAG_OF_WORDS:
            weights = bag_of_words_weights(initial, revised)
        elif strategy is Strategy.EXTERNAL:
            weights = external_annotator_weights(rec, annotator, AnnotatorMode(cfg.annotator_mode))
        else:
            rec_cfg = weight_cfg
            if strategy is Strategy.REWARD_SCALED:
                rec_cfg = reward_scaled_config(
                    rec.rewards, revised_range, initial_range, weight_cfg, cfg.scale_beta
                )
            weights = assign_weights(edit_script(initial, revised), rec_cfg)
            if weight_cfg.nll_mode is not NllMode.NONE and any(weights.initial_weights):
                if nll_model is not None:
                    nlls = initial_nlls(nll_model[0], nll_model[1], query, initial)
                elif "initial_nlls" in row:
                    nlls = [float(x) for x in row["initial_nlls"]]
                else:
                    raise ConfigError(
                        f"record {rec.instance.id}: the NLL filter needs --nll-ckpt or an initial_nlls field "
                        "(use --nll-mode none to disable it)"
                    )
                weights = apply_nll_filter(weights, nlls, weight_cfg)
        out.append(WeightedRecord(rec.instance.id, tuple(query), tuple(revised), tuple(initial), weights))
    write_weighted(out, args.out)
    meta = {"config_hash": cfg.hash(), "records": len(out), "source": Path(args.spa).name, "weight": cfg.canonical()}
    Path(args.out + ".meta").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve(args, ["lr", "epochs", "seed", "clip", "batch_size", "embed_dim", "hidden_dim"])
    records = read_weighted(args.data)
    if not records:
        raise ConfigError(f"{args.data} holds no records")
    if args.baseline == "sft":
        records = sft_records(records)
    vocab = build_vocab(records)
    params = ModelParams.init(len(vocab), cfg.embed_dim, cfg.hidden_dim, cfg.seed)
    params, trace = train(params, encode_all(records, vocab), cfg.train_options)
    manifest = {
        "baseline": args.baseline,
        "config_hash": cfg.hash(),
        "data": Path(args.data).name,
        "epochs": cfg.epochs,
        "final_total_loss": repr(trace[-1].total) if trace else "n/a",
        "seed": cfg.seed,
    }
    save_checkpoint(params, vocab, args.out, manifest)
    _emit({"checkpoint": args.out, "config_hash": cfg.hash(), "trace": [r.total for r in trace]})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args, ["max_decode_len", "workers"])
    params, vocab, manifest = load_checkpoint(args.ckpt)
    pool = pipeline.ingest_pool(args.pool, args.pool_format)
    report = stats.eval_reward(
        params, vocab, pool, _scorer(cfg, stub=args.stub_scorer), cfg.max_decode_len, cfg.workers
    )
    _emit(
        {
            "checkpoint_config_hash": manifest.get("config_hash"),
            "config_hash": cfg.hash(),
            "errors": report.errors,
            "excluded": report.excluded,
            "mean_score": report.mean_score,
            "scores": {inst.id: s for inst, s in zip(pool, report.scores)},
        }
    )
    return 0


def _spa_hash(path: str) -> str | None:
    meta = pipeline.meta_path(path)
    return json.loads(meta.read_text(encoding="utf-8")).get("config_hash") if meta.exists() else None


def cmd_stats(args: argparse.Namespace) -> int:
    report = stats.dataset_stats(args.spa).to_dict()
    report["config_hash"] = _spa_hash(args.spa)
    _emit(report)
    return 0


def cmd_hist(args: argparse.Namespace) -> int:
    values = stats.field_values(pipeline.read_spa(args.spa), args.field)
    rng = None
    if args.min is not None or args.max is not None:
        if args.min is None or args.max is None:
            raise ConfigError("--min and --max must be given together")
        rng = (args.min, args.max)
    hist = stats.reward_histogram(values, args.bins, rng)
    sys.stdout.write(f"# config_hash\t{_spa_hash(args.spa)}\n" + hist.to_tsv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="figa", description="SPA dataset construction and fine-grained weighted training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-spa", help="build a SPA dataset from an instance pool")
    p.add_argument("--pool", required=True)
    p.add_argument("--pool-format", default="jsonl", choices=["jsonl", "csv", "tsv"])
    p.add_argument("--out", required=True)
    p.add_argument("--eta1", type=float)
    p.add_argument("--eta2", type=float)
    p.add_argument("--eta3", type=float)
    p.add_argument("--skip-filter", action="store_true")
    p.add_argument("--skip-revision", action="store_true")
    p.add_argument("--stub-services", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    _config_args(p)
    p.set_defaults(func=cmd_build_spa)

    p = sub.add_parser("synth-pool", help="write a seeded synthetic instance pool")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_pool)

    p = sub.add_parser("annotate", help="compute token weights for a SPA dataset")
    p.add_argument("--spa", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--nll-threshold", type=float)
    p.add_argument("--nll-mode", choices=[m.value for m in NllMode])
    p.add_argument("--nll-ckpt", help="frozen rollout-model checkpoint used for the NLL filter")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--annotator-mode", choices=[m.value for m in AnnotatorMode])
    p.add_argument("--stub-services", action="store_true", default=None)
    _config_args(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train the reference model on weighted records")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--clip", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--baseline", choices=["figa", "sft"], default="figa")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy-decode a pool and report reward scores")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--pool-format", default="jsonl", choices=["jsonl", "csv", "tsv"])
    p.add_argument("--stub-scorer", action="store_true")
    p.add_argument("--max-decode-len", type=int)
    p.add_argument("--workers", type=int)
    _config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="reward and edit-operation means of a SPA dataset")
    p.add_argument("--spa", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("hist", help="histogram of one numeric SPA field, tab-separated")
    p.add_argument("--spa", required=True)
    p.add_argument("--field", default="r_initial")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--min", type=float)
    p.add_argument("--max", type=float)
    p.set_defaults(func=cmd_hist)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FigaError as exc:
        print(f"figa: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"figa: error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
