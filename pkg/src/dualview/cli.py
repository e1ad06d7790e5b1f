"""Command-line entry point: ``dualview <command> [--config F] [--seed S] [--out D] [--force]``.

Commands and what they write under ``--out`` (default ``out``):

=================  ==========================================================
gen-data           corpus/ (train and test splits, test.captions_gt.jsonl)
build-pairs        pairs.jsonl, pairing_stats.json
train              checkpoint/ (encoder, vocab, hyper), train_report.csv
eval-retrieval     retrieval/metrics.csv
eval-grounding     grounding/metrics.csv
eval-zeroshot      zeroshot/metrics.csv, per_class.csv, actmap_<video>.csv
train-captioner    captioner/decoder.npz
eval-caption       captions/captions_pred.jsonl, caption_metrics.csv
ablate             ablation/metrics.csv (one row per cell and seed)
=================  ==========================================================

Exit codes: 0 success, 2 invalid config, input or refused overwrite,
3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from dualview import captioner as cap
from dualview import experiments as ex
from dualview import zeroshot as zs
from dualview.corpus import generate_corpus, read_corpus, write_corpus
from dualview.encoders import HyperConfig, SubwordVocab, embed_texts, init_params, load_params, save_params
from dualview.errors import DualViewError, TrainingDivergedError
from dualview.objective import prepare_pairs, train
from dualview.pairing import read_pairs, write_pairs

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    """Bad invocation: missing input file or refused overwrite."""


@dataclasses.dataclass
class Context:
    run: ex.RunConfig
    out: Path
    force: bool
    args: argparse.Namespace

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def corpus_dir(self) -> Path:
        return Path(self.args.corpus) if self.args.corpus else self.out / "corpus"

    @property
    def checkpoint(self) -> Path:
        return Path(self.args.checkpoint) if self.args.checkpoint else self.out / "checkpoint"

    def need(self, *paths: Path):
        missing = [str(p) for p in paths if not Path(p).exists()]
        if missing:
            raise UsageError("missing input file(s): " + ", ".join(missing))

    def claim(self, *paths: Path):
        """Refuse to overwrite existing outputs unless --force was given."""
        existing = [str(p) for p in paths if Path(p).exists()]
        if existing and not self.force:
            raise UsageError("refusing to overwrite " + ", ".join(existing) + " (use --force)")
        for p in paths:
            Path(p).parent.mkdir(parents=True, exist_ok=True)


def _load_corpus(ctx: Context, split: str):
    ctx.need(ctx.corpus_dir / f"{split}.transcripts.jsonl", ctx.corpus_dir / f"{split}.labels.jsonl")
    return read_corpus(ctx.corpus_dir, split)


def _load_model(ctx: Context):
    ck = ctx.checkpoint
    ctx.need(ck / "encoder.f32", ck / "encoder.manifest.json", ck / "vocab.json", ck / "hyper.json")
    params = load_params(ck).frozen()
    vocab = SubwordVocab.load(ck / "vocab.json")
    hyper = HyperConfig.from_dict(json.loads((ck / "hyper.json").read_text(encoding="utf-8"))).validate()
    return params, vocab, hyper


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(ctx: Context) -> int:
    root = ctx.corpus_dir
    train_c = generate_corpus(ex.train_world(ctx.run, ctx.seed))
    test_c = generate_corpus(ex.test_world(ctx.run, ctx.seed))
    gt_path = root / "test.captions_gt.jsonl"
    ctx.claim(root / "train.transcripts.jsonl", root / "test.transcripts.jsonl", gt_path)
    write_corpus(root, train_c, "train", force=True)
    write_corpus(root, test_c, "test", force=True)
    cap.write_caption_gt(gt_path, ex.caption_benchmark(test_c, ctx.run.world.keywords(), ctx.seed))
    print(f"wrote {len(train_c.videos)} train and {len(test_c.videos)} test videos to {root}")
    return EXIT_OK


def cmd_build_pairs(ctx: Context) -> int:
    corpus = _load_corpus(ctx, "train")
    pairs_path, stats_path = ctx.out / "pairs.jsonl", ctx.out / "pairing_stats.json"
    ctx.claim(pairs_path, stats_path)
    stats: dict = {}
    pairs = ex.make_pairs(ctx.run, corpus, ctx.seed, stats=stats)
    write_pairs(pairs_path, pairs)
    stats_path.write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{len(pairs)} pairs ({stats['a_kept']} of {stats['a_segments']} A segments kept)")
    return EXIT_OK


def cmd_train(ctx: Context) -> int:
    corpus = _load_corpus(ctx, "train")
    ctx.need(ctx.out / "pairs.jsonl")
    pairs = read_pairs(ctx.out / "pairs.jsonl")
    ck = ctx.checkpoint
    report_path = ctx.out / "train_report.csv"
    ctx.claim(ck / "encoder.f32", ck / "vocab.json", ck / "hyper.json", report_path)
    vocab = ex.run_vocab(ctx.run, corpus, ctx.seed)
    hyper = ctx.run.hyper.validate()
    data = prepare_pairs(pairs, corpus.videos, vocab, hyper)
    params0 = init_params(len(vocab), ctx.run.world.feature_dim, hyper, np.random.default_rng([ctx.seed, 1]))
    params, report = train(data, params0, hyper, np.random.default_rng([ctx.seed, 2]))
    save_params(ck, params)
    vocab.save(ck / "vocab.json")
    (ck / "hyper.json").write_text(json.dumps(hyper.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    report.write_csv(report_path)
    print(f"trained {hyper.steps} steps, final loss {report.total[-1]:.4f}" if report.total else "trained 0 steps")
    return EXIT_OK


def cmd_eval_retrieval(ctx: Context) -> int:
    test = _load_corpus(ctx, "test")
    params, vocab, hyper = _load_model(ctx)
    path = ctx.out / "retrieval" / "metrics.csv"
    ctx.claim(path)
    queries = ex.event_queries(test, ctx.run.world.keywords(), ctx.seed)
    metrics = ex.retrieval_eval(params, vocab, hyper, test, queries, ctx.run.eval.ks)
    zs.write_metrics_csv(path, metrics)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_eval_grounding(ctx: Context) -> int:
    test = _load_corpus(ctx, "test")
    params, vocab, hyper = _load_model(ctx)
    path = ctx.out / "grounding" / "metrics.csv"
    ctx.claim(path)
    queries = ex.event_queries(test, ctx.run.world.keywords(), ctx.seed)
    metrics = ex.grounding_eval(params, vocab, hyper, test, queries, ctx.run.eval)
    zs.write_metrics_csv(path, metrics)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_eval_zeroshot(ctx: Context) -> int:
    test = _load_corpus(ctx, "test")
    params, vocab, hyper = _load_model(ctx)
    out = ctx.out / "zeroshot"
    if ctx.args.prompts:
        ctx.need(Path(ctx.args.prompts))
        prompts = zs.PromptClassSet.load(ctx.args.prompts)
    else:
        prompts = ex.synthetic_prompts(ctx.run.world.keywords())
    n_labels = ctx.run.world.n_event_classes
    if sorted(c.id for c in prompts.classes) != list(range(n_labels)):
        raise UsageError(f"prompt ids must cover the {n_labels} label ids 0..{n_labels - 1}")
    actmaps = [out / f"actmap_{vid}.csv" for vid in sorted(test.videos)]
    ctx.claim(out / "metrics.csv", out / "per_class.csv", out / "prompts.json", *actmaps)
    metrics, per_class = ex.zeroshot_eval(params, vocab, hyper, test, prompts, ctx.run.eval.zeroshot_clip_s)
    zs.write_metrics_csv(out / "metrics.csv", metrics)
    zs.write_per_class_csv(out / "per_class.csv", per_class)
    prompts.save(out / "prompts.json")
    latents = embed_texts(prompts.prompts, vocab, params, hyper)
    for vid, path in zip(sorted(test.videos), actmaps):
        video = test.videos[vid]
        first_class = video.event_timeline[0][0]
        zs.write_activation_csv(path, video, zs.activation_map(video, latents[first_class], params))
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_train_captioner(ctx: Context) -> int:
    corpus = _load_corpus(ctx, "train")
    params, vocab, hyper = _load_model(ctx)
    path = ctx.out / "captioner" / "decoder.npz"
    ctx.claim(path, path.with_suffix(".json"))
    sentences = ex.metadata_corpus(corpus, ctx.run.world.keywords(), ctx.seed)
    decoder, report = cap.train_text_only(
        sentences, params, vocab, hyper, ctx.run.captioner, np.random.default_rng([ctx.seed, 6])
    )
    decoder.save(path)
    meta = {"max_len": ex.max_len_for(vocab, sentences, ctx.run.captioner), "config": ctx.run.captioner.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"captioner trained on {len(sentences)} sentences, final loss {report.losses[-1]:.4f}")
    return EXIT_OK


def cmd_eval_caption(ctx: Context) -> int:
    test = _load_corpus(ctx, "test")
    params, vocab, hyper = _load_model(ctx)
    dec_path = ctx.out / "captioner" / "decoder.npz"
    gt_path = Path(ctx.args.captions_gt) if ctx.args.captions_gt else ctx.corpus_dir / "test.captions_gt.jsonl"
    ctx.need(dec_path, dec_path.with_suffix(".json"), gt_path)
    decoder = cap.DecoderParams.load(dec_path)
    max_len = json.loads(dec_path.with_suffix(".json").read_text(encoding="utf-8"))["max_len"]
    examples = cap.read_caption_gt(gt_path)
    unknown = sorted({e.interval[0] for e in examples} - set(test.videos))
    if unknown:
        raise UsageError(f"caption references name unknown videos: {unknown}")
    out = ctx.out / "captions"
    ctx.claim(out / "captions_pred.jsonl", out / "caption_metrics.csv")
    scores, captions = ex.caption_eval(params, vocab, hyper, decoder, test, examples, max_len)
    cap.write_caption_predictions(out / "captions_pred.jsonl", examples, captions)
    cap.write_caption_metrics(out / "caption_metrics.csv", scores)
    print(" ".join(f"{k}={v:.4f}" for k, v in scores.items()))
    return EXIT_OK


def cmd_ablate(ctx: Context) -> int:
    seeds = ctx.args.seeds if ctx.args.seeds else [ctx.seed]
    path = ctx.out / "ablation" / "metrics.csv"
    ctx.claim(path)
    results = ex.run_ablation(ctx.run, seeds)
    rows = [r.row() for r in results]
    zs.write_per_class_csv(path, rows)
    print(f"{len(rows)} ablation rows ({len(ctx.run.ablation.cells())} cells x {len(seeds)} seeds)")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-pairs": cmd_build_pairs,
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-grounding": cmd_eval_grounding,
    "eval-zeroshot": cmd_eval_zeroshot,
    "train-captioner": cmd_train_captioner,
    "eval-caption": cmd_eval_caption,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualview", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON (default: bundled demo config)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: config out_dir)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--corpus", help="corpus directory (default: <out>/corpus)")
        p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/checkpoint)")
        if name == "eval-zeroshot":
            p.add_argument("--prompts", help="prompts.json (default: synthetic keyword prompts)")
        if name == "eval-caption":
            p.add_argument("--captions-gt", help="captions_gt.jsonl (default: <corpus>/test.captions_gt.jsonl)")
        if name == "ablate":
            p.add_argument("--seeds", type=int, nargs="+", help="seeds to sweep (default: --seed)")
    return parser


def make_context(args: argparse.Namespace) -> Context:
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"missing input file(s): {args.config}")
        run = ex.load_run_config(args.config)
    else:
        run = ex.demo_config()
    if args.seed is not None:
        run = run.replace(seed=args.seed)
    out = Path(args.out) if args.out else Path(run.out_dir)
    return Context(run.validate(), out, args.force, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = make_context(args)
        return COMMANDS[args.command](ctx)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, DualViewError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
