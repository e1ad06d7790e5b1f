"""End-to-end runs on the synthetic world: training, benchmarks and the ablation grid.

A run is described by one :class:`RunConfig`. Every random draw in a run
derives from a single integer seed, so two runs with the same config and seed
give identical numbers.

The held-out benchmarks are built from a separate test world. It shares the
class means of the training world but uses fresh videos. Text queries are
clean fluent sentences that name the event keyword. The captioning benchmark
uses short metadata-style sentences, made of the keyword plus class-specific
descriptor words.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from dualview import captioner as cap
from dualview import zeroshot as zs
from dualview.corpus import W_TEMPLATES, Corpus, WorldConfig, generate_corpus
from dualview.encoders import (
    EncoderParams,
    HyperConfig,
    SubwordVocab,
    build_vocab,
    embed_clips,
    embed_texts,
    init_params,
)
from dualview.errors import ConfigError
from dualview.objective import TrainReport, prepare_pairs, train
from dualview.pairing import ClipTextPair, FilterConfig, build_pairs

TEST_VIDEO_OFFSET = 100_000

QUERY_TEMPLATES = W_TEMPLATES
PROMPT_TEMPLATE = "in this step we work on the {kw}"

DESCRIPTORS = (
    "fundus", "serosa", "peritoneum", "fascia",
    "lumen", "mucosa", "stoma", "suture",
    "appendix", "mesoappendix", "base", "stump",
    "bowel", "staple", "seam", "loop",
    "vessel", "bleeding", "energy", "spark",
    "port", "umbilicus", "entry", "insufflation",
    "bile", "cystic", "calot", "triangle",
    "pylorus", "bulb", "papilla", "duct",
    "apron", "fold", "fat", "flap",
    "root", "arcade", "artery", "fan",
    "clot", "gauze", "pressure", "seal",
    "incision", "midline", "retractor", "wound",
)


def _checked(cls, d: dict, what: str):
    unknown = sorted(set(d) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError([f"unknown {what} field {k!r}" for k in unknown])
    return cls(**d)


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple[int, ...] = (1, 5, 10)
    window_s: float = 6.0
    stride_s: float = 2.0
    iou_threshold: float = 0.5
    test_videos: int = 8
    zeroshot_clip_s: float = 2.0

    def validate(self) -> "EvalConfig":
        bad = []
        if not self.ks or any(k < 1 for k in self.ks):
            bad.append(f"ks={list(self.ks)} must be positive")
        if self.window_s <= 0 or self.stride_s <= 0:
            bad.append("window_s and stride_s must be positive")
        if not 0 < self.iou_threshold <= 1:
            bad.append(f"iou_threshold={self.iou_threshold} not in (0, 1]")
        if self.test_videos < 1:
            bad.append(f"test_videos={self.test_videos} < 1")
        if self.zeroshot_clip_s <= 0:
            bad.append("zeroshot_clip_s must be positive")
        if bad:
            raise ConfigError(bad)
        return self


@dataclass(frozen=True)
class AblationGrid:
    views: tuple[str, ...] = ("a", "w", "both")
    lengths: tuple = ("random", 2.0, 4.0, 10.0)
    frames: tuple[int, ...] = (1, 4)

    def cells(self) -> list[tuple[str, object, int]]:
        return [(v, l, t) for v in self.views for l in self.lengths for t in self.frames]


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = WorldConfig()
    filter: FilterConfig = FilterConfig()
    hyper: HyperConfig = HyperConfig()
    captioner: cap.CaptionerConfig = cap.CaptionerConfig()
    eval: EvalConfig = EvalConfig()
    ablation: AblationGrid = AblationGrid()
    clip_length: object = "random"
    max_clip_s: float = 10.0
    min_clip_s: float = 2.0
    pairs_per_a: int = 1
    vocab_size: int = 512
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    corpus_dir: str = "corpus"
    out_dir: str = "out"

    def validate(self) -> "RunConfig":
        bad = []
        for part in (self.world, self.filter, self.hyper, self.captioner, self.eval):
            try:
                part.validate()
            except ConfigError as exc:
                bad.extend(exc.offenders)
        for length in (self.clip_length, *self.ablation.lengths):
            if length != "random" and not (isinstance(length, (int, float)) and length > 0):
                bad.append(f"clip length {length!r} must be 'random' or a positive number of seconds")
        if not 0 < self.min_clip_s < self.max_clip_s:
            bad.append("need 0 < min_clip_s < max_clip_s")
        if any(v not in ("a", "w", "both") for v in self.ablation.views):
            bad.append(f"ablation views {list(self.ablation.views)} must be drawn from a, w, both")
        if any(t < 1 for t in self.ablation.frames):
            bad.append("ablation frame counts must be >= 1")
        if self.pairs_per_a < 1:
            bad.append("pairs_per_a must be >= 1")
        if bad:
            raise ConfigError(bad)
        return self

    def fixed_length(self, length=None) -> float | None:
        length = self.clip_length if length is None else length
        return None if length == "random" else float(length)

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "filter": self.filter.to_dict(),
            "hyper": self.hyper.to_dict(),
            "captioner": self.captioner.to_dict(),
            "eval": {**dataclasses.asdict(self.eval), "ks": list(self.eval.ks)},
            "ablation": {k: list(v) for k, v in dataclasses.asdict(self.ablation).items()},
            "clip_length": self.clip_length,
            "max_clip_s": self.max_clip_s,
            "min_clip_s": self.min_clip_s,
            "pairs_per_a": self.pairs_per_a,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
            "seeds": list(self.seeds),
            "corpus_dir": self.corpus_dir,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {
            "world": WorldConfig.from_dict,
            "filter": FilterConfig.from_dict,
            "hyper": HyperConfig.from_dict,
            "captioner": cap.CaptionerConfig.from_dict,
        }
        for key, parse in nested.items():
            if key in d:
                d[key] = parse(d[key])
        if "eval" in d:
            e = dict(d["eval"])
            if "ks" in e:
                e["ks"] = tuple(int(k) for k in e["ks"])
            d["eval"] = _checked(EvalConfig, e, "eval")
        if "ablation" in d:
            d["ablation"] = _checked(AblationGrid, {k: tuple(v) for k, v in d["ablation"].items()}, "ablation")
        if "seeds" in d:
            d["seeds"] = tuple(int(s) for s in d["seeds"])
        return _checked(cls, d, "run").validate()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})"]) from None
    return RunConfig.from_dict(raw)


def demo_config() -> RunConfig:
    text = resources.files("dualview.configs").joinpath("demo.json").read_text(encoding="utf-8")
    return RunConfig.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# worlds and training


def train_world(run: RunConfig, seed: int) -> WorldConfig:
    return dataclasses.replace(run.world, seed=seed, split="train", video_offset=0)


def test_world(run: RunConfig, seed: int) -> WorldConfig:
    return dataclasses.replace(
        run.world, seed=seed, split="test", n_videos=run.eval.test_videos, video_offset=TEST_VIDEO_OFFSET
    )


def filter_for(run: RunConfig) -> FilterConfig:
    """The run's filter, with the world keywords when none are configured."""
    if run.filter.keyword_list:
        return run.filter
    return dataclasses.replace(run.filter, keyword_list=tuple(k.lower() for k in run.world.keywords()))


def corpus_vocab(corpus: Corpus, size: int, extra_texts: Sequence[str] = ()) -> SubwordVocab:
    """Shared vocabulary over the transcripts plus any extra text (metadata sentences)."""
    return build_vocab([*(s.text for s in corpus.sentences), *extra_texts], size)


def run_vocab(run: RunConfig, corpus: Corpus, seed: int) -> SubwordVocab:
    return corpus_vocab(corpus, run.vocab_size, metadata_corpus(corpus, run.world.keywords(), seed))


@dataclass
class Trial:
    params: EncoderParams
    report: TrainReport
    vocab: SubwordVocab
    hyper: HyperConfig
    pairs: list[ClipTextPair]


def make_pairs(run: RunConfig, corpus: Corpus, seed: int, length=None, stats=None) -> list[ClipTextPair]:
    return build_pairs(
        corpus, filter_for(run), seed, run.pairs_per_a,
        max_clip_s=run.max_clip_s, min_clip_s=run.min_clip_s,
        fixed_length=run.fixed_length(length), stats=stats,
    )


def run_trial(
    run: RunConfig,
    seed: int,
    *,
    views: str | None = None,
    length=None,
    T: int | None = None,
    corpus: Corpus | None = None,
    vocab: SubwordVocab | None = None,
) -> Trial:
    """Generate (or reuse) the training world, pair it and train one model."""
    corpus = corpus if corpus is not None else generate_corpus(train_world(run, seed))
    vocab = vocab if vocab is not None else run_vocab(run, corpus, seed)
    hyper = run.hyper
    if views is not None:
        hyper = dataclasses.replace(hyper, views=views)
    if T is not None:
        hyper = dataclasses.replace(hyper, T=T)
    hyper.validate()
    pairs = make_pairs(run, corpus, seed, length)
    data = prepare_pairs(pairs, corpus.videos, vocab, hyper)
    params0 = init_params(len(vocab), run.world.feature_dim, hyper, np.random.default_rng([seed, 1]))
    params, report = train(data, params0, hyper, np.random.default_rng([seed, 2]))
    return Trial(params, report, vocab, hyper, pairs)


def random_model(run: RunConfig, vocab: SubwordVocab, seed: int) -> EncoderParams:
    return init_params(len(vocab), run.world.feature_dim, run.hyper, np.random.default_rng([seed, 1])).frozen()


# ---------------------------------------------------------------------------
# benchmarks


@dataclass(frozen=True)
class QueryItem:
    clip_id: str
    video_id: str
    start_s: float
    end_s: float
    cls: int
    text: str


def event_queries(test: Corpus, keywords: Sequence[str], seed: int) -> list[QueryItem]:
    """One clean fluent query per test event; its clip is the event interval."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for vid in sorted(test.videos):
        for k, (cls, s, e) in enumerate(test.videos[vid].event_timeline):
            text = QUERY_TEMPLATES[int(rng.integers(len(QUERY_TEMPLATES)))].format(kw=keywords[cls])
            out.append(QueryItem(f"{vid}#{k:02d}", vid, float(s), float(e), int(cls), text))
    return out


def retrieval_eval(params, vocab, hyper, test: Corpus, queries: Sequence[QueryItem], ks=(1, 5, 10)) -> dict[str, float]:
    clips = embed_clips(test.videos, [(q.video_id, q.start_s, q.end_s) for q in queries], params, hyper.T)
    index = zs.RetrievalIndex.build([q.clip_id for q in queries], clips)
    texts = embed_texts([q.text for q in queries], vocab, params, hyper)
    results = zs.rank_all(texts, [q.clip_id for q in queries], index)
    return zs.retrieval_metrics(results, {q.clip_id: q.clip_id for q in queries}, ks)


def grounding_eval(params, vocab, hyper, test: Corpus, queries: Sequence[QueryItem], ev: EvalConfig) -> dict[str, float]:
    texts = embed_texts([q.text for q in queries], vocab, params, hyper)
    results, gt = [], {}
    for q, latent in zip(queries, texts):
        res, segments = zs.ground_query(test.videos[q.video_id], latent, ev.window_s, ev.stride_s, params, hyper.T, q.clip_id)
        results.append(res)
        gt[q.clip_id] = zs.grounding_hits(segments, (q.start_s, q.end_s), ev.iou_threshold)
    return {f"R@{k}": zs.recall_at_k(results, gt, k) for k in ev.ks}


def labeled_clips(test: Corpus, clip_s: float) -> list[tuple[str, float, float, int]]:
    """Non-overlapping windows of ``clip_s`` seconds lying inside single events."""
    out = []
    for vid in sorted(test.videos):
        for cls, s, e in test.videos[vid].event_timeline:
            t = s
            while t + clip_s <= e + 1e-9:
                out.append((vid, t, t + clip_s, int(cls)))
                t += clip_s
    return out


def synthetic_prompts(keywords: Sequence[str]) -> zs.PromptClassSet:
    classes = tuple(zs.PromptClass(i, kw, PROMPT_TEMPLATE.format(kw=kw)) for i, kw in enumerate(keywords))
    return zs.PromptClassSet("phase", classes)


def zeroshot_eval(params, vocab, hyper, test: Corpus, prompts: zs.PromptClassSet, clip_s: float):
    """Per-class AP and F1 of prompt classification over held-out labeled clips."""
    clips = labeled_clips(test, clip_s)
    latents = embed_clips(test.videos, [c[:3] for c in clips], params, hyper.T)
    scores = zs.classify(latents, prompts, lambda texts: embed_texts(texts, vocab, params, hyper))
    labels = np.array([c[3] for c in clips])
    ids = [c.id for c in prompts.classes]
    onehot = labels[:, None] == np.array(ids)[None, :]
    aps, mean_ap = zs.mean_average_precision(scores, onehot)
    pred = zs.predict_single_label(scores, prompts)
    f1, mean_f1 = zs.f1_per_class(pred, labels, max(ids) + 1)
    per_class = [
        {"class_id": cid, "name": c.name, "AP": float(ap), "F1": float(f1[cid])}
        for cid, c, ap in zip(ids, prompts.classes, aps)
    ]
    return {"mAP": mean_ap, "mean_F1": mean_f1, "accuracy": float(np.mean(pred == labels))}, per_class


def metadata_sentence(cls: int, keywords: Sequence[str], rng: np.random.Generator) -> str:
    words = list(DESCRIPTORS[4 * cls: 4 * cls + 4])
    chosen = [words[i] for i in rng.permutation(4)[:3]]
    return " ".join([keywords[cls], *chosen])


def metadata_corpus(corpus: Corpus, keywords: Sequence[str], seed: int) -> list[str]:
    """One metadata sentence per training event (text only)."""
    rng = np.random.default_rng([seed, 4])
    return [
        metadata_sentence(cls, keywords, rng)
        for vid in sorted(corpus.videos)
        for cls, _, _ in corpus.videos[vid].event_timeline
    ]


def caption_benchmark(test: Corpus, keywords: Sequence[str], seed: int) -> list[cap.CaptionExample]:
    rng = np.random.default_rng([seed, 5])
    return [
        cap.CaptionExample(cap.format_clip_ref(vid, s, e), (metadata_sentence(cls, keywords, rng),))
        for vid in sorted(test.videos)
        for cls, s, e in test.videos[vid].event_timeline
    ]


def caption_eval(params, vocab, hyper, decoder, test: Corpus, examples: Sequence[cap.CaptionExample], max_len: int):
    intervals = [ex.interval for ex in examples]
    captions = cap.generate(embed_clips(test.videos, intervals, params, hyper.T), decoder, vocab, max_len)
    scores = cap.mean_caption_scores(captions, [list(ex.references) for ex in examples])
    return scores, captions


def max_len_for(vocab: SubwordVocab, sentences: Sequence[str], cfg: cap.CaptionerConfig) -> int:
    return min(cfg.max_len, max(len(vocab.encode(s)) for s in sentences) + 1)


def captioning_run(run: RunConfig, seed: int, params, vocab, hyper, train_corpus: Corpus, test: Corpus):
    keywords = run.world.keywords()
    sentences = metadata_corpus(train_corpus, keywords, seed)
    decoder, _ = cap.train_text_only(sentences, params, vocab, hyper, run.captioner, np.random.default_rng([seed, 6]))
    examples = caption_benchmark(test, keywords, seed)
    scores, captions = caption_eval(params, vocab, hyper, decoder, test, examples, max_len_for(vocab, sentences, run.captioner))
    return scores, captions, examples, decoder


# ---------------------------------------------------------------------------
# ablation


@dataclass
class CellResult:
    views: str
    length: object
    frames: int
    seed: int
    metrics: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {"views": self.views, "clip_length": self.length, "frames": self.frames, "seed": self.seed, **self.metrics}


def ablation_cell(run: RunConfig, seed: int, views: str, length, T: int, corpus=None, test=None, vocab=None) -> CellResult:
    corpus = corpus if corpus is not None else generate_corpus(train_world(run, seed))
    test = test if test is not None else generate_corpus(test_world(run, seed))
    vocab = vocab if vocab is not None else run_vocab(run, corpus, seed)
    trial = run_trial(run, seed, views=views, length=length, T=T, corpus=corpus, vocab=vocab)
    queries = event_queries(test, run.world.keywords(), seed)
    metrics = retrieval_eval(trial.params, vocab, trial.hyper, test, queries, run.eval.ks)
    return CellResult(views, length, T, seed, metrics)


def run_ablation(run: RunConfig, seeds: Sequence[int], cells=None) -> list[CellResult]:
    """Train and evaluate each (views, clip length, frames) cell for each seed."""
    cells = run.ablation.cells() if cells is None else cells
    out = []
    for seed in seeds:
        corpus = generate_corpus(train_world(run, seed))
        test = generate_corpus(test_world(run, seed))
        vocab = run_vocab(run, corpus, seed)
        for views, length, T in cells:
            out.append(ablation_cell(run, seed, views, length, T, corpus, test, vocab))
    return out


def mean_metric(results: Sequence[CellResult], metric: str, **match) -> float:
    vals = [r.metrics[metric] for r in results if all(getattr(r, k) == v for k, v in match.items())]
    return float(np.mean(vals)) if vals else float("nan")
