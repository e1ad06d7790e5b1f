"""Clip-text pair construction from the two transcript views.

Pipeline, per video: split both streams at stop symbols, filter the A view
(confidence, keyword, length) and the W view (length, content word), then for
every kept A sentence collect the W sentences that overlap it in time, merge
their span, draw a centre timestamp uniformly inside that span and grow a clip
of random length around it.
"""

from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dualview.corpus import Corpus, TranscriptSentence, parse_sentence
from dualview.errors import ConfigError, ContractError, ParseError

DEFAULT_STOP_SYMBOLS = frozenset({".", ",", ";", "?", "!"})

STOP_WORDS = frozenset(
    """
    a about again all also am an and any are as at be been but by can could did do does
    done for from further get go going got had has have he her here him his how i if in
    into is it its just keep let like look me more move my no not now of off ok okay on
    one or our out over so some that the their them then there these they this those to
    too uh um up us very was we well were what when where which while who will with would
    yeah you your right bit little fine
    """.split()
)

_WORD_RE = re.compile(r"[^\W_]+", re.UNICODE)


def normalized_words(text: str) -> list[str]:
    """Lower-cased alphanumeric words, punctuation stripped."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class FilterConfig:
    stop_symbols: frozenset = DEFAULT_STOP_SYMBOLS
    confidence_threshold: float = 0.4
    keyword_list: frozenset = frozenset()
    min_words: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stop_symbols", frozenset(self.stop_symbols))
        object.__setattr__(self, "keyword_list", frozenset(k.lower() for k in self.keyword_list))
        bad = []
        if not 0.0 <= self.confidence_threshold <= 1.0:
            bad.append(f"confidence_threshold={self.confidence_threshold} not in [0, 1]")
        if self.min_words < 1:
            bad.append(f"min_words={self.min_words} < 1")
        if any(len(s) != 1 for s in self.stop_symbols):
            bad.append("stop symbols must be single characters")
        if bad:
            raise ConfigError(bad)

    def validate(self) -> "FilterConfig":
        return self

    def to_dict(self) -> dict:
        return {
            "stop_symbols": sorted(self.stop_symbols),
            "confidence_threshold": self.confidence_threshold,
            "keyword_list": sorted(self.keyword_list),
            "min_words": self.min_words,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        unknown = sorted(set(d) - {"stop_symbols", "confidence_threshold", "keyword_list", "min_words"})
        if unknown:
            raise ConfigError([f"unknown filter field {k!r}" for k in unknown])
        d = dict(d)
        for key in ("stop_symbols", "keyword_list"):
            if key in d:
                d[key] = frozenset(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ClipTextPair:
    video_id: str
    clip_start_s: float
    clip_end_s: float
    center_s: float
    a_sentence: TranscriptSentence
    w_sentences: tuple[TranscriptSentence, ...]

    @property
    def clip_length(self) -> float:
        return self.clip_end_s - self.clip_start_s

    def merged_boundary(self) -> tuple[float, float]:
        return merged_boundary(self.w_sentences)

    def check(self, max_clip_s: float, video_duration: float) -> list[str]:
        """Return the list of violated invariants (empty when valid)."""
        problems = []
        if not 0 < self.clip_length <= max_clip_s + 1e-9:
            problems.append(f"clip length {self.clip_length} outside (0, {max_clip_s}]")
        if not self.w_sentences:
            problems.append("no W sentences")
        else:
            lo, hi = self.merged_boundary()
            if not lo <= self.center_s <= hi:
                problems.append(f"centre {self.center_s} outside [{lo}, {hi}]")
        if self.clip_start_s < 0 or self.clip_end_s > video_duration + 1e-9:
            problems.append("clip leaves the video")
        for w in self.w_sentences:
            if overlap_length(self.a_sentence, w) <= 0:
                problems.append(f"W sentence {w.text!r} does not overlap the A sentence")
        return problems

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "clip_start_s": self.clip_start_s,
            "clip_end_s": self.clip_end_s,
            "center_s": self.center_s,
            "a_sentence": self.a_sentence.to_json(),
            "w_sentences": [w.to_json() for w in self.w_sentences],
        }


def overlap_length(a: TranscriptSentence, b: TranscriptSentence) -> float:
    return min(a.end_s, b.end_s) - max(a.start_s, b.start_s)


def merged_boundary(ws: Sequence[TranscriptSentence]) -> tuple[float, float]:
    return min(w.start_s for w in ws), max(w.end_s for w in ws)


# ---------------------------------------------------------------------------
# segmentation and filtering


def _split_one(s: TranscriptSentence, symbols: frozenset) -> list[TranscriptSentence]:
    words = s.text.split()
    if not words:
        return [s]
    groups: list[list[int]] = [[]]
    for i, w in enumerate(words):
        groups[-1].append(i)
        if w[-1] in symbols and i < len(words) - 1:
            groups.append([])
    if len(groups) == 1:
        return [s]
    total = len(words)
    span = s.end_s - s.start_s
    out = []
    done = 0
    for g in groups:
        a = s.start_s + span * done / total
        done += len(g)
        b = s.end_s if done == total else s.start_s + span * done / total
        confs = None
        if s.word_confidences is not None:
            confs = tuple(s.word_confidences[i] for i in g)
        out.append(TranscriptSentence(s.video_id, s.source, a, b, " ".join(words[i] for i in g), confs))
    return out


def segment_sentences(stream: Iterable[TranscriptSentence], cfg: FilterConfig) -> list[TranscriptSentence]:
    """Split sentences after every word that ends in a stop symbol.

    Sub-sentence timestamps are interpolated linearly by word count and A-view
    confidences travel with their words.
    """
    out = []
    for s in stream:
        out.extend(_split_one(s, cfg.stop_symbols))
    return out


def contains_keyword(text: str, keywords: Iterable[str]) -> bool:
    padded = " " + " ".join(normalized_words(text)) + " "
    return any(f" {' '.join(normalized_words(k))} " in padded for k in keywords if normalized_words(k))


def passes_a(s: TranscriptSentence, cfg: FilterConfig) -> bool:
    return (
        s.mean_confidence() >= cfg.confidence_threshold
        and contains_keyword(s.text, cfg.keyword_list)
        and len(normalized_words(s.text)) >= cfg.min_words
    )


def passes_w(s: TranscriptSentence, cfg: FilterConfig) -> bool:
    words = normalized_words(s.text)
    return len(words) >= cfg.min_words and any(w not in STOP_WORDS for w in words)


def filter_a(sentences: Iterable[TranscriptSentence], cfg: FilterConfig) -> list[TranscriptSentence]:
    sentences = list(sentences)
    if any(s.source != "A" for s in sentences):
        raise ContractError("filter_a received W-source sentences")
    return [s for s in sentences if passes_a(s, cfg)]


def filter_w(sentences: Iterable[TranscriptSentence], cfg: FilterConfig) -> list[TranscriptSentence]:
    sentences = list(sentences)
    if any(s.source != "W" for s in sentences):
        raise ContractError("filter_w received A-source sentences")
    return [s for s in sentences if passes_w(s, cfg)]


# ---------------------------------------------------------------------------
# overlap and clip sampling


def find_overlaps(a: TranscriptSentence, w_pool: Sequence[TranscriptSentence]) -> list[TranscriptSentence]:
    """W sentences whose time intersection with ``a`` has positive length."""
    if any(w.video_id != a.video_id for w in w_pool):
        raise ContractError("find_overlaps: W pool mixes videos")
    starts = [w.start_s for w in w_pool]
    stop = bisect.bisect_left(starts, a.end_s)
    return [w for w in w_pool[:stop] if overlap_length(a, w) > 0]


def sample_clip(
    a: TranscriptSentence,
    w_overlaps: Sequence[TranscriptSentence],
    rng: np.random.Generator,
    max_clip_s: float = 10.0,
    *,
    video_duration: float,
    min_clip_s: float = 2.0,
    fixed_length: float | None = None,
) -> ClipTextPair:
    if not w_overlaps:
        raise ContractError("sample_clip needs at least one overlapping W sentence")
    if not 0 < min_clip_s <= max_clip_s:
        raise ConfigError(f"need 0 < min_clip_s ({min_clip_s}) <= max_clip_s ({max_clip_s})")
    lo, hi = merged_boundary(w_overlaps)
    center = float(rng.uniform(lo, hi))
    if fixed_length is not None:
        length = float(fixed_length)
    else:
        # uniform on (min, max]
        length = max_clip_s - float(rng.uniform(0.0, max_clip_s - min_clip_s))
    start = max(0.0, center - length / 2)
    end = min(video_duration, center + length / 2)
    return ClipTextPair(a.video_id, start, end, center, a, tuple(w_overlaps))


def build_pairs(
    corpus: Corpus,
    cfg: FilterConfig,
    rng,
    pairs_per_a: int = 1,
    *,
    max_clip_s: float = 10.0,
    min_clip_s: float = 2.0,
    fixed_length: float | None = None,
    stats: dict | None = None,
) -> list[ClipTextPair]:
    """Run segment -> filter -> overlap -> clip sampling over every video.

    ``rng`` is an int seed or a Generator; each video draws from its own
    stream derived from it, so the output is ordered by (video, A start) and
    independent of processing order. Pass a dict as ``stats`` to collect
    kept/dropped counts.
    """
    base = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    counts = {
        "a_sentences": 0,
        "a_segments": 0,
        "a_dropped_confidence": 0,
        "a_dropped_keyword": 0,
        "a_dropped_length": 0,
        "a_kept": 0,
        "a_without_overlap": 0,
        "w_sentences": 0,
        "w_segments": 0,
        "w_kept": 0,
        "pairs": 0,
    }
    by_video: dict[str, dict[str, list[TranscriptSentence]]] = {}
    for s in corpus.sentences:
        by_video.setdefault(s.video_id, {"A": [], "W": []})[s.source].append(s)

    pairs: list[ClipTextPair] = []
    for index, vid in enumerate(sorted(corpus.videos)):
        streams = by_video.get(vid, {"A": [], "W": []})
        video_rng = np.random.default_rng([base, index])
        a_raw = sorted(streams["A"], key=lambda s: (s.start_s, s.end_s))
        w_raw = sorted(streams["W"], key=lambda s: (s.start_s, s.end_s))
        a_seg = segment_sentences(a_raw, cfg)
        w_seg = segment_sentences(w_raw, cfg)
        counts["a_sentences"] += len(a_raw)
        counts["w_sentences"] += len(w_raw)
        counts["a_segments"] += len(a_seg)
        counts["w_segments"] += len(w_seg)
        for s in a_seg:
            if s.mean_confidence() < cfg.confidence_threshold:
                counts["a_dropped_confidence"] += 1
            elif not contains_keyword(s.text, cfg.keyword_list):
                counts["a_dropped_keyword"] += 1
            elif len(normalized_words(s.text)) < cfg.min_words:
                counts["a_dropped_length"] += 1
        a_kept = filter_a(a_seg, cfg)
        w_kept = sorted(filter_w(w_seg, cfg), key=lambda s: (s.start_s, s.end_s))
        counts["a_kept"] += len(a_kept)
        counts["w_kept"] += len(w_kept)
        duration = corpus.videos[vid].duration_s
        for a in sorted(a_kept, key=lambda s: (s.start_s, s.end_s)):
            ws = find_overlaps(a, w_kept)
            if not ws:
                counts["a_without_overlap"] += 1
                continue
            for _ in range(pairs_per_a):
                pairs.append(
                    sample_clip(
                        a, ws, video_rng, max_clip_s,
                        video_duration=duration, min_clip_s=min_clip_s, fixed_length=fixed_length,
                    )
                )
    counts["pairs"] = len(pairs)
    if stats is not None:
        stats.update(counts)
    return pairs


# ---------------------------------------------------------------------------
# pairs.jsonl


def write_pairs(path, pairs: Sequence[ClipTextPair]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), ensure_ascii=False) + "\n")


def read_pairs(path) -> list[ClipTextPair]:
    path = Path(path)
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                a = parse_sentence(obj["a_sentence"], path, line_no)
                ws = tuple(parse_sentence(w, path, line_no) for w in obj["w_sentences"])
                out.append(
                    ClipTextPair(
                        str(obj["video_id"]), float(obj["clip_start_s"]), float(obj["clip_end_s"]),
                        float(obj["center_s"]), a, ws,
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(path, line_no, f"bad pair record: {exc}") from None
    return out
