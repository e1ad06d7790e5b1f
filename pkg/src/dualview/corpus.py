"""Synthetic procedure videos with two complementary noisy transcript streams.

Each video is a contiguous sequence of events. A frame's feature vector is the
mean vector of its event class plus noise. Two transcript views describe the
same timeline:

* the **A view** is sparse and keyword-accurate: short fragments that always
  spell the event keyword correctly, with per-word recognition confidences,
  but often truncated and sometimes talking about a neighbouring event;
* the **W view** is dense and fluent: complete templated sentences tiling the
  timeline, whose keyword is misspelled with probability
  ``w_keyword_corruption``.

On disk a corpus is a directory of JSON-lines transcripts and labels plus one
little-endian float32 feature file (with a JSON sidecar) per video.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dualview.errors import ConfigError, IntegrityError, ParseError

DEFAULT_KEYWORDS = (
    "cholecystectomy",
    "jejunostomy",
    "appendectomy",
    "anastomosis",
    "cauterization",
    "trocar",
    "gallbladder",
    "duodenum",
    "omentum",
    "mesentery",
    "hemostasis",
    "laparotomy",
)

W_TEMPLATES = (
    "now we carefully work on the {kw}.",
    "here, you can see the {kw} very clearly.",
    "we continue with the {kw} in this step.",
    "at this point the {kw} is exposed nicely.",
    "so let me show you the {kw} again.",
    "the next thing is the {kw}, which we handle gently.",
)
W_FILLERS = (
    "okay, so we keep going with this part.",
    "you can see that everything looks fine here.",
    "this is a very important point to remember.",
    "let us move a little bit further now.",
)
A_FILLER_WORDS = ("uh", "so", "the", "um", "right", "here", "this", "and", "we", "is", "of", "it")

SOURCES = ("A", "W")


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    n_videos: int = 8
    duration_s: float = 60.0
    fps: float = 8.0
    feature_dim: int = 16
    n_event_classes: int = 6
    keyword_vocab: tuple[str, ...] | None = None
    a_fragmentation: float = 0.3
    w_keyword_corruption: float = 0.5
    a_confidence_noise: float = 0.15
    # free parameters of the synthetic world
    a_misalignment: float = 0.0
    a_rate: float = 0.9
    w_filler: float = 0.15
    event_min_s: float = 4.0
    event_max_s: float = 10.0
    w_min_s: float = 2.0
    w_max_s: float = 4.0
    class_separation: float = 1.0
    frame_noise: float = 1.0
    noise_correlation: float = 0.0
    narration_lag_s: float = 0.0
    split: str = "train"
    video_offset: int = 0

    def keywords(self) -> tuple[str, ...]:
        if self.keyword_vocab is not None:
            return tuple(self.keyword_vocab)
        return DEFAULT_KEYWORDS[: self.n_event_classes]

    def validate(self) -> "WorldConfig":
        bad = []
        for name in ("a_fragmentation", "w_keyword_corruption", "a_misalignment", "a_rate", "w_filler"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad.append(f"{name}={v} not in [0, 1]")
        if not 0.0 <= self.noise_correlation < 1.0:
            bad.append(f"noise_correlation={self.noise_correlation} not in [0, 1)")
        if self.a_confidence_noise < 0:
            bad.append(f"a_confidence_noise={self.a_confidence_noise} < 0")
        if self.n_videos < 0:
            bad.append(f"n_videos={self.n_videos} < 0")
        if self.fps <= 0 or self.duration_s <= 0:
            bad.append("fps and duration_s must be positive")
        elif self.fps * self.duration_s < 16:
            bad.append(f"fps*duration_s={self.fps * self.duration_s:g} < 16")
        if self.feature_dim < 1:
            bad.append(f"feature_dim={self.feature_dim} < 1")
        if self.n_event_classes < 2:
            bad.append(f"n_event_classes={self.n_event_classes} < 2")
        kws = self.keywords()
        if len(kws) != self.n_event_classes:
            bad.append(f"keyword_vocab has {len(kws)} entries for {self.n_event_classes} classes")
        if len(set(kws)) != len(kws):
            bad.append("keyword_vocab entries are not unique")
        if any((not k) or any(ch.isspace() for ch in k) for k in kws):
            bad.append("keywords must be single non-empty words")
        if not 0 < self.event_min_s <= self.event_max_s:
            bad.append("need 0 < event_min_s <= event_max_s")
        if not 0 < self.w_min_s <= self.w_max_s:
            bad.append("need 0 < w_min_s <= w_max_s")
        if self.narration_lag_s < 0:
            bad.append(f"narration_lag_s={self.narration_lag_s} < 0")
        if self.frame_noise < 0 or self.class_separation < 0:
            bad.append("frame_noise and class_separation must be >= 0")
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.keyword_vocab is not None:
            d["keyword_vocab"] = list(self.keyword_vocab)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown world field {k!r}" for k in unknown])
        d = dict(d)
        if d.get("keyword_vocab") is not None:
            d["keyword_vocab"] = tuple(d["keyword_vocab"])
        return cls(**d)


@dataclass
class VideoRecord:
    video_id: str
    duration_s: float
    fps: float
    frame_features: np.ndarray
    event_timeline: list[tuple[int, float, float]]
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return int(self.frame_features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.frame_features.shape[1])

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.fps

    def class_at(self, t: float) -> int:
        for cls, s, e in self.event_timeline:
            if s <= t < e:
                return cls
        return self.event_timeline[-1][0]

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.duration_s == other.duration_s
            and self.fps == other.fps
            and self.split == other.split
            and [tuple(e) for e in self.event_timeline] == [tuple(e) for e in other.event_timeline]
            and self.frame_features.shape == other.frame_features.shape
            and np.array_equal(self.frame_features, other.frame_features)
        )


@dataclass(frozen=True)
class TranscriptSentence:
    video_id: str
    source: str
    start_s: float
    end_s: float
    text: str
    word_confidences: tuple[float, ...] | None = None

    @property
    def words(self) -> list[str]:
        return self.text.split()

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s

    def mean_confidence(self) -> float:
        if not self.word_confidences:
            return 0.0
        return float(np.mean(self.word_confidences))

    def to_json(self) -> dict:
        d = {
            "video_id": self.video_id,
            "source": self.source,
            "start_s": self.start_s,
            "end_s": self.end_s,
            "text": self.text,
        }
        if self.word_confidences is not None:
            d["word_confidences"] = list(self.word_confidences)
        return d


@dataclass
class Corpus:
    videos: dict[str, VideoRecord] = field(default_factory=dict)
    sentences: list[TranscriptSentence] = field(default_factory=list)
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def by_source(self, source: str) -> list[TranscriptSentence]:
        return [s for s in self.sentences if s.source == source]

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.videos == other.videos
            and self.sentences == other.sentences
            and self.labels.keys() == other.labels.keys()
            and all(np.array_equal(self.labels[k], other.labels[k]) for k in self.labels)
        )


# ---------------------------------------------------------------------------
# generation


def class_means(config: WorldConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0x5EED])
    return rng.normal(0.0, config.class_separation, size=(config.n_event_classes, config.feature_dim))


def corrupt_keyword(word: str, rng: np.random.Generator) -> str:
    """Misspell ``word`` with one or two character edits (never a no-op)."""
    letters = "abcdefghijklmnopqrstuvwxyz"
    for _ in range(10):
        chars = list(word)
        for _ in range(int(rng.integers(1, 3))):
            kind = int(rng.integers(3))
            pos = int(rng.integers(1, max(2, len(chars))))
            pos = min(pos, len(chars) - 1) if chars else 0
            if kind == 0 and len(chars) > 3:
                del chars[pos]
            elif kind == 1:
                chars[pos] = letters[int(rng.integers(26))]
            else:
                chars.insert(pos, letters[int(rng.integers(26))])
        out = "".join(chars)
        if out != word:
            return out
    return word + "x"


def _timeline(config: WorldConfig, rng: np.random.Generator) -> list[tuple[int, float, float]]:
    events: list[tuple[int, float, float]] = []
    t, prev = 0.0, -1
    dur = config.duration_s
    while t < dur - 1e-9:
        length = rng.uniform(config.event_min_s, config.event_max_s)
        end = min(t + length, dur)
        if dur - end < config.event_min_s:
            end = dur
        choices = [c for c in range(config.n_event_classes) if c != prev]
        cls = int(choices[int(rng.integers(len(choices)))])
        events.append((cls, round(t, 3), round(end, 3)))
        t, prev = round(end, 3), cls
    return events


def _frame_noise(config: WorldConfig, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    eps = rng.normal(0.0, config.frame_noise, size=(n_frames, config.feature_dim))
    rho = config.noise_correlation
    if rho == 0.0:
        return eps
    out = np.empty_like(eps)
    out[0] = eps[0]
    inno = math.sqrt(1.0 - rho * rho)
    for i in range(1, n_frames):
        out[i] = rho * out[i - 1] + inno * eps[i]
    return out


def _speech_timeline(events, config: WorldConfig, rng: np.random.Generator):
    """Event spans as heard in the narration: each shifted by up to +-narration_lag_s."""
    if config.narration_lag_s == 0.0:
        return events
    out = []
    for cls, s, e in events:
        shift = float(rng.uniform(-config.narration_lag_s, config.narration_lag_s))
        shift = min(max(shift, -s), config.duration_s - e)
        out.append((cls, round(s + shift, 3), round(e + shift, 3)))
    return out


def _clip01(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _w_sentences(vid, events, keywords, config, rng) -> list[TranscriptSentence]:
    out = []
    for cls, s, e in events:
        # tile the event with contiguous sentences of random length
        cuts = [s]
        while True:
            nxt = cuts[-1] + rng.uniform(config.w_min_s, config.w_max_s)
            if e - nxt < config.w_min_s:
                break
            cuts.append(nxt)
        cuts.append(e)
        for a, b in zip(cuts[:-1], cuts[1:]):
            if rng.random() < config.w_filler:
                text = W_FILLERS[int(rng.integers(len(W_FILLERS)))]
            else:
                kw = keywords[cls]
                if rng.random() < config.w_keyword_corruption:
                    kw = corrupt_keyword(kw, rng)
                text = W_TEMPLATES[int(rng.integers(len(W_TEMPLATES)))].format(kw=kw)
            out.append(TranscriptSentence(vid, "W", round(a, 3), round(b, 3), text))
    return out


def _a_sentences(vid, events, keywords, config, rng) -> list[TranscriptSentence]:
    out = []
    noise = config.a_confidence_noise
    for idx, (cls, s, e) in enumerate(events):
        if rng.random() >= config.a_rate:
            continue
        talk_cls = cls
        if rng.random() < config.a_misalignment and len(events) > 1:
            nbrs = [j for j in (idx - 1, idx + 1) if 0 <= j < len(events)]
            talk_cls = events[nbrs[int(rng.integers(len(nbrs)))]][0]
        kw = keywords[talk_cls]
        pre = [A_FILLER_WORDS[int(i)] for i in rng.integers(len(A_FILLER_WORDS), size=int(rng.integers(1, 4)))]
        post = [A_FILLER_WORDS[int(i)] for i in rng.integers(len(A_FILLER_WORDS), size=int(rng.integers(1, 4)))]
        words = pre + [kw] + post
        kw_pos = len(pre)
        if rng.random() < config.a_fragmentation:
            # cut mid-clause: drop a random tail, occasionally eating the keyword
            keep = int(rng.integers(1, len(words)))
            words = words[:keep]
        elif rng.random() < 0.5:
            words[kw_pos] = words[kw_pos] + ","
        else:
            words[-1] = words[-1] + "."
        quality = rng.normal(0.0, noise)
        confs = []
        for i, w in enumerate(words):
            centre = 0.85 if i == kw_pos else 0.5
            confs.append(round(_clip01(rng.normal(centre + quality, noise)), 4))
        span = e - s
        length = rng.uniform(min(1.0, span), min(2.5, span))
        start = rng.uniform(s, e - length)
        out.append(
            TranscriptSentence(vid, "A", round(start, 3), round(start + length, 3), " ".join(words), tuple(confs))
        )
    return out


def generate_world(config: WorldConfig):
    """Build a synthetic corpus.

    Returns ``(videos, sentences, labels)``: a list of VideoRecord, a list of
    TranscriptSentence sorted by (video, source, start), and a dict mapping each
    video id to its per-frame class ids. The result is a pure function of
    ``config``; video ``i`` draws from its own seed stream ``(seed, i)``.
    """
    config.validate()
    keywords = config.keywords()
    means = class_means(config)
    n_frames = int(round(config.fps * config.duration_s))
    videos, sentences, labels = [], [], {}
    for k in range(config.n_videos):
        index = config.video_offset + k
        rng = np.random.default_rng([config.seed, index])
        vid = f"{config.split}_v{index:03d}"
        events = _timeline(config, rng)
        times = np.arange(n_frames) / config.fps
        frame_cls = np.empty(n_frames, dtype=np.int64)
        for cls, s, e in events:
            frame_cls[(times >= s) & (times < e)] = cls
        feats = means[frame_cls] + _frame_noise(config, n_frames, rng)
        # stored as float32 on disk; keep the in-memory copy on the same grid
        feats = feats.astype("<f4").astype(np.float64)
        videos.append(VideoRecord(vid, float(config.duration_s), float(config.fps), feats, events, config.split))
        labels[vid] = frame_cls
        speech = _speech_timeline(events, config, rng)
        sentences.extend(_a_sentences(vid, speech, keywords, config, rng))
        sentences.extend(_w_sentences(vid, speech, keywords, config, rng))
    sentences.sort(key=lambda s: (s.video_id, s.source, s.start_s, s.end_s))
    return videos, sentences, labels


def generate_corpus(config: WorldConfig) -> Corpus:
    videos, sentences, labels = generate_world(config)
    return Corpus({v.video_id: v for v in videos}, sentences, labels)


# ---------------------------------------------------------------------------
# on-disk formats

_SENTENCE_FIELDS = {"video_id", "source", "start_s", "end_s", "text"}


def _dump_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")) + "\n"


def write_corpus(path, corpus: Corpus, split: str = "train", force: bool = False) -> list[Path]:
    """Write ``corpus`` under directory ``path`` and return the files written."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    targets = [root / f"{split}.transcripts.jsonl", root / f"{split}.labels.jsonl"]
    for vid in corpus.videos:
        targets += [root / f"{vid}.f32", root / f"{vid}.meta.json"]
    if not force:
        existing = [str(p) for p in targets if p.exists()]
        if existing:
            raise FileExistsError(f"refusing to overwrite without force: {', '.join(existing)}")

    with open(targets[0], "w", encoding="utf-8", newline="\n") as fh:
        for s in corpus.sentences:
            fh.write(_dump_line(s.to_json()))
    with open(targets[1], "w", encoding="utf-8", newline="\n") as fh:
        for vid in sorted(corpus.labels):
            for i, c in enumerate(corpus.labels[vid].tolist()):
                fh.write(_dump_line({"video_id": vid, "frame_index": i, "class_id": int(c)}))
    for vid, video in corpus.videos.items():
        write_features(root, video)
    return targets


def write_features(root, video: VideoRecord):
    root = Path(root)
    (root / f"{video.video_id}.f32").write_bytes(np.ascontiguousarray(video.frame_features, dtype="<f4").tobytes())
    meta = {
        "video_id": video.video_id,
        "n_frames": video.n_frames,
        "feature_dim": video.feature_dim,
        "fps": video.fps,
        "duration_s": video.duration_s,
        "split": video.split,
        "event_timeline": [list(e) for e in video.event_timeline],
    }
    (root / f"{video.video_id}.meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def read_features(root, video_id: str) -> VideoRecord:
    root = Path(root)
    meta_path = root / f"{video_id}.meta.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(meta_path, exc.lineno, exc.msg) from None
    missing = [k for k in ("video_id", "n_frames", "feature_dim", "fps") if k not in meta]
    if missing:
        raise ParseError(meta_path, 1, f"sidecar lacks fields {missing}")
    raw = (root / f"{video_id}.f32").read_bytes()
    n, dim = int(meta["n_frames"]), int(meta["feature_dim"])
    expected = n * dim * 4
    if len(raw) != expected:
        raise IntegrityError(
            f"{video_id}.f32: expected {expected} bytes ({n} frames x {dim} dims x 4), found {len(raw)}"
        )
    feats = np.frombuffer(raw, dtype="<f4").reshape(n, dim).astype(np.float64)
    fps = float(meta["fps"])
    duration = float(meta.get("duration_s", n / fps))
    timeline = [(int(c), float(s), float(e)) for c, s, e in meta.get("event_timeline", [])]
    return VideoRecord(meta["video_id"], duration, fps, feats, timeline, meta.get("split", "train"))


def _iter_jsonl(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, exc.msg) from None
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "expected a JSON object")
            yield line_no, obj


def parse_sentence(obj: dict, path="<memory>", line_no: int = 0) -> TranscriptSentence:
    keys = set(obj)
    if not _SENTENCE_FIELDS <= keys or keys - _SENTENCE_FIELDS - {"word_confidences"}:
        raise ParseError(path, line_no, f"unexpected field set {sorted(keys)}")
    if obj["source"] not in SOURCES:
        raise ParseError(path, line_no, f"source must be A or W, got {obj['source']!r}")
    try:
        start, end = float(obj["start_s"]), float(obj["end_s"])
    except (TypeError, ValueError):
        raise ParseError(path, line_no, "timestamps must be numbers") from None
    if not start < end:
        raise ParseError(path, line_no, f"start_s {start} is not before end_s {end}")
    confs = obj.get("word_confidences")
    if obj["source"] == "A":
        if confs is None or len(confs) != len(str(obj["text"]).split()):
            raise ParseError(path, line_no, "A sentence needs one confidence per word")
        if any(not 0.0 <= float(c) <= 1.0 for c in confs):
            raise ParseError(path, line_no, "confidences must lie in [0, 1]")
        confs = tuple(float(c) for c in confs)
    elif confs is not None:
        raise ParseError(path, line_no, "W sentences carry no confidences")
    return TranscriptSentence(str(obj["video_id"]), obj["source"], start, end, str(obj["text"]), confs)


def read_transcripts(path) -> list[TranscriptSentence]:
    path = Path(path)
    return [parse_sentence(obj, path, n) for n, obj in _iter_jsonl(path)]


def read_corpus(path, split: str = "train") -> Corpus:
    root = Path(path)
    sentences = read_transcripts(root / f"{split}.transcripts.jsonl")
    frames: dict[str, dict[int, int]] = {}
    labels_path = root / f"{split}.labels.jsonl"
    for line_no, obj in _iter_jsonl(labels_path):
        if set(obj) != {"video_id", "frame_index", "class_id"}:
            raise ParseError(labels_path, line_no, f"unexpected field set {sorted(obj)}")
        frames.setdefault(str(obj["video_id"]), {})[int(obj["frame_index"])] = int(obj["class_id"])

    video_ids = set(frames)
    for meta in sorted(root.glob("*.meta.json")):
        vid = meta.name[: -len(".meta.json")]
        try:
            info = json.loads(meta.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(meta, exc.lineno, exc.msg) from None
        if info.get("split", "train") == split:
            video_ids.add(vid)
    videos = {}
    for vid in sorted(video_ids):
        videos[vid] = read_features(root, vid)
    labels = {}
    for vid, table in frames.items():
        n = videos[vid].n_frames if vid in videos else len(table)
        if sorted(table) != list(range(n)):
            raise IntegrityError(f"labels for {vid} do not cover frames 0..{n - 1}")
        labels[vid] = np.array([table[i] for i in range(n)], dtype=np.int64)
    unknown = sorted({s.video_id for s in sentences} - set(videos))
    if unknown:
        raise IntegrityError(f"transcripts reference videos without features: {unknown}")
    for s in sentences:
        if s.end_s > videos[s.video_id].duration_s + 1e-9:
            raise IntegrityError(f"sentence {s.text!r} ends after video {s.video_id}")
    return Corpus(videos, sentences, labels)
