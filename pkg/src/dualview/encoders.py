"""Tokenizer and the two encoder branches mapping clips and sentences into R^d.

The vision branch applies a small MLP trunk plus a linear projection to every
sampled frame and averages the per-frame outputs. The text branch embeds each
token, runs the trunk per position, averages over all N positions and
projects to d.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dualview import gradcore as gc
from dualview.errors import ConfigError, ContractError, DimensionError, EmptyInputError, IntegrityError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("[PAD]", "[UNK]", "[BOS]", "[EOS]")
N_BYTES = 256
BYTE_BASE = len(SPECIALS)
WORD_BASE = BYTE_BASE + N_BYTES
SPACE = BYTE_BASE + 0x20  # word-boundary marker around multi-token words

_PRETOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]|_", re.UNICODE)


def pretokenize(text: str) -> list[str]:
    """Lower-case and split into words and single punctuation marks."""
    return _PRETOKEN_RE.findall(text.lower())


def normalize_text(text: str) -> str:
    return " ".join(pretokenize(text))


class SubwordVocab:
    """Whole-word vocabulary with greedy longest-match and byte fallback.

    Ids 0-3 are reserved, ids 4-259 are the 256 byte tokens, and whole words
    follow in frequency order. Any string is therefore representable without
    the unknown id.
    """

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.word_to_id = {w: WORD_BASE + i for i, w in enumerate(self.words)}
        if len(self.word_to_id) != len(self.words):
            raise ContractError("duplicate vocabulary words")
        self._max_len = max((len(w) for w in self.words), default=0)

    def __len__(self):
        return WORD_BASE + len(self.words)

    def __eq__(self, other):
        return isinstance(other, SubwordVocab) and self.words == other.words

    def token_string(self, tid: int) -> str:
        if tid < BYTE_BASE:
            return SPECIALS[tid]
        if tid < WORD_BASE:
            b = tid - BYTE_BASE
            return chr(b) if 32 < b < 127 else f"<0x{b:02X}>"
        return self.words[tid - WORD_BASE]

    def is_byte(self, tid: int) -> bool:
        return BYTE_BASE <= tid < WORD_BASE

    def encode_word(self, word: str) -> list[int]:
        tid = self.word_to_id.get(word)
        if tid is not None:
            return [tid]
        out: list[int] = []
        pos = 0
        while pos < len(word):
            for size in range(min(self._max_len, len(word) - pos), 0, -1):
                tid = self.word_to_id.get(word[pos:pos + size])
                if tid is not None:
                    out.append(tid)
                    pos += size
                    break
            else:
                out.extend(BYTE_BASE + b for b in word[pos].encode("utf-8"))
                pos += 1
        return out

    def encode(self, text: str) -> list[int]:
        """Token ids; a word needing several tokens is wrapped in SPACE markers."""
        ids: list[int] = []
        for w in pretokenize(text):
            toks = self.encode_word(w)
            if len(toks) == 1 and not self.is_byte(toks[0]):
                ids.extend(toks)
            else:
                ids.extend([SPACE, *toks, SPACE])
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Inverse of :meth:`encode` up to :func:`normalize_text`.

        Single-token words are joined by spaces. Tokens between a pair of
        SPACE markers are concatenated into one word. Special tokens are
        skipped.
        """
        pieces: list[str] = []
        pending = bytearray()
        inside = False

        def flush():
            if pending:
                pieces.append(bytes(pending).decode("utf-8", errors="replace"))
                pending.clear()

        for tid in ids:
            tid = int(tid)
            if tid < BYTE_BASE:
                continue
            if tid == SPACE:
                flush()
                inside = not inside
            elif self.is_byte(tid):
                pending.append(tid - BYTE_BASE)
            elif inside:
                pending.extend(self.words[tid - WORD_BASE].encode("utf-8"))
            else:
                flush()
                pieces.append(self.words[tid - WORD_BASE])
        flush()
        return " ".join(pieces)

    def to_json(self) -> dict:
        return {"specials": list(SPECIALS), "n_bytes": N_BYTES, "words": self.words}

    @classmethod
    def from_json(cls, d: dict) -> "SubwordVocab":
        if tuple(d.get("specials", ())) != SPECIALS or d.get("n_bytes") != N_BYTES:
            raise IntegrityError("vocabulary file has an incompatible reserved-id layout")
        return cls(d["words"])

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(texts: Iterable[str], target_size: int = 512) -> SubwordVocab:
    """Frequency-ranked whole words (ties by first appearance) up to ``target_size``."""
    if target_size < WORD_BASE:
        raise ConfigError(f"target_size={target_size} < {WORD_BASE} (reserved + byte tokens)")
    counts: Counter = Counter()
    first_seen: dict[str, int] = {}
    any_text = False
    for text in texts:
        any_text = True
        for w in pretokenize(text):
            counts[w] += 1
            first_seen.setdefault(w, len(first_seen))
    if not any_text or not counts:
        raise EmptyInputError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
    return SubwordVocab(ranked[: target_size - WORD_BASE])


def tokenize(text: str, vocab: SubwordVocab, N: int = 77) -> np.ndarray:
    """Token ids padded with PAD or truncated to exactly ``N``."""
    ids = vocab.encode(text)[:N]
    out = np.full(N, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def tokenize_batch(texts: Sequence[str], vocab: SubwordVocab, N: int = 77) -> np.ndarray:
    if not texts:
        return np.zeros((0, N), dtype=np.int64)
    return np.stack([tokenize(t, vocab, N) for t in texts])


# ---------------------------------------------------------------------------
# hyper-parameters and weights


@dataclass(frozen=True)
class HyperConfig:
    N: int = 77
    T: int = 4
    d: int = 64
    tau: float = 0.3
    eps: float = 0.5
    M: int = 2
    B: int = 16
    lr: float = 1e-4
    steps: int = 300
    embed_dim: int = 32
    hidden_dim: int = 64
    views: str = "both"
    symmetric: bool = False
    masked_mean: bool = False

    def validate(self) -> "HyperConfig":
        bad = []
        for name in ("N", "T", "d", "M", "B", "embed_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                bad.append(f"{name}={getattr(self, name)} must be positive")
        if self.tau <= 0:
            bad.append(f"tau={self.tau} must be positive")
        if not 0.0 <= self.eps <= 1.0:
            bad.append(f"eps={self.eps} not in [0, 1]")
        if self.lr < 0:
            bad.append(f"lr={self.lr} < 0")
        if self.steps < 0:
            bad.append(f"steps={self.steps} < 0")
        if self.views not in ("a", "w", "both"):
            bad.append(f"views={self.views!r} not in a|w|both")
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown hyper field {k!r}" for k in unknown])
        return cls(**d)


PARAM_NAMES = (
    "tok_emb",
    "text_w1", "text_b1", "text_w2", "text_b2", "text_proj_w", "text_proj_b",
    "frame_w1", "frame_b1", "frame_w2", "frame_b2", "frame_proj_w", "frame_proj_b",
)


@dataclass
class EncoderParams:
    tok_emb: gc.Tensor
    text_w1: gc.Tensor
    text_b1: gc.Tensor
    text_w2: gc.Tensor
    text_b2: gc.Tensor
    text_proj_w: gc.Tensor
    text_proj_b: gc.Tensor
    frame_w1: gc.Tensor
    frame_b1: gc.Tensor
    frame_w2: gc.Tensor
    frame_b2: gc.Tensor
    frame_proj_w: gc.Tensor
    frame_proj_b: gc.Tensor

    def tensors(self) -> list[gc.Tensor]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def named(self) -> list[tuple[str, gc.Tensor]]:
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    @property
    def d(self) -> int:
        return self.text_proj_w.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.frame_w1.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.tok_emb.shape[0]

    def copy(self) -> "EncoderParams":
        return EncoderParams(*[gc.Tensor(t.data, requires_grad=t.requires_grad) for t in self.tensors()])

    def frozen(self) -> "EncoderParams":
        return EncoderParams(*[gc.Tensor(t.data, requires_grad=False) for t in self.tensors()])

    def trainable(self) -> "EncoderParams":
        return EncoderParams(*[gc.Tensor(t.data, requires_grad=True) for t in self.tensors()])

    def check(self):
        if self.text_proj_w.shape[1] != self.frame_proj_w.shape[1]:
            raise DimensionError("text and frame branches project to different d")
        for name, t in self.named():
            if not np.all(np.isfinite(t.data)):
                raise IntegrityError(f"parameter {name} has non-finite entries")


def _dense(rng, fan_in, fan_out, gain=2.0):
    return rng.normal(0.0, math.sqrt(gain / fan_in), size=(fan_in, fan_out))


def init_params(vocab_size: int, feature_dim: int, hyper: HyperConfig, rng) -> EncoderParams:
    rng = np.random.default_rng(rng)
    e, h, d = hyper.embed_dim, hyper.hidden_dim, hyper.d
    arrays = [
        rng.normal(0.0, 1.0, size=(vocab_size, e)),
        _dense(rng, e, h), np.zeros(h), _dense(rng, h, h), np.zeros(h),
        _dense(rng, h, d, 1.0), np.zeros(d),
        _dense(rng, feature_dim, h), np.zeros(h), _dense(rng, h, h), np.zeros(h),
        _dense(rng, h, d, 1.0), np.zeros(d),
    ]
    return EncoderParams(*[gc.Tensor(a, requires_grad=True) for a in arrays])


def save_params(directory, params: EncoderParams, stem: str = "encoder"):
    """Write ``<stem>.f32`` (little-endian float32, concatenated) and ``<stem>.manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blobs, manifest, offset = [], [], 0
    for name, t in params.named():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        blobs.append(arr.tobytes())
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += arr.size
    (directory / f"{stem}.f32").write_bytes(b"".join(blobs))
    (directory / f"{stem}.manifest.json").write_text(
        json.dumps({"tensors": manifest, "total": offset}, indent=1) + "\n", encoding="utf-8"
    )


def load_params(directory, stem: str = "encoder") -> EncoderParams:
    directory = Path(directory)
    manifest = json.loads((directory / f"{stem}.manifest.json").read_text(encoding="utf-8"))
    raw = (directory / f"{stem}.f32").read_bytes()
    if len(raw) != 4 * manifest["total"]:
        raise IntegrityError(f"{stem}.f32: expected {4 * manifest['total']} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    by_name = {}
    for entry in manifest["tensors"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        chunk = flat[entry["offset"]: entry["offset"] + size]
        by_name[entry["name"]] = gc.Tensor(chunk.reshape(entry["shape"]), requires_grad=True)
    missing = [n for n in PARAM_NAMES if n not in by_name]
    if missing:
        raise IntegrityError(f"checkpoint lacks tensors {missing}")
    params = EncoderParams(**{n: by_name[n] for n in PARAM_NAMES})
    params.check()
    return params


# ---------------------------------------------------------------------------
# encoding


def sample_frames(clip_start_s: float, clip_end_s: float, fps: float, T: int, n_frames: int | None = None) -> np.ndarray:
    """``T`` evenly spaced frame indices covering the clip, endpoints included.

    The clip covers the frames whose timestamps fall in ``[start, end)``.
    """
    first = math.ceil(clip_start_s * fps - 1e-9)
    last = math.ceil(clip_end_s * fps - 1e-9) - 1
    if n_frames is not None:
        last = min(last, n_frames - 1)
    if last < first or T < 1:
        raise ContractError(f"clip [{clip_start_s}, {clip_end_s}) contains no frame at {fps} fps")
    return np.rint(np.linspace(first, last, T)).astype(np.int64)


def _trunk(x, w1, b1, w2, b2):
    h = gc.relu(gc.add(gc.matmul(x, w1), b1))
    return gc.relu(gc.add(gc.matmul(h, w2), b2))


def encode_frames(frames, params: EncoderParams) -> gc.Tensor:
    """Per-frame latents F(z) for a ``[n, feature_dim]`` stack."""
    x = frames if isinstance(frames, gc.Tensor) else gc.constant(frames)
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise DimensionError(f"frames have shape {x.shape}, encoder expects feature_dim {params.feature_dim}")
    h = _trunk(x, params.frame_w1, params.frame_b1, params.frame_w2, params.frame_b2)
    return gc.add(gc.matmul(h, params.frame_proj_w), params.frame_proj_b)


def encode_clip(frames, params: EncoderParams, T: int) -> gc.Tensor:
    """Clip latents: mean of per-frame latents over each block of ``T`` rows.

    ``frames`` stacks the T sampled frames of every clip: ``[B*T, feature_dim]``.
    """
    if T < 1:
        raise ContractError("T must be >= 1")
    return gc.group_mean(encode_frames(frames, params), T)


def encode_text(token_ids, params: EncoderParams, masked: bool = False) -> gc.Tensor:
    """Sentence latents from a ``[B, N]`` id matrix.

    With ``masked`` the average skips PAD positions (a sentence of only PAD
    keeps its PAD positions so the mean stays defined).
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2:
        raise DimensionError(f"token ids must be [B, N], got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= params.vocab_size):
        raise DimensionError(f"token id out of range for vocabulary of {params.vocab_size}")
    B, N = ids.shape
    emb = gc.gather_rows(params.tok_emb, ids.reshape(-1))
    h = _trunk(emb, params.text_w1, params.text_b1, params.text_w2, params.text_b2)
    weights = None
    if masked:
        mask = (ids != PAD).astype(np.float64)
        empty = mask.sum(axis=1) == 0
        mask[empty] = 1.0
        weights = mask.reshape(-1)
    pooled = gc.group_mean(h, N, weights)
    return gc.add(gc.matmul(pooled, params.text_proj_w), params.text_proj_b)


def clip_frames(video, start_s: float, end_s: float, T: int) -> np.ndarray:
    idx = sample_frames(start_s, end_s, video.fps, T, video.n_frames)
    return video.frame_features[idx]


def embed_texts(texts: Sequence[str], vocab: SubwordVocab, params: EncoderParams, hyper: HyperConfig) -> np.ndarray:
    """Frozen-encoder text latents as a plain array."""
    ids = tokenize_batch(texts, vocab, hyper.N)
    return encode_text(ids, params.frozen(), hyper.masked_mean).data


def embed_clips(videos, intervals, params: EncoderParams, T: int) -> np.ndarray:
    """Frozen-encoder clip latents for ``(video_id, start, end)`` triples."""
    if not intervals:
        return np.zeros((0, params.d))
    frames = np.concatenate([clip_frames(videos[v], s, e, T) for v, s, e in intervals])
    return encode_clip(frames, params.frozen(), T).data
