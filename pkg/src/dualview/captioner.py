"""Caption decoder trained on text latents only, plus caption metrics.

The decoder never sees video during training. It learns to rebuild a
sentence from the frozen text encoder's latent of that sentence; at inference
the latent of a clip is fed in instead. Latents are unit-normalised before
entering the decoder and training adds isotropic Gaussian noise to them, which
narrows the gap between the two modalities.

The recurrent cell is a single GRU. Gates are computed from the previous
token embedding, the previous state and the conditioning latent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from nltk.stem import PorterStemmer

from dualview import gradcore as gc
from dualview.encoders import BOS, EOS, PAD, EncoderParams, HyperConfig, SubwordVocab, embed_texts, pretokenize
from dualview.errors import ConfigError, ContractError, DimensionError, EmptyInputError, ParseError

METEOR_VARIANT = "exact+porter-stem, no synonymy"


@dataclass(frozen=True)
class CaptionerConfig:
    hidden_dim: int = 64
    embed_dim: int = 32
    steps: int = 600
    batch_size: int = 32
    lr: float = 2e-2
    noise_std: float = 0.01
    max_len: int = 20

    def validate(self) -> "CaptionerConfig":
        bad = []
        for name in ("hidden_dim", "embed_dim", "batch_size", "max_len"):
            if getattr(self, name) < 1:
                bad.append(f"{name}={getattr(self, name)} must be >= 1")
        if self.steps < 0:
            bad.append(f"steps={self.steps} must be >= 0")
        if not self.lr > 0:
            bad.append(f"lr={self.lr} must be > 0")
        if self.noise_std < 0:
            bad.append(f"noise_std={self.noise_std} must be >= 0")
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CaptionerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown captioner field {k!r}" for k in sorted(unknown)])
        return cls(**d).validate()


DECODER_NAMES = ("init_w", "init_b", "emb", "wx", "wh", "wz", "b", "out_w", "out_b")


@dataclass
class DecoderParams:
    init_w: gc.Tensor
    init_b: gc.Tensor
    emb: gc.Tensor
    wx: gc.Tensor
    wh: gc.Tensor
    wz: gc.Tensor
    b: gc.Tensor
    out_w: gc.Tensor
    out_b: gc.Tensor

    def tensors(self) -> list[gc.Tensor]:
        return [getattr(self, n) for n in DECODER_NAMES]

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.init_w.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.wh.shape[0]

    def check(self):
        for n in DECODER_NAMES:
            if not np.all(np.isfinite(getattr(self, n).data)):
                raise ContractError(f"decoder weight {n} is not finite")

    def save(self, path):
        np.savez(path, **{n: getattr(self, n).data for n in DECODER_NAMES})

    @classmethod
    def load(cls, path) -> "DecoderParams":
        with np.load(path) as z:
            missing = [n for n in DECODER_NAMES if n not in z]
            if missing:
                raise ContractError(f"decoder file {path} lacks {missing}")
            return cls(*(gc.Tensor(z[n]) for n in DECODER_NAMES))


def init_decoder(vocab_size: int, latent_dim: int, cfg: CaptionerConfig, rng) -> DecoderParams:
    rng = np.random.default_rng(rng)
    H, E = cfg.hidden_dim, cfg.embed_dim

    def glorot(a, b):
        return gc.Tensor(rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b)), requires_grad=True)

    def zeros(*shape):
        return gc.Tensor(np.zeros(shape), requires_grad=True)

    return DecoderParams(
        glorot(latent_dim, H), zeros(H),
        gc.Tensor(rng.normal(0.0, 0.1, size=(vocab_size, E)), requires_grad=True),
        glorot(E, 3 * H), glorot(H, 3 * H), glorot(latent_dim, 3 * H), zeros(3 * H),
        glorot(H, vocab_size), zeros(vocab_size),
    )


def unit_latents(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    return z / np.maximum(norms, 1e-12)


def caption_sequences(sentences: Sequence[str], vocab: SubwordVocab, max_len: int):
    """Teacher-forcing inputs, targets and lengths (targets end with EOS)."""
    bodies = [vocab.encode(s)[: max_len - 1] for s in sentences]
    L = max(len(b) for b in bodies) + 1
    inputs = np.full((len(bodies), L), PAD, dtype=np.int64)
    targets = np.full((len(bodies), L), PAD, dtype=np.int64)
    for i, body in enumerate(bodies):
        inputs[i, : len(body) + 1] = [BOS] + body
        targets[i, : len(body) + 1] = body + [EOS]
    lengths = np.array([len(b) + 1 for b in bodies])
    return inputs, targets, lengths


def _gru_step(gxz, gh, h, H):
    r = gc.sigmoid(gc.add(gc.slice_cols(gxz, 0, H), gc.slice_cols(gh, 0, H)))
    u = gc.sigmoid(gc.add(gc.slice_cols(gxz, H, 2 * H), gc.slice_cols(gh, H, 2 * H)))
    n = gc.tanh(gc.add(gc.slice_cols(gxz, 2 * H, 3 * H), gc.mul(r, gc.slice_cols(gh, 2 * H, 3 * H))))
    return gc.add(n, gc.mul(u, gc.sub(h, n)))


def sequence_loss(dec: DecoderParams, z: np.ndarray, inputs: np.ndarray, targets: np.ndarray, lengths: np.ndarray) -> gc.Tensor:
    """Mean next-token cross-entropy over the non-padding target positions."""
    B, L = inputs.shape
    H = dec.hidden_dim
    zt = gc.constant(z)
    h = gc.tanh(gc.add(gc.matmul(zt, dec.init_w), dec.init_b))
    zc = gc.add(gc.matmul(zt, dec.wz), dec.b)
    # every step's input projection at once, time-major rows
    gx = gc.matmul(gc.gather_rows(dec.emb, inputs.T.reshape(-1)), dec.wx)
    gxz = gc.add(gx, gc.gather_rows(zc, np.tile(np.arange(B), L)))
    states = []
    for t in range(L):
        step_in = gc.gather_rows(gxz, np.arange(t * B, (t + 1) * B))
        h = _gru_step(step_in, gc.matmul(h, dec.wh), h, H)
        states.append(h)
    valid = np.arange(L)[:, None] < lengths[None, :]
    rows = np.flatnonzero(valid.reshape(-1))
    hs = gc.gather_rows(gc.concat_rows(states), rows)
    logits = gc.add(gc.matmul(hs, dec.out_w), dec.out_b)
    gold = targets.T.reshape(-1)[rows]
    nll = gc.sub(gc.logsumexp_rows(logits), gc.pick(logits, np.arange(len(rows)), gold))
    return gc.mean_all(nll)


@dataclass
class CaptionTrainReport:
    losses: list[float] = field(default_factory=list)


def train_text_only(
    sentences: Sequence[str],
    encoder: EncoderParams,
    vocab: SubwordVocab,
    hyper: HyperConfig,
    cfg: CaptionerConfig = CaptionerConfig(),
    rng=0,
) -> tuple[DecoderParams, CaptionTrainReport]:
    """Fit a decoder that rebuilds each sentence from its own noisy text latent."""
    cfg.validate()
    sentences = [s for s in sentences if s.strip()]
    if not sentences:
        raise EmptyInputError("no sentences to train the captioner on")
    rng = np.random.default_rng(rng)
    latents = unit_latents(embed_texts(sentences, vocab, encoder, hyper))
    inputs, targets, lengths = caption_sequences(sentences, vocab, cfg.max_len)
    dec = init_decoder(len(vocab), latents.shape[1], cfg, rng)
    tensors = dec.tensors()
    state = gc.AdamState.for_params(tensors, lr=cfg.lr)
    report = CaptionTrainReport()
    n = len(sentences)
    bsz = min(cfg.batch_size, n)
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=bsz, replace=False)
        z = latents[idx] + rng.normal(0.0, 1.0, size=(bsz, latents.shape[1])) * cfg.noise_std
        width = int(lengths[idx].max())
        with gc.Tape() as tape:
            loss = sequence_loss(dec, z, inputs[idx, :width], targets[idx, :width], lengths[idx])
        gc.backward(loss, tape, wrt=tensors)
        gc.adam_step(tensors, [t.grad for t in tensors], state)
        report.losses.append(loss.item())
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    return dec, report


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_ids(latents: np.ndarray, dec: DecoderParams, max_len: int = 20) -> list[list[int]]:
    """Greedy decoding for a batch of latents; EOS is not included."""
    z = unit_latents(latents)
    if z.shape[1] != dec.latent_dim:
        raise DimensionError(f"latent dim {z.shape[1]} vs decoder dim {dec.latent_dim}")
    H = dec.hidden_dim
    W = {n: getattr(dec, n).data for n in DECODER_NAMES}
    h = np.tanh(z @ W["init_w"] + W["init_b"])
    zc = z @ W["wz"] + W["b"]
    tok = np.full(len(z), BOS)
    out = [[] for _ in range(len(z))]
    done = np.zeros(len(z), dtype=bool)
    for _ in range(max_len):
        gxz = W["emb"][tok] @ W["wx"] + zc
        gh = h @ W["wh"]
        r = _sigmoid(gxz[:, :H] + gh[:, :H])
        u = _sigmoid(gxz[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gxz[:, 2 * H:] + r * gh[:, 2 * H:])
        h = n + u * (h - n)
        tok = np.argmax(h @ W["out_w"] + W["out_b"], axis=1)
        for i in np.flatnonzero(~done):
            if tok[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(tok[i]))
        if done.all():
            break
    return out


def generate(latents: np.ndarray, dec: DecoderParams, vocab: SubwordVocab, max_len: int = 20) -> list[str]:
    return [vocab.decode(ids) for ids in generate_ids(latents, dec, max_len)]


# ---------------------------------------------------------------------------
# metrics


def caption_tokens(text: str) -> list[str]:
    return pretokenize(text)


def _ngrams(tokens: Sequence[str], n: int) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for i in range(len(tokens) - n + 1):
        g = tuple(tokens[i: i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def _as_refs(references) -> list[list[str]]:
    if isinstance(references, str):
        references = [references]
    refs = [caption_tokens(r) for r in references]
    if not refs:
        raise EmptyInputError("at least one reference is required")
    return refs


def bleu_n(candidate: str, references, n: int = 4) -> float:
    """Sentence BLEU with clipped counts, uniform weights and brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ContractError(f"BLEU order must be 1..4, got {n}")
    cand = caption_tokens(candidate)
    refs = _as_refs(references)
    if not cand:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        c_counts = _ngrams(cand, k)
        total = sum(c_counts.values())
        if total == 0:
            return 0.0
        max_ref: dict[tuple, int] = {}
        for r in refs:
            for g, c in _ngrams(r, k).items():
                max_ref[g] = max(max_ref.get(g, 0), c)
        clipped = sum(min(c, max_ref.get(g, 0)) for g, c in c_counts.items())
        if clipped == 0:
            return 0.0
        log_p += np.log(clipped / total) / n
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else float(np.exp(1.0 - r / c))
    return float(bp * np.exp(log_p))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference, beta: float = 1.2) -> float:
    """LCS F-measure; the best reference wins when several are given."""
    cand = caption_tokens(candidate)
    best = 0.0
    for ref in _as_refs(reference):
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return float(best)


_STEMMER = PorterStemmer()


def _stem(word: str) -> str:
    return _STEMMER.stem(word)


def align_unigrams(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches, each left to right; sorted by candidate index."""
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs = []
    for key in (lambda w: w, _stem):
        ref_keys = [key(w) for w in ref]
        for i, w in enumerate(cand):
            if i in used_c:
                continue
            kw = key(w)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == kw:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_basic(candidate: str, reference) -> float:
    """METEOR with exact and stemmed matching but no synonym tables."""
    cand = caption_tokens(candidate)
    best = 0.0
    for ref in _as_refs(reference):
        alignment = align_unigrams(cand, ref)
        m = len(alignment)
        if m == 0:
            continue
        p, r = m / len(cand), m / len(ref)
        fmean = 10 * p * r / (r + 9 * p)
        penalty = 0.5 * (count_chunks(alignment) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return float(best)


def caption_scores(candidate: str, references) -> dict[str, float]:
    out = {f"BLEU-{n}": bleu_n(candidate, references, n) for n in (1, 2, 3, 4)}
    out["METEOR"] = meteor_basic(candidate, references)
    out["ROUGE_L"] = rouge_l(candidate, references)
    return out


def mean_caption_scores(candidates: Sequence[str], references: Sequence) -> dict[str, float]:
    if len(candidates) != len(references):
        raise DimensionError("one reference set per candidate")
    if not candidates:
        raise EmptyInputError("no captions to score")
    rows = [caption_scores(c, r) for c, r in zip(candidates, references)]
    return {k: float(np.mean([row[k] for row in rows])) for k in rows[0]}


# ---------------------------------------------------------------------------
# files


@dataclass(frozen=True)
class CaptionExample:
    clip_ref: str
    references: tuple[str, ...]

    @property
    def interval(self) -> tuple[str, float, float]:
        return parse_clip_ref(self.clip_ref)


def format_clip_ref(video_id: str, start_s: float, end_s: float) -> str:
    return f"{video_id}:{start_s:.3f}-{end_s:.3f}"


def parse_clip_ref(ref: str) -> tuple[str, float, float]:
    vid, _, span = ref.rpartition(":")
    start, _, end = span.partition("-")
    try:
        return vid, float(start), float(end)
    except ValueError:
        raise ContractError(f"malformed clip reference {ref!r}") from None


def read_caption_gt(path) -> list[CaptionExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                refs = obj["reference"]
                refs = (refs,) if isinstance(refs, str) else tuple(refs)
                if not refs or not all(isinstance(r, str) and r.strip() for r in refs):
                    raise ValueError("empty reference")
                parse_clip_ref(obj["clip_ref"])
                out.append(CaptionExample(obj["clip_ref"], refs))
            except (ValueError, KeyError, TypeError, ContractError) as exc:
                raise ParseError(path, no, str(exc)) from None
    return out


def write_caption_gt(path, examples: Sequence[CaptionExample]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            ref = ex.references[0] if len(ex.references) == 1 else list(ex.references)
            fh.write(json.dumps({"clip_ref": ex.clip_ref, "reference": ref}, sort_keys=True) + "\n")


def write_caption_predictions(path, examples: Sequence[CaptionExample], captions: Sequence[str]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex, cap in zip(examples, captions):
            fh.write(json.dumps({"clip_ref": ex.clip_ref, "caption": cap}, sort_keys=True) + "\n")


def write_caption_metrics(path, scores: dict[str, float]):
    cols = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE_L"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["meteor_variant"])
        w.writerow([repr(float(scores[c])) for c in cols] + [METEOR_VARIANT])
