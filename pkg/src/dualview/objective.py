"""Contrastive objectives and the pre-training loop.

``info_nce`` aligns each clip with its A-view sentence against the other
sentences in the batch; ``mil_nce`` aligns each clip with a *group* of M
W-view sentences, pooling the group in the numerator. Both are computed in
log space from a temperature-scaled cosine similarity matrix and are
one-directional (clip to text) unless ``symmetric`` is set.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from dualview import gradcore as gc
from dualview.encoders import (
    EncoderParams,
    HyperConfig,
    SubwordVocab,
    clip_frames,
    encode_clip,
    encode_text,
    init_params,
    tokenize_batch,
)
from dualview.errors import ConfigError, ContractError, EmptyInputError, NonFiniteError, TrainingDivergedError
from dualview.pairing import ClipTextPair, overlap_length


def _as_groups(gamma: gc.Tensor, B: int, M: int | None) -> tuple[gc.Tensor, int]:
    if gamma.ndim == 3:
        if gamma.shape[0] != B:
            raise ContractError(f"gamma has {gamma.shape[0]} groups for {B} clips")
        M = gamma.shape[1]
        return gc.reshape(gamma, (B * M, gamma.shape[2])), M
    if M is None:
        M = gamma.shape[0] // B if B else 0
    if M < 1 or gamma.shape[0] != B * M:
        raise EmptyInputError(f"gamma with {gamma.shape[0]} rows does not form {B} non-empty groups")
    return gamma, M


def info_nce_logits(logits: gc.Tensor, symmetric: bool = False) -> gc.Tensor:
    """InfoNCE on a ``[B, B]`` logit matrix whose diagonal holds the positives."""
    loss = gc.mean_all(gc.sub(gc.logsumexp_rows(logits), gc.diag(logits)))
    if symmetric:
        back = gc.transpose(logits)
        reverse = gc.mean_all(gc.sub(gc.logsumexp_rows(back), gc.diag(back)))
        loss = gc.scale(gc.add(loss, reverse), 0.5)
    return loss


def mil_nce_logits(logits: gc.Tensor, M: int, symmetric: bool = False) -> gc.Tensor:
    """MIL-NCE on a ``[B, B*M]`` logit matrix; columns ``i*M .. i*M+M-1`` are row i's positives."""
    B = logits.shape[0]
    if M < 1 or logits.shape[1] != B * M:
        raise EmptyInputError(f"logits of shape {logits.shape} do not form {B} groups of {M}")
    rows = np.repeat(np.arange(B), M)
    cols = np.arange(B * M)
    positives = gc.reshape(gc.pick(logits, rows, cols), (B, M))
    loss = gc.mean_all(gc.sub(gc.logsumexp_rows(logits), gc.logsumexp_rows(positives)))
    if symmetric:
        # text-to-clip direction: each group's texts against every clip
        per_group = gc.reshape(gc.transpose(logits), (B, M * B))
        reverse = gc.mean_all(gc.sub(gc.logsumexp_rows(per_group), gc.logsumexp_rows(positives)))
        loss = gc.scale(gc.add(loss, reverse), 0.5)
    return loss


def info_nce(chi: gc.Tensor, beta: gc.Tensor, tau: float, symmetric: bool = False) -> gc.Tensor:
    if tau <= 0:
        raise ConfigError(f"tau={tau} must be positive")
    return info_nce_logits(gc.scale(gc.cosine_matrix(chi, beta), 1.0 / tau), symmetric)


def mil_nce(chi: gc.Tensor, gamma: gc.Tensor, tau: float, M: int | None = None, symmetric: bool = False) -> gc.Tensor:
    """MIL-NCE over positive groups.

    ``gamma`` is ``[B, M, d]`` or ``[B*M, d]`` with row ``i*M + m`` holding the
    m-th positive of clip ``i``.
    """
    if tau <= 0:
        raise ConfigError(f"tau={tau} must be positive")
    flat, M = _as_groups(gamma, chi.shape[0], M)
    return mil_nce_logits(gc.scale(gc.cosine_matrix(chi, flat), 1.0 / tau), M, symmetric)


def combined_loss(chi, beta, gamma, tau: float, eps: float, M: int | None = None, symmetric: bool = False) -> gc.Tensor:
    """``eps * info_nce + (1 - eps) * mil_nce``."""
    if not 0.0 <= eps <= 1.0:
        raise ConfigError(f"eps={eps} not in [0, 1]")
    a = info_nce(chi, beta, tau, symmetric)
    w = mil_nce(chi, gamma, tau, M, symmetric)
    return gc.add(gc.scale(a, eps), gc.scale(w, 1.0 - eps))


def view_loss(chi, beta, gamma, hyper: HyperConfig) -> tuple[gc.Tensor, float, float]:
    """Loss for the configured text views plus its two parts as floats."""
    if hyper.views == "a":
        loss = info_nce(chi, beta, hyper.tau, hyper.symmetric)
        return loss, loss.item(), float("nan")
    if hyper.views == "w":
        loss = mil_nce(chi, gamma, hyper.tau, hyper.M, hyper.symmetric)
        return loss, float("nan"), loss.item()
    a = info_nce(chi, beta, hyper.tau, hyper.symmetric)
    w = mil_nce(chi, gamma, hyper.tau, hyper.M, hyper.symmetric)
    loss = gc.add(gc.scale(a, hyper.eps), gc.scale(w, 1.0 - hyper.eps))
    return loss, a.item(), w.item()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    total: list[float] = field(default_factory=list)
    infonce: list[float] = field(default_factory=list)
    milnce: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    wall_time_s: float = 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "total", "infonce", "milnce", "grad_norm"])
            for i, row in enumerate(zip(self.total, self.infonce, self.milnce, self.grad_norm)):
                w.writerow([i] + [repr(float(v)) for v in row])


def choose_w_group(pair: ClipTextPair, M: int) -> list[str]:
    """Pick M W texts: the most-overlapping ones, cycling when fewer exist."""
    ranked = sorted(pair.w_sentences, key=lambda w: (-overlap_length(pair.a_sentence, w), w.start_s))
    return [ranked[i % len(ranked)].text for i in range(M)]


@dataclass
class PairTensors:
    """Pre-tokenized, pre-sampled arrays for a pair dataset."""

    frames: np.ndarray  # [K, T, feature_dim]
    a_ids: np.ndarray  # [K, N]
    w_ids: np.ndarray  # [K, M, N]

    def __len__(self):
        return self.frames.shape[0]


def prepare_pairs(pairs: Sequence[ClipTextPair], videos, vocab: SubwordVocab, hyper: HyperConfig) -> PairTensors:
    if not pairs:
        raise EmptyInputError("no clip-text pairs to prepare")
    frames = np.stack([clip_frames(videos[p.video_id], p.clip_start_s, p.clip_end_s, hyper.T) for p in pairs])
    a_ids = tokenize_batch([p.a_sentence.text for p in pairs], vocab, hyper.N)
    w_texts = [t for p in pairs for t in choose_w_group(p, hyper.M)]
    w_ids = tokenize_batch(w_texts, vocab, hyper.N).reshape(len(pairs), hyper.M, hyper.N)
    return PairTensors(frames, a_ids, w_ids)


def batch_loss(params: EncoderParams, data: PairTensors, idx: np.ndarray, hyper: HyperConfig):
    B = len(idx)
    frames = data.frames[idx].reshape(B * hyper.T, -1)
    chi = encode_clip(frames, params, hyper.T)
    beta = gamma = None
    if hyper.views in ("a", "both"):
        beta = encode_text(data.a_ids[idx], params, hyper.masked_mean)
    if hyper.views in ("w", "both"):
        gamma = encode_text(data.w_ids[idx].reshape(B * hyper.M, hyper.N), params, hyper.masked_mean)
    return view_loss(chi, beta, gamma, hyper)


def train(
    pairs: Sequence[ClipTextPair] | PairTensors,
    params: EncoderParams,
    hyper: HyperConfig,
    rng,
    *,
    videos=None,
    vocab: SubwordVocab | None = None,
) -> tuple[EncoderParams, TrainReport]:
    """Shuffled-minibatch Adam training on the configured combination of views.

    ``pairs`` may be raw ClipTextPairs (then ``videos`` and ``vocab`` are
    needed) or an already prepared :class:`PairTensors`. Returns a fresh
    parameter set; the input parameters are not modified.
    """
    hyper.validate()
    data = pairs if isinstance(pairs, PairTensors) else prepare_pairs(pairs, videos, vocab, hyper)
    K = len(data)
    if K == 0:
        raise EmptyInputError("empty training set")
    if hyper.B > K:
        raise ContractError(f"batch size {hyper.B} exceeds dataset size {K}")
    rng = np.random.default_rng(rng)
    params = params.trainable()
    tensors = params.tensors()
    state = gc.AdamState.for_params(tensors, lr=hyper.lr)
    report = TrainReport()
    t0 = time.perf_counter()
    order = rng.permutation(K)
    cursor = 0
    for step in range(hyper.steps):
        if cursor + hyper.B > K:
            order = rng.permutation(K)
            cursor = 0
        idx = order[cursor: cursor + hyper.B]
        cursor += hyper.B
        try:
            with gc.Tape() as tape:
                loss, part_a, part_w = batch_loss(params, data, idx, hyper)
        except NonFiniteError as exc:
            raise TrainingDivergedError(step, str(exc)) from None
        if not np.isfinite(loss.item()):
            raise TrainingDivergedError(step, f"loss={loss.item()}")
        gc.backward(loss, tape, wrt=tensors)
        grads = [t.grad for t in tensors]
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if not np.isfinite(gnorm):
            raise TrainingDivergedError(step, "non-finite gradient")
        gc.adam_step(tensors, grads, state)
        report.total.append(loss.item())
        report.infonce.append(part_a)
        report.milnce.append(part_w)
        report.grad_norm.append(gnorm)
    report.wall_time_s = time.perf_counter() - t0
    return params.frozen(), report


def evaluate_loss(params: EncoderParams, data: PairTensors, hyper: HyperConfig, idx=None) -> float:
    idx = np.arange(min(len(data), hyper.B)) if idx is None else np.asarray(idx)
    loss, _, _ = batch_loss(params.frozen(), data, idx, hyper)
    return loss.item()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_config: list[dict]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``, counted as zero where ``|a - n| <= floor``."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return np.where(diff <= floor, 0.0, rel)


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    hyper: HyperConfig | None = None,
    rng=0,
    n_configs: int = 20,
    *,
    tau: float | None = None,
    eps: float | None = None,
    tolerance: float = 1e-4,
    h: float = 1e-5,
) -> GradCheckReport:
    """Compare backprop and central differences for the combined loss.

    Each of ``n_configs`` random configurations (B <= 4, M <= 3, d <= 8) gets a
    fresh tiny encoder, random token ids and random frames; every parameter
    entry is perturbed. Failures are reported, not raised.
    """
    hyper = hyper or HyperConfig()
    tau = hyper.tau if tau is None else tau
    eps = hyper.eps if eps is None else eps
    rng = np.random.default_rng(rng)
    results = []
    worst = 0.0
    for c in range(n_configs):
        B = int(rng.integers(2, 5))
        M = int(rng.integers(1, 4))
        d = int(rng.integers(2, 9))
        N = int(rng.integers(2, 5))
        T = int(rng.integers(1, 4))
        V, fdim = 7, 3
        small = HyperConfig(N=N, T=T, d=d, tau=tau, eps=eps, M=M, B=B, embed_dim=3, hidden_dim=4)
        params = init_params(V, fdim, small, rng)
        for t in params.tensors():
            if t.ndim == 1:  # non-zero biases so every path is exercised
                t.data = rng.normal(0.0, 0.1, size=t.shape)
        frames = rng.normal(size=(B * T, fdim))
        a_ids = rng.integers(0, V, size=(B, N))
        w_ids = rng.integers(0, V, size=(B * M, N))

        def forward():
            chi = encode_clip(frames, params, T)
            beta = encode_text(a_ids, params)
            gamma = encode_text(w_ids, params)
            return combined_loss(chi, beta, gamma, tau, eps, M)

        tensors = params.tensors()
        with gc.Tape() as tape:
            loss = forward()
        gc.backward(loss, tape, wrt=tensors)
        analytic = [t.grad.copy() for t in tensors]
        cfg_worst = 0.0
        for t, a in zip(tensors, analytic):
            num = numeric_gradient(lambda: forward().item(), t.data, h)
            cfg_worst = max(cfg_worst, float(relative_errors(a, num).max(initial=0.0)))
        worst = max(worst, cfg_worst)
        results.append({"config": c, "B": B, "M": M, "d": d, "N": N, "T": T, "max_rel_error": cfg_worst})
    return GradCheckReport(worst, results, tolerance)
