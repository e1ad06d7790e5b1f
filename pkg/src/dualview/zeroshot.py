"""Frozen-encoder evaluation: retrieval, grounding, prompt classification.

All scoring is cosine similarity in the joint latent space. Metrics follow
the usual retrieval and recognition conventions:

* ranks are 1-based; the median of an even number of ranks is the lower
  of the two central values;
* a grounding segment counts as a hit when its temporal IoU with the
  ground-truth interval is at least ``iou_threshold`` (0.5 by default);
* triplet component scores are max-pooled over the triplet classes that share
  the component value.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np

from dualview.encoders import EncoderParams, encode_clip, encode_frames, sample_frames
from dualview.errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    EmptyInputError,
    MissingGroundTruthError,
    UndefinedAPError,
)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise DegenerateVectorError("cannot normalise a zero vector")
    return x / norms


def cosine_scores(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain-array cosine similarity matrix ``[p, d] x [q, d] -> [p, q]``."""
    return _unit_rows(a) @ _unit_rows(b).T


# ---------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True)
class RetrievalIndex:
    ids: tuple
    latents: np.ndarray

    @classmethod
    def build(cls, ids: Sequence[Hashable], latents: np.ndarray) -> "RetrievalIndex":
        ids = tuple(ids)
        if len(set(ids)) != len(ids):
            raise ContractError("gallery ids must be unique")
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[0] != len(ids):
            raise DimensionError(f"{len(ids)} ids for latents of shape {latents.shape}")
        return cls(ids, _unit_rows(latents) if len(ids) else latents)

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class RankedResult:
    query_id: Hashable
    ids: tuple
    scores: np.ndarray

    def rank_of(self, gallery_id) -> int:
        return self.ids.index(gallery_id) + 1


def _ordered(ids: Sequence, scores: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending id
    return np.array(sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i])), dtype=np.intp)


def rank_gallery(query: np.ndarray, index: RetrievalIndex, query_id: Hashable = None) -> RankedResult:
    if len(index) == 0:
        raise EmptyInputError("empty gallery")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.latents.shape[1]:
        raise DimensionError(f"query dim {q.shape[0]} vs gallery dim {index.latents.shape[1]}")
    scores = index.latents @ _unit_rows(q)[0]
    order = _ordered(index.ids, scores)
    return RankedResult(query_id, tuple(index.ids[i] for i in order), scores[order])


def rank_all(queries: np.ndarray, query_ids: Sequence, index: RetrievalIndex) -> list[RankedResult]:
    return [rank_gallery(q, index, qid) for q, qid in zip(np.atleast_2d(queries), query_ids)]


def gt_rank(result: RankedResult, gt) -> int:
    """Best 1-based rank of any ground-truth id (``gt`` is an id or a collection)."""
    if isinstance(gt, (set, frozenset, list, tuple)):
        targets = set(gt)
    else:
        targets = {gt}
    for r, gid in enumerate(result.ids, 1):
        if gid in targets:
            return r
    return len(result.ids) + 1


def _ranks(results: Sequence[RankedResult], gt: Mapping) -> list[int]:
    ranks = []
    for res in results:
        if res.query_id not in gt:
            raise MissingGroundTruthError(f"no ground truth for query {res.query_id!r}")
        ranks.append(gt_rank(res, gt[res.query_id]))
    return ranks


def recall_at_k(results: Sequence[RankedResult], gt: Mapping, K: int) -> float:
    """Fraction of queries whose ground truth appears within the top ``K``."""
    ranks = _ranks(results, gt)
    if not ranks:
        raise EmptyInputError("no queries")
    return float(np.mean([r <= K for r in ranks]))


def median_rank(results: Sequence[RankedResult], gt: Mapping) -> int:
    ranks = sorted(_ranks(results, gt))
    if not ranks:
        raise EmptyInputError("no queries")
    return int(ranks[(len(ranks) - 1) // 2])


def retrieval_metrics(results, gt, ks=(1, 5, 10)) -> dict[str, float]:
    out = {f"R@{k}": recall_at_k(results, gt, k) for k in ks}
    out["MedR"] = float(median_rank(results, gt))
    return out


# ---------------------------------------------------------------------------
# temporal grounding


def temporal_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union if union > 0 else 0.0


def sliding_segments(duration: float, window_s: float, stride_s: float) -> list[tuple[float, float]]:
    if window_s > duration + 1e-9:
        raise ContractError(f"window {window_s}s is longer than the video ({duration}s)")
    if window_s <= 0 or stride_s <= 0:
        raise ContractError("window and stride must be positive")
    n = int(np.floor((duration - window_s) / stride_s + 1e-9)) + 1
    return [(k * stride_s, k * stride_s + window_s) for k in range(n)]


def ground_query(
    video,
    query_latent: np.ndarray,
    window_s: float,
    stride_s: float,
    params: EncoderParams,
    T: int = 4,
    query_id: Hashable = None,
) -> tuple[RankedResult, list[tuple[float, float]]]:
    """Rank the sliding-window segments of one video against a text latent.

    Returns the ranking (gallery ids are segment indices) and the segments.
    """
    segments = sliding_segments(video.duration_s, window_s, stride_s)
    frames = np.concatenate(
        [video.frame_features[sample_frames(s, e, video.fps, T, video.n_frames)] for s, e in segments]
    )
    latents = encode_clip(frames, params.frozen(), T).data
    index = RetrievalIndex.build(range(len(segments)), latents)
    return rank_gallery(query_latent, index, query_id), segments


def grounding_hits(segments, gt_interval, iou_threshold: float = 0.5) -> set[int]:
    return {i for i, seg in enumerate(segments) if temporal_iou(seg, gt_interval) >= iou_threshold}


# ---------------------------------------------------------------------------
# prompt classification


@dataclass(frozen=True)
class PromptClass:
    id: int
    name: str
    prompt: str


@dataclass(frozen=True)
class PromptClassSet:
    task: str
    classes: tuple[PromptClass, ...]

    def __post_init__(self):
        if self.task not in ("tool", "phase", "triplet"):
            raise ContractError(f"unknown task {self.task!r}")
        if not self.classes:
            raise EmptyInputError("a prompt set needs at least one class")
        if any(not c.prompt.strip() for c in self.classes):
            raise ContractError("prompts must be non-empty")
        if len({c.id for c in self.classes}) != len(self.classes):
            raise ContractError("one prompt per class id")

    @property
    def prompts(self) -> list[str]:
        return [c.prompt for c in self.classes]

    @property
    def multi_label(self) -> bool:
        return self.task in ("tool", "triplet")

    def to_json(self) -> dict:
        return {"task": self.task, "classes": [{"id": c.id, "name": c.name, "prompt": c.prompt} for c in self.classes]}

    @classmethod
    def from_json(cls, d: dict) -> "PromptClassSet":
        return cls(d["task"], tuple(PromptClass(int(c["id"]), str(c["name"]), str(c["prompt"])) for c in d["classes"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PromptClassSet":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


TRIPLET_TEMPLATE = "I use {tool} to {action} {target}"


def triplet_prompt(tool: str, action: str, target: str, article: bool = True) -> str:
    """Fill the triplet template; ``article`` prefixes the target with "the"."""
    return TRIPLET_TEMPLATE.format(tool=tool, action=action, target=f"the {target}" if article else target)


def triplet_prompt_set(triplets: Mapping[int, tuple[str, str, str]]) -> PromptClassSet:
    classes = tuple(
        PromptClass(k, ",".join(v), triplet_prompt(*v)) for k, v in sorted(triplets.items())
    )
    return PromptClassSet("triplet", classes)


def bundled_prompts(name: str) -> PromptClassSet:
    """Load a bundled prompt file: ``"cholec80_phase"`` or ``"cholec80_tool"``."""
    text = resources.files("dualview.data").joinpath(f"{name}.prompts.json").read_text(encoding="utf-8")
    return PromptClassSet.from_json(json.loads(text))


def classify(latents: np.ndarray, prompt_set: PromptClassSet, text_encoder: Callable[[list[str]], np.ndarray]) -> np.ndarray:
    """Cosine score of every input latent against every class prompt: ``[n, C]``.

    ``text_encoder`` maps a list of prompt strings to their latents (a frozen
    text branch). Single-label tasks take the argmax of each row.
    """
    prompt_latents = np.asarray(text_encoder(prompt_set.prompts), dtype=np.float64)
    return cosine_scores(np.atleast_2d(latents), prompt_latents)


def predict_single_label(scores: np.ndarray, prompt_set: PromptClassSet) -> np.ndarray:
    ids = np.array([c.id for c in prompt_set.classes])
    return ids[np.argmax(scores, axis=1)]


# ---------------------------------------------------------------------------
# recognition metrics


def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of the positive items."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.shape[0]} scores for {labels.shape[0]} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedAPError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-column AP (NaN where a class has no positives) and their nan-mean."""
    scores = np.atleast_2d(scores)
    labels = np.atleast_2d(labels)
    aps = np.full(scores.shape[1], np.nan)
    for c in range(scores.shape[1]):
        if labels[:, c].any():
            aps[c] = average_precision(scores[:, c], labels[:, c])
    valid = aps[~np.isnan(aps)]
    return aps, float(valid.mean()) if valid.size else float("nan")


def f1_per_class(predictions, labels, n_classes: int | None = None) -> tuple[np.ndarray, float]:
    """Per-class F1 (0 when precision + recall is 0) and the mean over classes."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise DimensionError("predictions and labels differ in length")
    if n_classes is None:
        n_classes = int(max(pred.max(initial=-1), true.max(initial=-1)) + 1)
    f1 = np.zeros(n_classes)
    for c in range(n_classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1[c] = 2 * p * r / (p + r) if p + r else 0.0
    return f1, float(f1.mean()) if n_classes else float("nan")


COMPONENTS = {
    "i": (0,),
    "v": (1,),
    "t": (2,),
    "iv": (0, 1),
    "it": (0, 2),
    "ivt": (0, 1, 2),
}


def pool_components(matrix: np.ndarray, component_map: Mapping[int, tuple], which: tuple[int, ...]):
    """Max-pool triplet columns that share the component values at positions ``which``.

    Column ``k`` of ``matrix`` belongs to triplet class ``k``. Returns the
    sorted component keys and the pooled ``[n, len(keys)]`` matrix.
    """
    matrix = np.atleast_2d(matrix)
    missing = [k for k in range(matrix.shape[1]) if k not in component_map]
    if missing:
        raise ContractError(f"triplet classes {missing} have no component mapping")
    groups: dict[tuple, list[int]] = {}
    for k in range(matrix.shape[1]):
        key = tuple(component_map[k][p] for p in which)
        groups.setdefault(key, []).append(k)
    keys = sorted(groups)
    pooled = np.stack([matrix[:, groups[key]].max(axis=1) for key in keys], axis=1)
    return keys, pooled


def triplet_component_ap(scores: np.ndarray, labels: np.ndarray, component_map: Mapping[int, tuple]) -> dict[str, float]:
    """AP_i, AP_v, AP_t, AP_iv, AP_it, AP_ivt as means over component classes with positives."""
    out = {}
    for name, which in COMPONENTS.items():
        _, s = pool_components(scores, component_map, which)
        _, y = pool_components(np.asarray(labels, dtype=np.float64), component_map, which)
        _, mean = mean_average_precision(s, y > 0)
        out[f"AP_{name}"] = mean
    return out


# ---------------------------------------------------------------------------
# activation maps


def activation_map(video, query_latent: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Cosine similarity between the query and every single-frame latent."""
    frame_latents = encode_frames(video.frame_features, params.frozen()).data
    return cosine_scores(frame_latents, np.asarray(query_latent).reshape(1, -1))[:, 0]


def write_activation_csv(path, video, series: np.ndarray):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "time_s", "similarity"])
        for i, v in enumerate(series):
            w.writerow([i, repr(i / video.fps), repr(float(v))])


def write_metrics_csv(path, metrics: Mapping[str, float]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v))])


def write_per_class_csv(path, rows: Sequence[Mapping]):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
