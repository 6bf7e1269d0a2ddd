"""Boundary-detection metrics (AP, recall, Recall@3s) and k-NN same-scene retrieval."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np


@dataclass
class RankedPredictions:
    scores: np.ndarray
    labels: np.ndarray
    times: Optional[np.ndarray] = None
    title_ids: Optional[List[str]] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels).astype(bool).reshape(-1)
        if len(self.scores) != len(self.labels):
            raise ValueError("scores and labels differ in length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if self.times is not None:
            self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
            if len(self.times) != len(self.scores):
                raise ValueError("times and scores differ in length")
        if self.title_ids is not None:
            self.title_ids = list(self.title_ids)
            if len(self.title_ids) != len(self.scores):
                raise ValueError("title ids and scores differ in length")

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "RankedPredictions":
        records = list(records)
        return cls([r["score"] for r in records],
                   [bool(r["label_if_known"]) for r in records],
                   [r["boundary_time_s"] for r in records],
                   [r["title_id"] for r in records])


def _as_preds(preds, labels=None) -> RankedPredictions:
    if isinstance(preds, RankedPredictions):
        return preds
    return RankedPredictions(preds, labels)


def average_precision(preds, labels=None) -> float:
    """Mean of precision@rank over the ranks holding positives.

    Ties in score keep input order (stable sort). Accepts a
    :class:`RankedPredictions` or ``(scores, labels)``.
    """
    p = _as_preds(preds, labels)
    n_pos = int(p.labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-p.scores, kind="stable")
    hits = p.labels[order]
    ranks = np.arange(1, len(hits) + 1)
    precision = np.cumsum(hits) / ranks
    return float(precision[hits].sum() / n_pos)


def recall_at_threshold(preds, threshold: float = 0.5, labels=None) -> float:
    p = _as_preds(preds, labels)
    n_pos = int(p.labels.sum())
    if n_pos == 0:
        raise ValueError("recall is undefined without positive labels")
    return float(np.count_nonzero(p.scores[p.labels] >= threshold) / n_pos)


def recall_at_3s(gt_times, predicted_times, window_s: float = 3.0) -> float:
    """Fraction of ground-truth boundaries with some prediction within ``window_s``.

    Either pass flat sequences for a single title, or dicts ``title -> times``
    to pool over titles (predictions only match inside their own title). An
    empty ground truth yields 1.0.
    """
    if not isinstance(gt_times, Mapping):
        gt_times, predicted_times = {None: gt_times}, {None: predicted_times}
    hits = total = 0
    for title, gts in gt_times.items():
        gts = np.asarray(gts, dtype=np.float64).reshape(-1)
        preds = np.sort(np.asarray(predicted_times.get(title, []), dtype=np.float64).reshape(-1))
        total += len(gts)
        if not len(gts) or not len(preds):
            continue
        # nearest prediction on either side
        pos = np.searchsorted(preds, gts)
        left = np.abs(gts - preds[np.clip(pos - 1, 0, len(preds) - 1)])
        right = np.abs(preds[np.clip(pos, 0, len(preds) - 1)] - gts)
        hits += int(np.count_nonzero(np.minimum(left, right) <= window_s))
    if total == 0:
        return 1.0
    return hits / total


def knn_retrieval_precision(embeddings, scene_ids, k: int):
    """Mean same-scene precision of the ``k`` cosine-nearest shots within each title.

    ``embeddings``/``scene_ids`` are per-title sequences (or one array for a
    single title). Ties in similarity go to the lower shot index. Titles with
    fewer than ``k + 1`` shots are skipped. Returns ``(precision, n_skipped)``.
    """
    if isinstance(embeddings, np.ndarray) and embeddings.ndim == 2:
        embeddings, scene_ids = [embeddings], [scene_ids]
    if k < 1:
        raise ValueError("k must be >= 1")
    per_query: List[float] = []
    skipped = 0
    for emb, sids in zip(embeddings, scene_ids):
        emb = np.asarray(emb, dtype=np.float64)
        sids = np.asarray(sids)
        n = len(emb)
        if n < k + 1:
            skipped += 1
            continue
        unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
        idx = np.arange(n)
        for q in range(n):
            sims = np.sum(unit * unit[q], axis=1)
            sims[q] = -np.inf
            nearest = np.lexsort((idx, -sims))[:k]
            per_query.append(np.count_nonzero(sids[nearest] == sids[q]) / k)
    precision = float(np.mean(per_query)) if per_query else float("nan")
    return precision, skipped


@dataclass
class MetricsReport:
    ap: Optional[float] = None
    recall_at_threshold: Optional[float] = None
    recall_at_3s: Optional[float] = None
    knn_precision_by_k: Dict[int, float] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["knn_precision_by_k"] = {str(k): v for k, v in self.knn_precision_by_k.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["knn_precision_by_k"] = {int(k): v for k, v in d["knn_precision_by_k"].items()}
        return cls(**d)


def boundary_metrics(preds: RankedPredictions, gt_times: Optional[Mapping] = None,
                     threshold: float = 0.5, window_s: float = 3.0) -> MetricsReport:
    """AP, recall at ``threshold`` and Recall@3s for pooled boundary predictions.

    Ground-truth times default to the positively labelled records; the
    predicted set for Recall@3s is every record scoring at least ``threshold``.
    """
    report = MetricsReport()
    report.ap = average_precision(preds)
    report.recall_at_threshold = recall_at_threshold(preds, threshold)
    titles = preds.title_ids if preds.title_ids is not None else [None] * len(preds.scores)
    if gt_times is None:
        gt_times = {}
        for t, lab, time in zip(titles, preds.labels, preds.times):
            gt_times.setdefault(t, [])
            if lab:
                gt_times[t].append(time)
    pred_times: Dict[Optional[str], list] = {}
    for t, s, time in zip(titles, preds.scores, preds.times):
        if s >= threshold:
            pred_times.setdefault(t, []).append(time)
    report.recall_at_3s = recall_at_3s(gt_times, pred_times, window_s)
    n_gt = sum(len(v) for v in gt_times.values())
    if n_gt == 0:
        report.notes.append("recall@3s vacuous: no ground-truth boundaries")
    report.counts.update(n_predictions=len(preds.scores), n_positive=int(preds.labels.sum()),
                         n_ground_truth=n_gt,
                         n_predicted=sum(len(v) for v in pred_times.values()))
    return report


def read_jsonl(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
