"""
Sampled-candidate ranking evaluation.

Every user's held-out item is scored together with that user's sampled
negatives. Ranks use a pessimistic tie rule (the positive is placed after any
negative with an equal score); AUC counts ties as one half.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .data import SequenceDataset
from .errors import EvaluationError

METRIC_ORDER = ("auc", "gauc", "hr@5", "hr@10", "ndcg@5", "ndcg@10", "mrr")
TABLE_LABELS = {
    "auc": "AUC",
    "gauc": "GAUC",
    "hr@5": "HIT@5",
    "hr@10": "HIT@10",
    "ndcg@5": "NDCG@5",
    "ndcg@10": "NDCG@10",
    "mrr": "MRR",
}


def _check_scores(*arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise EvaluationError("non-finite score in evaluation")


def rank_positive(pos_score: float, neg_scores) -> int:
    """1 + number of negatives scoring at least as high as the positive."""
    neg_scores = np.asarray(neg_scores, dtype=float)
    _check_scores(np.asarray([pos_score], dtype=float), neg_scores)
    return 1 + int(np.sum(neg_scores >= pos_score))


def ranks(pos: np.ndarray, negs: np.ndarray) -> np.ndarray:
    """Vectorised ``rank_positive`` for (U,) positives and (U, K) negatives."""
    pos, negs = np.asarray(pos, dtype=float), np.asarray(negs, dtype=float)
    _check_scores(pos, negs)
    return 1 + np.sum(negs >= pos[:, None], axis=1)


def user_auc(pos: np.ndarray, negs: np.ndarray) -> np.ndarray:
    """Per-user AUC: (negatives below + half the ties) / number of negatives."""
    pos, negs = np.asarray(pos, dtype=float), np.asarray(negs, dtype=float)
    below = np.sum(negs < pos[:, None], axis=1)
    ties = np.sum(negs == pos[:, None], axis=1)
    return (below + 0.5 * ties) / negs.shape[1]


def pooled_auc(pos: np.ndarray, negs: np.ndarray) -> float:
    """AUC over every (positive, negative) pair across all users."""
    pos, negs = np.asarray(pos, dtype=float).ravel(), np.asarray(negs, dtype=float).ravel()
    r = rankdata(np.concatenate([pos, negs]))
    u_stat = r[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u_stat / (len(pos) * len(negs)))


def gauc(pos: np.ndarray, negs: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """Per-user AUC averaged with weights = each user's candidate count by default."""
    aucs = user_auc(pos, negs)
    if weights is None:
        weights = np.full(len(aucs), negs.shape[1] + 1, dtype=float)
    return math.fsum(w * a for w, a in zip(weights, aucs)) / math.fsum(weights)


def hr_at_k(rank_list, k: int) -> float:
    r = np.asarray(rank_list)
    return int(np.sum(r <= k)) / len(r)


def ndcg_at_k(rank_list, k: int) -> float:
    r = np.asarray(rank_list)
    return math.fsum(1.0 / math.log2(x + 1) for x in r if x <= k) / len(r)


def mrr(rank_list) -> float:
    r = np.asarray(rank_list)
    return math.fsum(1.0 / x for x in r) / len(r)


def compute_metrics(pos: np.ndarray, negs: np.ndarray) -> dict:
    rk = ranks(pos, negs)
    return {
        "auc": pooled_auc(pos, negs),
        "gauc": gauc(pos, negs),
        "hr@5": hr_at_k(rk, 5),
        "hr@10": hr_at_k(rk, 10),
        "ndcg@5": ndcg_at_k(rk, 5),
        "ndcg@10": ndcg_at_k(rk, 10),
        "mrr": mrr(rk),
    }


def config_hash(*configs) -> str:
    blob = json.dumps([c if isinstance(c, dict) else c.to_dict() for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    pos_scores: np.ndarray
    neg_scores: np.ndarray
    ranks: np.ndarray
    metrics: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_scores(cls, pos, negs, meta=None) -> "EvalReport":
        pos, negs = np.asarray(pos, dtype=float), np.asarray(negs, dtype=float)
        return cls(pos, negs, ranks(pos, negs), compute_metrics(pos, negs), dict(meta or {}))

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "metric_notes": {
                "auc": "pooled over all users' (positive, negative) pairs",
                "gauc": "per-user AUC weighted by candidate count",
            },
            "meta": self.meta,
            "users": [
                {"pos": float(p), "negs": n.tolist(), "rank": int(r)}
                for p, n, r in zip(self.pos_scores, self.neg_scores, self.ranks)
            ],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict())
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_json(cls, source) -> "EvalReport":
        if hasattr(source, "read_text"):
            source = source.read_text()
        elif not str(source).lstrip().startswith("{"):
            with open(source, encoding="utf-8") as fh:
                source = fh.read()
        d = json.loads(source)
        users = d["users"]
        pos = np.array([u["pos"] for u in users])
        negs = np.array([u["negs"] for u in users])
        report = cls.from_scores(pos, negs, d.get("meta"))
        return report

    def to_table(self, name: str = "model") -> str:
        return format_table({name: self.metrics})


def format_table(results: dict) -> str:
    """Metric rows by method columns, right-aligned."""
    methods = list(results)
    width = max([8] + [len(m) for m in methods]) + 2
    lines = ["Metric".ljust(10) + "".join(m.rjust(width) for m in methods)]
    for key in METRIC_ORDER:
        row = TABLE_LABELS[key].ljust(10)
        row += "".join(f"{results[m][key]:.4f}".rjust(width) for m in methods)
        lines.append(row)
    return "\n".join(lines)


class PopularityScorer:
    """Scores an item by how often it occurs in the training sequences."""

    def __init__(self, dataset: SequenceDataset):
        counts = np.zeros(dataset.num_items + 1, dtype=np.int64)
        for s in dataset.train_seqs:
            np.add.at(counts, s, 1)
        self.counts = counts

    def score_candidates(self, histories, candidates) -> np.ndarray:
        return self.counts[np.asarray(candidates)].astype(float)


def evaluate(scorer, dataset: SequenceDataset, batch_size: int = 256, meta: Optional[dict] = None) -> EvalReport:
    """Score held-out positives against each user's evaluation negatives.

    ``scorer.score_candidates(histories, candidates)`` must be deterministic;
    models are switched to eval mode by their own scoring method.
    """
    candidates = np.concatenate([dataset.heldout[:, None], dataset.eval_negatives], axis=1)
    scores = np.zeros(candidates.shape, dtype=float)
    for start in range(0, dataset.num_users, batch_size):
        stop = min(start + batch_size, dataset.num_users)
        hist = dataset.train_seqs[start:stop]
        scores[start:stop] = scorer.score_candidates(hist, candidates[start:stop])
    _check_scores(scores)
    return EvalReport.from_scores(scores[:, 0], scores[:, 1:], meta)
