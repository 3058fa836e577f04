"""Evaluation metrics: Logloss, rank-based AUC, and the relative forms
that compare a method against the logistic-regression baseline."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

PROB_CLAMP = 1e-15


def eval_logloss(y_prob, y_true) -> float:
    """Mean negative Bernoulli log likelihood; probabilities are clamped to
    [1e-15, 1 - 1e-15] so saturated predictions stay finite."""
    p = np.asarray(y_prob, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def eval_auc(scores, y_true) -> float:
    """P(score of a positive > score of a negative), ties counting half.

    Rank-based (Mann-Whitney) computation with average ranks for ties,
    O(N log N).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined without both a positive and a negative")
    _, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0  # mean of ranks inside each tie group
    ranks = avg_rank[inv]
    pos_rank_sum = ranks[y == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def relative_auc(auc_method: float, auc_baseline: float) -> float:
    """Percent change of (AUC - 0.5) relative to the baseline's (AUC - 0.5)."""
    if auc_baseline <= 0.5:
        raise ValueError(f"baseline AUC must exceed 0.5, got {auc_baseline}")
    return ((auc_method - 0.5) / (auc_baseline - 0.5) - 1.0) * 100.0


def relative_logloss(ll_method: float, ll_baseline: float) -> float:
    """Percent change of Logloss versus baseline; negative is an improvement."""
    if ll_baseline <= 0.0:
        raise ValueError(f"baseline Logloss must be positive, got {ll_baseline}")
    return (ll_method / ll_baseline - 1.0) * 100.0


@dataclass
class EvalReport:
    logloss: float
    auc: float
    n_pos: int
    n_neg: int
    relative_auc_pct: Optional[float] = None
    relative_logloss_pct: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "logloss": self.logloss,
                "auc": self.auc,
                "n_pos": self.n_pos,
                "n_neg": self.n_neg,
                "relative_auc_pct": self.relative_auc_pct,
                "relative_logloss_pct": self.relative_logloss_pct,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(y_prob, y_true, baseline: Optional[EvalReport] = None) -> EvalReport:
    """Full evaluation; relative metrics are filled in when a baseline
    report is supplied."""
    y = np.asarray(y_true)
    report = EvalReport(
        logloss=eval_logloss(y_prob, y),
        auc=eval_auc(y_prob, y),
        n_pos=int((y == 1).sum()),
        n_neg=int((y == 0).sum()),
    )
    if baseline is not None:
        report.relative_auc_pct = relative_auc(report.auc, baseline.auc)
        report.relative_logloss_pct = relative_logloss(report.logloss, baseline.logloss)
    return report
