"""Multi-view maximum-likelihood labelling of object seeds.

Per-view class probabilities are treated as likelihoods under a uniform
prior; the label of a seed maximises the sum of their logs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class ObjectEvidence:
    seed_id: int
    n_classes: int
    views: Tuple[Tuple[int, Tuple[float, ...]], ...] = ()
    loglik: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.loglik is None:
            object.__setattr__(self, "loglik", np.zeros(self.n_classes))

    @property
    def view_count(self) -> int:
        return len(self.views)


def accumulate(evidence: ObjectEvidence, probs, frame_id: int = -1,
               sum_tol: float = 1e-6) -> ObjectEvidence:
    p = np.asarray(probs, dtype=float).reshape(-1)
    if p.shape[0] != evidence.n_classes:
        raise ValueError(f"expected {evidence.n_classes} class probabilities, got {p.shape[0]}")
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise ValueError("class probabilities must be strictly positive and finite")
    if abs(p.sum() - 1.0) > sum_tol:
        raise ValueError(f"class probabilities sum to {p.sum()}, not 1")
    return ObjectEvidence(evidence.seed_id, evidence.n_classes,
                          evidence.views + ((frame_id, tuple(p.tolist())),),
                          evidence.loglik + np.log(p))


def decide(evidence: ObjectEvidence, log_prior=None) -> Tuple[int, np.ndarray]:
    """Arg-max label (lowest index on ties) and softmax posterior for reporting."""
    if evidence.view_count == 0:
        raise ValueError("no evidence")
    score = evidence.loglik if log_prior is None else evidence.loglik + np.asarray(log_prior)
    label = int(np.argmax(score))
    z = score - score.max()
    post = np.exp(z)
    return label, post / post.sum()


def aggregate(seed_views: Dict[int, List[Tuple[int, np.ndarray]]], n_classes: int) -> Dict[int, ObjectEvidence]:
    """Build evidence for each seed from ``{seed_id: [(frame_id, probs), ...]}``."""
    out = {}
    for sid in sorted(seed_views):
        ev = ObjectEvidence(sid, n_classes)
        for fid, p in seed_views[sid]:
            ev = accumulate(ev, p, fid)
        out[sid] = ev
    return out


def predictions_to_json(evidence: Dict[int, ObjectEvidence], labels: Sequence[str]) -> List[dict]:
    rows = []
    for sid, ev in sorted(evidence.items()):
        if ev.view_count == 0:
            continue
        k, post = decide(ev)
        rows.append({"seed_id": int(sid), "label": labels[k],
                     "posterior": {lab: float(p) for lab, p in zip(labels, post)},
                     "view_count": ev.view_count})
    return rows


def write_predictions(rows: List[dict], path) -> None:
    with open(path, "w") as fh:
        json.dump(rows, fh, indent=1, sort_keys=True)
        fh.write("\n")


def simulate_views(rng: np.random.Generator, truth: np.ndarray, n_views: int, n_classes: int,
                   accuracy: float, confidence: float = 0.6) -> np.ndarray:
    """Synthetic per-view probabilities ``(trials, n_views, n_classes)``.

    Each view names the true class with probability ``accuracy`` (else a
    uniformly drawn wrong class), puts ``confidence`` on the named class
    and spreads the rest evenly.
    """
    n = len(truth)
    wrong = (truth[:, None] + rng.integers(1, n_classes, (n, n_views))) % n_classes
    named = np.where(rng.random((n, n_views)) < accuracy, truth[:, None], wrong)
    P = np.full((n, n_views, n_classes), (1.0 - confidence) / (n_classes - 1))
    np.put_along_axis(P, named[..., None], confidence, axis=2)
    return P


def monte_carlo_accuracy(n_trials: int = 10_000, n_views: int = 10, n_classes: int = 5,
                         accuracy: float = 0.7, confidence: float = 0.6, seed: int = 0):
    """Single-view and aggregated accuracy of :func:`decide` on simulated views."""
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, n_classes, n_trials)
    P = simulate_views(rng, truth, n_views, n_classes, accuracy, confidence)
    single = float(np.mean(np.argmax(P[:, 0], axis=1) == truth))
    hits = 0
    for t in range(n_trials):
        ev = ObjectEvidence(t, n_classes)
        for v in range(n_views):
            ev = accumulate(ev, P[t, v], v)
        hits += decide(ev)[0] == truth[t]
    return single, float(hits) / n_trials
