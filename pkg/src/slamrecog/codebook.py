"""k-means visual vocabulary and nearest-centre assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .mapio import ModelContainer

_CHUNK = 4096


@dataclass
class Vocabulary:
    centers: np.ndarray
    iterations: int = 0
    objective: float = float("nan")
    seed: Optional[int] = None
    history: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float)
        if self.centers.ndim != 2 or self.centers.shape[0] < 2:
            raise ValueError("a vocabulary needs at least 2 centres")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("non-finite vocabulary centre")
        if len(np.unique(self.centers, axis=0)) != len(self.centers):
            raise ValueError("vocabulary centres must be distinct")

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def assign(self, x) -> int:
        return assign(self, x)

    def to_container(self) -> ModelContainer:
        c = ModelContainer()
        c.add("vocab_centers", self.centers)
        c.meta = {"component": "vocabulary", "k": int(self.k), "dim": int(self.dim),
                  "iterations": int(self.iterations), "objective": float(self.objective),
                  "seed": self.seed, "history": [float(h) for h in self.history]}
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "Vocabulary":
        C = c.matrices["vocab_centers"].astype(float)
        m = c.meta
        if C.shape != (m["k"], m["dim"]):
            raise ValueError("vocabulary container dimensions disagree with manifest")
        return cls(C, m.get("iterations", 0), m.get("objective", float("nan")), m.get("seed"),
                   list(m.get("history", [])))

    def assign_many(self, X) -> np.ndarray:
        return assign_many(self.centers, X)


def assign(vocab: Vocabulary, x) -> int:
    """Index of the Euclidean-nearest centre; ties go to the lowest index."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != vocab.dim:
        raise ValueError(f"dimension mismatch: vocabulary is {vocab.dim}-D, query is {x.shape[0]}-D")
    d = ((vocab.centers - x) ** 2).sum(axis=1)
    return int(np.argmin(d))


def _sq_dists(X: np.ndarray, C: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    d = (X ** 2).sum(1)[:, None] - 2.0 * (X @ C.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def assign_many(centers: np.ndarray, X, return_dist: bool = False):
    """Vectorised nearest-centre assignment.

    Uses the expanded distance form and re-checks near-ties with exact
    differences, so results agree with an exhaustive scan.
    """
    C = np.asarray(centers, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != C.shape[1]:
        raise ValueError(f"dimension mismatch: centres are {C.shape[1]}-D, data has shape {X.shape}")
    n = len(X)
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    c_sq = (C ** 2).sum(1)
    for s in range(0, n, _CHUNK):
        xb = X[s:s + _CHUNK]
        d = _sq_dists(xb, C, c_sq)
        lab = np.argmin(d, axis=1)
        if C.shape[0] > 1:
            part = np.partition(d, 1, axis=1)
            scale = (xb ** 2).sum(1) + c_sq.max() + 1.0
            near = np.nonzero(part[:, 1] - part[:, 0] <= 1e-9 * scale)[0]
            for i in near:
                exact = ((C - xb[i]) ** 2).sum(1)
                lab[i] = int(np.argmin(exact))
                d[i] = exact
        labels[s:s + _CHUNK] = lab
        dist[s:s + _CHUNK] = d[np.arange(len(xb)), lab]
    return (labels, dist) if return_dist else labels


def objective(X: np.ndarray, centers: np.ndarray) -> float:
    _, d = assign_many(centers, X, return_dist=True)
    return float(d.sum())


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    idx = [int(rng.integers(n))]
    d2 = ((X - X[idx[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("degenerate data: fewer distinct points than clusters")
        j = int(rng.choice(n, p=d2 / total))
        if d2[j] <= 0:
            raise ValueError("degenerate data: fewer distinct points than clusters")
        idx.append(j)
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(1))
    return X[idx].copy()


def fit_kmeans(samples, k: int = 64, seed: int = 0, max_iter: int = 100,
               tol: float = 1e-4) -> Vocabulary:
    """k-means++ seeding followed by Lloyd iterations.

    ``history[0]`` is the objective of the seeding; ``history[i]`` the
    objective after the i-th update step.
    """
    X = np.asarray(samples, dtype=float)
    n = len(X)
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    labels, dist = assign_many(C, X, return_dist=True)
    history = [float(dist.sum())]
    it = 0
    for it in range(1, max_iter + 1):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        newC = C.copy()
        nz = counts > 0
        newC[nz] = sums[nz] / counts[nz, None]
        empty = np.nonzero(~nz)[0]
        if len(empty):
            # re-seed from points farthest from their current centre
            taken = set()
            order = np.argsort(-dist, kind="stable")
            pos = 0
            for e in empty:
                while pos < n and (dist[order[pos]] <= 0 or order[pos] in taken):
                    pos += 1
                if pos >= n:
                    raise ValueError("degenerate data: cannot re-seed empty cluster")
                taken.add(order[pos])
                newC[e] = X[order[pos]]
        C = newC
        labels, dist = assign_many(C, X, return_dist=True)
        obj = float(dist.sum())
        prev = history[-1]
        history.append(obj)
        if prev <= 0 or (prev - obj) / prev < tol:
            break
    if len(np.unique(C, axis=0)) != k:
        raise ValueError("degenerate data: duplicate centres after fitting")
    return Vocabulary(C, iterations=it, objective=history[-1], seed=seed, history=history)
