"""One-vs-all logistic regression trained by SGD, with hard-negative mining.

Each class row minimises ``mean(log(1 + exp(-y w.x))) + alpha/2 |w|^2``
(bias unregularised) with the step size ``1 / (alpha (t0 + t))``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Sequence

import numpy as np

from .mapio import ModelContainer

log = logging.getLogger(__name__)

BACKGROUND = "background"
PROB_FLOOR = 1e-9


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_loss(w, x, y) -> float:
    """``log(1 + exp(-y w.x))`` computed stably."""
    return float(np.logaddexp(0.0, -y * np.dot(w, x)))


def logistic_grad(w, x, y) -> np.ndarray:
    """Gradient of :func:`logistic_loss` with respect to ``w``."""
    z = y * np.dot(w, x)
    return -y * float(sigmoid(np.array(-z))) * np.asarray(x, dtype=float)


@dataclass
class TrainConfig:
    l2_reg_alpha: float = 1e-5
    epochs: int = 10
    seed: int = 0
    hard_negative_epochs: int = 2
    background: str = BACKGROUND
    eta0: Optional[float] = None
    calibration_samples: int = 1000


@dataclass
class OvaClassifier:
    labels: List[str]
    weights: np.ndarray
    bias: np.ndarray
    config: TrainConfig = field(default_factory=TrainConfig)
    t: int = 0
    t0: float = 1.0
    history: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("class labels must be unique")
        if len(self.labels) < 2:
            raise ValueError("need at least two classes")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite classifier weights")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        if X.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: classifier expects {self.dim}-D input, got {X.shape[1]}")
        return X @ self.weights.T + self.bias

    def predict_proba(self, X) -> np.ndarray:
        return predict_proba(self, X)

    def predict(self, X) -> List[str]:
        return [self.labels[i] for i in np.argmax(self.decision_function(X), axis=1)]

    def to_container(self) -> ModelContainer:
        c = ModelContainer()
        c.add("clf_weights", self.weights)
        c.add("clf_bias", self.bias)
        c.meta = {"component": "classifier", "labels": list(self.labels),
                  "dim": int(self.dim), "t": int(self.t), "t0": float(self.t0),
                  "hyperparameters": asdict(self.config), "history": list(self.history)}
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "OvaClassifier":
        m = c.meta
        W = c.matrices["clf_weights"].astype(float)
        b = c.matrices["clf_bias"].astype(float).reshape(-1)
        if W.shape != (len(m["labels"]), m["dim"]) or b.shape[0] != len(m["labels"]):
            raise ValueError("classifier container dimensions disagree with manifest")
        return cls(list(m["labels"]), W, b, TrainConfig(**m["hyperparameters"]),
                   int(m.get("t", 0)), float(m.get("t0", 1.0)), list(m.get("history", [])))


def predict_proba(model: OvaClassifier, X, floor: float = PROB_FLOOR) -> np.ndarray:
    """Per-class sigmoids floored at ``floor`` and renormalised to sum to one."""
    p = sigmoid(model.decision_function(X))
    p = np.clip(p, floor, 1.0)
    return p / p.sum(axis=1, keepdims=True)


def objective(W, b, X, Y, alpha, mask=None) -> np.ndarray:
    """Full-batch per-class objective ``mean loss + alpha/2 |w|^2``."""
    S = X @ W.T + b
    L = np.logaddexp(0.0, -Y * S)
    if mask is None:
        mean = L.mean(axis=0)
    else:
        mean = (L * mask).sum(0) / np.maximum(mask.sum(0), 1)
    return mean + 0.5 * alpha * (W ** 2).sum(1)


def _sgd_pass(V, scale, b, X, Y, M, order, alpha, t0, t):
    """One SGD pass in place; ``W = V * scale[:, None]``. Returns new ``t``."""
    for i in order:
        x = X[i].astype(float)
        m = M[i]
        s = (V @ x) * scale + b
        y = Y[i]
        # d/ds log(1 + exp(-y s))
        g = -y * sigmoid(-y * s) * m
        eta = 1.0 / (alpha * (t0 + t))
        scale *= 1.0 - eta * alpha * m
        V -= np.outer(eta * g / scale, x)
        b -= eta * g
        t += 1
        small = scale < 1e-9
        if np.any(small):
            V[small] *= scale[small, None]
            scale[small] = 1.0
    return t


def _calibrate_eta0(X, Y, M, alpha, rng, n_samples) -> float:
    """Pick the initial step by trying factors of 2 on a subsample (Bottou's heuristic)."""
    idx = rng.permutation(len(X))[:n_samples]
    Xs, Ys, Ms = X[idx], Y[idx], M[idx]

    def cost(eta):
        C, d = Ys.shape[1], X.shape[1]
        V, scale, b = np.zeros((C, d)), np.ones(C), np.zeros(C)
        _sgd_pass(V, scale, b, Xs, Ys, Ms, range(len(Xs)), alpha, 1.0 / (eta * alpha), 0)
        return float(objective(V * scale[:, None], b, Xs.astype(float), Ys, alpha, Ms).sum())

    factor = 2.0
    lo_eta, hi_eta = 1.0, factor
    lo_cost, hi_cost = cost(lo_eta), cost(hi_eta)
    if lo_cost < hi_cost:
        while lo_cost < hi_cost and lo_eta > 1e-8:
            hi_eta, hi_cost = lo_eta, lo_cost
            lo_eta /= factor
            lo_cost = cost(lo_eta)
    elif hi_cost < lo_cost:
        while hi_cost < lo_cost and hi_eta < 1e8:
            lo_eta, lo_cost = hi_eta, hi_cost
            hi_eta *= factor
            hi_cost = cost(hi_eta)
    return lo_eta


def _check_inputs(X, labels):
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    if len(X) != len(labels):
        raise ValueError("descriptor and label counts differ")
    bad = np.nonzero(~np.all(np.isfinite(X), axis=1))[0]
    if len(bad):
        raise ValueError(f"NaN or infinite descriptor at example index {int(bad[0])}")
    return X


def _run(model: OvaClassifier, X, Y, M, epochs, rng, log_epochs=True):
    cfg = model.config
    V = model.weights.astype(float).copy()
    scale = np.ones(len(model.labels))
    b = model.bias.astype(float).copy()
    t = model.t
    for ep in range(epochs):
        order = rng.permutation(len(X))
        t = _sgd_pass(V, scale, b, X, Y, M, order, cfg.l2_reg_alpha, model.t0, t)
        if log_epochs:
            W = V * scale[:, None]
            obj = objective(W, b, X.astype(float), Y, cfg.l2_reg_alpha, M)
            epoch_no = len(model.history) // len(model.labels) + 1
            for c, lab in enumerate(model.labels):
                model.history.append({"epoch": epoch_no, "label": lab, "objective": float(obj[c])})
    model.weights = V * scale[:, None]
    model.bias = b
    model.t = t
    return model


def train(X, labels: Sequence[str], config: Optional[TrainConfig] = None,
          classes: Optional[Sequence[str]] = None) -> OvaClassifier:
    """Fit one binary logistic model per class against all other examples."""
    cfg = config or TrainConfig()
    X = _check_inputs(X, labels)
    present = sorted(set(labels))
    if len(present) < 2:
        raise ValueError(f"need at least two classes, got {present}")
    classes = list(classes) if classes is not None else present
    missing = set(present) - set(classes)
    if missing:
        raise ValueError(f"labels {sorted(missing)} not in class list")
    lab_idx = np.array([classes.index(l) for l in labels])
    Y = -np.ones((len(X), len(classes)))
    Y[np.arange(len(X)), lab_idx] = 1.0
    M = np.ones_like(Y)
    rng = np.random.default_rng(cfg.seed)
    eta0 = cfg.eta0 or _calibrate_eta0(X, Y, M, cfg.l2_reg_alpha, rng, cfg.calibration_samples)
    model = OvaClassifier(classes, np.zeros((len(classes), X.shape[1])), np.zeros(len(classes)),
                          cfg, t=0, t0=1.0 / (eta0 * cfg.l2_reg_alpha))
    return _run(model, X, Y, M, cfg.epochs, rng)


def false_positive_mask(model: OvaClassifier, X) -> np.ndarray:
    """``(n, C)`` mask of object-class scores above zero on background windows."""
    S = model.decision_function(X)
    mask = S > 0
    if model.config.background in model.labels:
        mask[:, model.labels.index(model.config.background)] = False
    return mask


def mine_hard_negatives(model: OvaClassifier, pool, X, labels: Sequence[str],
                        epochs: Optional[int] = None) -> OvaClassifier:
    """Retrain with background windows that some object class scores above zero.

    A mined window is appended as a negative only for the classes that fired on
    it; training resumes from the current weights. Stops early once a mining
    epoch finds nothing.
    """
    cfg = model.config
    epochs = cfg.hard_negative_epochs if epochs is None else epochs
    pool = np.atleast_2d(np.asarray(pool))
    if epochs <= 0 or len(pool) == 0:
        return model
    X = _check_inputs(X, labels)
    lab_idx = np.array([model.labels.index(l) for l in labels])
    C = len(model.labels)
    Y = -np.ones((len(X), C))
    Y[np.arange(len(X)), lab_idx] = 1.0
    M = np.ones_like(Y)
    bg = model.labels.index(cfg.background) if cfg.background in model.labels else None
    out = OvaClassifier(list(model.labels), model.weights.copy(), model.bias.copy(), cfg,
                        model.t, model.t0, list(model.history))
    rng = np.random.default_rng(cfg.seed + 1)
    for ep in range(epochs):
        fp = false_positive_mask(out, pool)
        hit = np.nonzero(fp.any(axis=1))[0]
        log.info("hard-negative epoch %d: %d mined windows", ep + 1, len(hit))
        if len(hit) == 0:
            break
        newY = -np.ones((len(hit), C))
        newM = fp[hit].astype(float)
        if bg is not None:
            newY[:, bg] = 1.0
            newM[:, bg] = 1.0
        X = np.vstack([X, pool[hit]])
        Y = np.vstack([Y, newY])
        M = np.vstack([M, newM])
        out = _run(out, X, Y, M, cfg.epochs, rng)
    return out


def write_training_log(model: OvaClassifier, path) -> None:
    """Per-epoch, per-class full-batch objectives as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "label", "objective"])
        for row in model.history:
            w.writerow([row["epoch"], row["label"], f"{row['objective']:.12g}"])
