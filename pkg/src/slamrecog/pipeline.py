"""End-to-end stages shared by the CLI and the acceptance harness."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import aggregation
from .classifier import OvaClassifier, TrainConfig, mine_hard_negatives, predict_proba, train
from .codebook import Vocabulary, fit_kmeans
from .config import PipelineConfig
from .encoding import build_flair, normalize_many, query_flair_many
from .evalkit.metrics import Detection
from .features import DenseFeatureField, PcaModel, apply_pca, extract_dense, fit_pca, subsample
from .geometry import BoundingBox, iou_matrix
from .mapio import Scene, load_image, load_model, save_model
from .proposals import ObjectSeed, Proposal, generate_proposals

log = logging.getLogger(__name__)


def _map(fn: Callable, items: Sequence, workers: int) -> List:
    """Ordered map, optionally over a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def frames_of(scene: Scene, cfg: PipelineConfig):
    return scene.frames[::cfg.frame_stride]


def raw_features(image: np.ndarray, cfg: PipelineConfig) -> DenseFeatureField:
    return extract_dense(image, cfg.step, cfg.n_scales, cfg.scale_factor, cfg.support)


# ------------------------------------------------------------------ models

@dataclass
class PipelineModel:
    pca: PcaModel
    vocab: Vocabulary
    classifier: Optional[OvaClassifier] = None

    def save(self, directory, cfg: Optional[PipelineConfig] = None) -> None:
        d = Path(directory)
        save_stage(self.pca, d / "pca", cfg)
        save_stage(self.vocab, d / "vocab", cfg)
        if self.classifier is not None:
            save_stage(self.classifier, d / "classifier", cfg)

    @classmethod
    def load(cls, directory, need_classifier: bool = True) -> "PipelineModel":
        d = Path(directory)
        pca = PcaModel.from_container(load_model(d / "pca"))
        vocab = Vocabulary.from_container(load_model(d / "vocab"))
        clf = None
        if need_classifier or (d / "classifier").exists():
            clf = OvaClassifier.from_container(load_model(d / "classifier"))
        return cls(pca, vocab, clf)


def save_stage(obj, directory, cfg: Optional[PipelineConfig] = None) -> Path:
    """Write one model component, recording the seed and full config in its manifest."""
    c = obj.to_container()
    if cfg is not None:
        c.meta["seed"] = int(cfg.seed)
        c.meta["config"] = {k: list(v) if isinstance(v, tuple) else v
                            for k, v in asdict(cfg).items()}
    return save_model(c, directory)


def through_container(obj):
    """Round-trip a model through its float32 container so memory matches disk."""
    return type(obj).from_container(obj.to_container())


def train_pca(scenes: Sequence[Scene], cfg: PipelineConfig) -> PcaModel:
    fields = _map(lambda f: raw_features(load_image(f.image_path), cfg),
                  [f for s in scenes for f in frames_of(s, cfg)], cfg.workers)
    X = np.vstack([f.descriptors for f in fields])
    X = subsample(X, cfg.pca_samples, cfg.seed)
    return through_container(fit_pca(X, cfg.pca_dim))


def train_vocab(scenes: Sequence[Scene], pca: PcaModel, cfg: PipelineConfig) -> Vocabulary:
    fields = _map(lambda f: apply_pca(pca, raw_features(load_image(f.image_path), cfg)),
                  [f for s in scenes for f in frames_of(s, cfg)], cfg.workers)
    X = np.vstack([f.descriptors for f in fields])
    X = subsample(X, cfg.vocab_samples, cfg.seed)
    vocab = fit_kmeans(X, cfg.vocab_k, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_tol)
    return through_container(vocab)


# ---------------------------------------------------------------- encoding

def encode_boxes(image: np.ndarray, boxes: Sequence[BoundingBox], pca: PcaModel,
                 vocab: Vocabulary, cfg: PipelineConfig) -> np.ndarray:
    """Normalised pyramid VLAD descriptors ``(len(boxes), K*D*S)`` for one frame."""
    if not boxes:
        return np.zeros((0, cfg.vocab_k * pca.out_dim * sum(p * p for p in cfg.pyramid)), np.float32)
    field_ = apply_pca(pca, raw_features(image, cfg))
    grid = build_flair(field_, vocab, (image.shape[1], image.shape[0]), cfg.cell_size,
                       np.dtype(cfg.table_dtype))
    block = vocab.k * vocab.dim if cfg.per_block_norm else 0
    out = [normalize_many(chunk, cfg.ssr_alpha, block).astype(np.float32)
           for chunk in query_flair_many(grid, boxes, cfg.pyramid)]
    return np.vstack(out)


def sample_background_boxes(gt: Sequence[BoundingBox], width: int, height: int, n: int,
                            rng: np.random.Generator, max_iou: float = 0.3,
                            min_size: float = 20.0) -> List[BoundingBox]:
    """Random boxes overlapping every ground-truth box by less than ``max_iou``."""
    out: List[BoundingBox] = []
    gt_arr = np.array([b.as_tuple() for b in gt]).reshape(-1, 4)
    hi = max(min_size + 1, min(width, height) / 2)
    for _ in range(50 * max(n, 1)):
        if len(out) >= n:
            break
        w, h = rng.uniform(min_size, hi, 2)
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        box = BoundingBox(float(np.floor(x0)), float(np.floor(y0)),
                          float(np.floor(x0 + w)), float(np.floor(y0 + h)))
        if len(gt_arr) and iou_matrix(np.array([box.as_tuple()]), gt_arr).max() >= max_iou:
            continue
        out.append(box)
    return out


@dataclass
class TrainingSet:
    X: np.ndarray
    labels: List[str]
    pool: np.ndarray


def collect_training(scenes: Sequence[Scene], pca: PcaModel, vocab: Vocabulary,
                     cfg: PipelineConfig) -> TrainingSet:
    """Encode ground-truth boxes as positives, random windows as background.

    Each frame also contributes a disjoint pool of background windows used
    only for hard-negative mining.
    """
    jobs = []
    for si, scene in enumerate(scenes):
        for f in frames_of(scene, cfg):
            anns = [a for a in scene.annotations if a.frame_id == f.frame_id]
            jobs.append((si, scene.intrinsics, f, anns))

    def work(job):
        si, intr, f, anns = job
        rng = np.random.default_rng([cfg.seed, si, f.frame_id])
        gt = [a.box for a in anns]
        n_bg = cfg.background_per_frame
        bg = sample_background_boxes(gt, intr.width, intr.height,
                                     n_bg + cfg.hard_negative_pool_per_frame, rng,
                                     min_size=cfg.min_box)
        boxes = gt + bg
        image = load_image(f.image_path)
        X = encode_boxes(image, boxes, pca, vocab, cfg)
        labels = [a.label for a in anns] + [cfg.background_label] * len(bg[:n_bg])
        return X[:len(gt) + len(bg[:n_bg])], labels, X[len(gt) + len(bg[:n_bg]):]

    parts = _map(work, jobs, cfg.workers)
    dim = cfg.vocab_k * pca.out_dim * sum(p * p for p in cfg.pyramid)
    X = np.vstack([p[0] for p in parts]) if parts else np.zeros((0, dim), np.float32)
    labels = [l for p in parts for l in p[1]]
    pool = np.vstack([p[2] for p in parts]) if parts else np.zeros((0, dim), np.float32)
    return TrainingSet(X, labels, pool)


def train_classifier(data: TrainingSet, cfg: PipelineConfig,
                     classes: Optional[Sequence[str]] = None) -> OvaClassifier:
    tc = TrainConfig(cfg.l2_reg_alpha, cfg.epochs, cfg.seed, cfg.hard_negative_epochs,
                     cfg.background_label)
    if classes is None:
        objs = sorted(set(data.labels) - {cfg.background_label})
        classes = objs + [cfg.background_label]
    model = train(data.X, data.labels, tc, classes)
    if cfg.hard_negative_epochs and len(data.pool):
        model = mine_hard_negatives(model, data.pool, data.X, data.labels)
    return through_container(model)


# ------------------------------------------------------------- recognition

@dataclass
class RecognitionResult:
    seeds: List[ObjectSeed]
    proposals: Dict[int, List[Proposal]]
    probabilities: Dict[Tuple[int, int], np.ndarray]
    evidence: Dict[int, aggregation.ObjectEvidence]
    labels: List[str]
    seed_labels: Dict[int, str] = field(default_factory=dict)
    frame_labels: Dict[Tuple[int, int], str] = field(default_factory=dict)
    background: str = "background"

    def predictions(self) -> List[dict]:
        return aggregation.predictions_to_json(self.evidence, self.labels)

    def detections(self, mode: str = "multi", include_background: bool = False) -> List[Detection]:
        """Per-proposal detections labelled per frame (``single``) or per seed (``multi``)."""
        out = []
        for fid in sorted(self.proposals):
            for p in self.proposals[fid]:
                probs = self.probabilities[(fid, p.seed_id)]
                if mode == "single":
                    k = int(np.argmax(probs))
                    score = float(probs[k])
                else:
                    k, post = aggregation.decide(self.evidence[p.seed_id])
                    score = float(post[k])
                label = self.labels[k]
                if not include_background and label == self.background:
                    continue
                out.append(Detection(fid, p.box, label, score, p.seed_id))
        return out


def propose(scene: Scene, cfg: PipelineConfig):
    return generate_proposals(scene.cloud, frames_of(scene, cfg), scene.intrinsics, cfg.base_eps,
                              cfg.color_weight, cfg.min_pts, cfg.min_visible_points,
                              cfg.min_box, cfg.iou_thresh)


def recognize(scene: Scene, model: PipelineModel, cfg: PipelineConfig,
              proposals=None) -> RecognitionResult:
    """Propose, encode and classify every frame, then fuse evidence per seed."""
    if model.classifier is None:
        raise ValueError("recognition needs a trained classifier")
    seeds, per_frame = proposals if proposals is not None else propose(scene, cfg)
    frames = [f for f in frames_of(scene, cfg) if per_frame.get(f.frame_id)]

    def work(f):
        props = per_frame[f.frame_id]
        X = encode_boxes(load_image(f.image_path), [p.box for p in props],
                         model.pca, model.vocab, cfg)
        return f.frame_id, props, predict_proba(model.classifier, X, cfg.prob_floor)

    probabilities: Dict[Tuple[int, int], np.ndarray] = {}
    seed_views: Dict[int, list] = {}
    labels = list(model.classifier.labels)
    frame_labels = {}
    for fid, props, P in _map(work, frames, cfg.workers):
        for p, probs in zip(props, P):
            probabilities[(fid, p.seed_id)] = probs
            frame_labels[(fid, p.seed_id)] = labels[int(np.argmax(probs))]
            seed_views.setdefault(p.seed_id, []).append((fid, probs))
    evidence = aggregation.aggregate(seed_views, len(labels))
    seed_labels = {sid: labels[aggregation.decide(ev)[0]] for sid, ev in evidence.items()}
    return RecognitionResult(seeds, per_frame, probabilities, evidence, labels,
                             seed_labels, frame_labels, cfg.background_label)


# --------------------------------------------------------------- benchmark

def random_boxes(n: int, width: int, height: int, rng: np.random.Generator,
                 min_size: int = 20) -> List[BoundingBox]:
    out = []
    for _ in range(n):
        w = int(rng.integers(min_size, width + 1))
        h = int(rng.integers(min_size, height + 1))
        x0 = int(rng.integers(0, width - w + 1))
        y0 = int(rng.integers(0, height - h + 1))
        out.append(BoundingBox(x0, y0, x0 + w, y0 + h))
    return out


def _time_queries(grid, boxes, pyramid, repeats: int) -> float:
    """Best-of-``repeats`` wall time to encode ``boxes``."""
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        for _chunk in query_flair_many(grid, boxes, pyramid):
            pass
        best = min(best, time.perf_counter() - t)
    return float(best)


def benchmark(image: np.ndarray, pca: PcaModel, vocab: Vocabulary, cfg: PipelineConfig,
              counts: Sequence[int] = (10, 100, 1000), area_boxes: int = 100,
              repeats: int = 3) -> List[dict]:
    """Time extraction, table build and box queries on one frame.

    Rows carry ``stage``, ``n_boxes``, ``total_s`` and ``per_box_s``. Query
    rows cover random boxes at each count plus equal-size batches of
    full-image and 20x20 boxes.
    """
    h, w = image.shape[:2]
    rng = np.random.default_rng(cfg.seed)
    rows = []
    t = time.perf_counter()
    field_ = apply_pca(pca, raw_features(image, cfg))
    t_extract = time.perf_counter() - t
    rows.append({"stage": "extract", "n_boxes": 0, "total_s": t_extract, "per_box_s": 0.0})
    t = time.perf_counter()
    grid = build_flair(field_, vocab, (w, h), cfg.cell_size, np.dtype(cfg.table_dtype))
    t_build = time.perf_counter() - t
    rows.append({"stage": "build", "n_boxes": 0, "total_s": t_build, "per_box_s": 0.0})
    # warm-up so first-touch page faults are not charged to the smallest batch
    _time_queries(grid, random_boxes(10, w, h, rng), cfg.pyramid, 1)
    for n in counts:
        total = _time_queries(grid, random_boxes(n, w, h, rng), cfg.pyramid, repeats)
        rows.append({"stage": "query_random", "n_boxes": n, "total_s": total, "per_box_s": total / n})
    full = [BoundingBox(0, 0, w, h)] * area_boxes
    total = _time_queries(grid, full, cfg.pyramid, repeats)
    rows.append({"stage": "query_full", "n_boxes": area_boxes, "total_s": total,
                 "per_box_s": total / area_boxes})
    small = []
    for _ in range(area_boxes):
        x0 = int(rng.integers(0, w - 20 + 1))
        y0 = int(rng.integers(0, h - 20 + 1))
        small.append(BoundingBox(x0, y0, x0 + 20, y0 + 20))
    total = _time_queries(grid, small, cfg.pyramid, repeats)
    rows.append({"stage": "query_20x20", "n_boxes": area_boxes, "total_s": total,
                 "per_box_s": total / area_boxes})
    return rows
