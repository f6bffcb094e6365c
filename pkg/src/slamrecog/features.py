"""Dense SIFT + RGB descriptors on a multi-scale grid, and PCA reduction.

Every level of a sqrt(2) image pyramid is sampled on a 4-px grid. Each sample
gets a 4x4x8 gradient-orientation histogram over a 16x16 window (trilinear
binning, L2 -> clip 0.2 -> L2) followed by the mean RGB of the same window.
Locations are reported in continuous base-image pixel coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .mapio import ModelContainer

log = logging.getLogger(__name__)

NUM_CELLS = 4
NUM_ORIENT = 8
SIFT_DIM = NUM_CELLS * NUM_CELLS * NUM_ORIENT
RAW_DIM = SIFT_DIM + 3
CLIP = 0.2
# raw SIFT vectors below this norm are resampling round-off on flat regions
FLAT_NORM = 1e-8
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class DenseFeatureField:
    """Descriptors sampled from one image.

    ``locations`` holds ``(u, v)`` in base-image pixel coordinates,
    ``scales`` the pyramid level of each sample.
    """

    locations: np.ndarray
    scales: np.ndarray
    descriptors: np.ndarray
    image_size: Tuple[int, int]
    step: int = 4
    n_scales: int = 4
    scale_factor: float = float(np.sqrt(2.0))
    skipped_scales: int = 0

    def __len__(self):
        return len(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def subset(self, mask) -> "DenseFeatureField":
        return replace(self, locations=self.locations[mask], scales=self.scales[mask],
                       descriptors=self.descriptors[mask])


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: Optional[np.ndarray] = None

    @property
    def in_dim(self) -> int:
        return self.components.shape[1]

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    def to_container(self) -> ModelContainer:
        c = ModelContainer()
        c.add("pca_mean", self.mean)
        c.add("pca_components", self.components)
        if self.explained_variance is not None:
            c.add("pca_variance", self.explained_variance)
        c.meta = {"component": "pca", "in_dim": int(self.in_dim), "out_dim": int(self.out_dim)}
        return c

    @classmethod
    def from_container(cls, c: ModelContainer) -> "PcaModel":
        P = c.matrices["pca_components"].astype(float)
        mean = c.matrices["pca_mean"].astype(float).reshape(-1)
        if P.shape != (c.meta["out_dim"], c.meta["in_dim"]) or mean.shape[0] != P.shape[1]:
            raise ValueError("PCA container dimensions disagree with manifest")
        var = c.matrices.get("pca_variance")
        return cls(mean, P, None if var is None else var.astype(float).reshape(-1))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.in_dim:
            raise ValueError(f"dimension mismatch: PCA expects {self.in_dim}-D input, got shape {X.shape}")
        return (X - self.mean) @ self.components.T


# ------------------------------------------------------------------ pyramid

def level_size(width: int, height: int, level: int, factor: float = np.sqrt(2.0)) -> Tuple[int, int]:
    s = factor ** level
    return int(round(width / s)), int(round(height / s))


def _resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Anti-aliased bilinear resize using pixel-centre alignment.

    Uses the exact per-axis ratio so the operation commutes with flips and
    90-degree rotations.
    """
    h, w = img.shape[:2]
    if (out_w, out_h) == (w, h):
        return img.astype(float, copy=True)
    fx, fy = w / out_w, h / out_h
    sig = [max(0.0, (fy - 1) / 2), max(0.0, (fx - 1) / 2)]
    ys = (np.arange(out_h) + 0.5) * fy - 0.5
    xs = (np.arange(out_w) + 0.5) * fx - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        blurred = ndimage.gaussian_filter(img.astype(float), sig, mode="nearest")
        return ndimage.map_coordinates(blurred, [gy, gx], order=1, mode="nearest")
    out = np.empty((out_h, out_w, img.shape[2]))
    for c in range(img.shape[2]):
        blurred = ndimage.gaussian_filter(img[..., c].astype(float), sig, mode="nearest")
        out[..., c] = ndimage.map_coordinates(blurred, [gy, gx], order=1, mode="nearest")
    return out


def grid_centers(length: int, step: int = 4, support: int = 16) -> np.ndarray:
    """Window centres ``step*i + step//2`` whose support fits inside ``[0, length)``."""
    c = np.arange(length // step) * step + step // 2
    half = support // 2
    return c[(c - half >= 0) & (c + half <= length)]


def _cell_weights(support: int = 16) -> np.ndarray:
    """(support, NUM_CELLS) bilinear weights of each window pixel to each cell."""
    cell = support / NUM_CELLS
    p = np.arange(support)[:, None]
    centers = (np.arange(NUM_CELLS) * cell + (cell - 1) / 2)[None, :]
    return np.clip(1.0 - np.abs(p - centers) / cell, 0.0, None)


def _orientation_channels(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    t = theta / (2 * np.pi / NUM_ORIENT)
    b0 = np.floor(t).astype(np.int64)
    frac = t - b0
    b0 %= NUM_ORIENT
    b1 = (b0 + 1) % NUM_ORIENT
    O = np.zeros((NUM_ORIENT,) + gray.shape)
    rows, cols = np.indices(gray.shape)
    O[b0, rows, cols] = mag * (1 - frac)
    O[b1, rows, cols] += mag * frac
    return O


def _sift_at(gray: np.ndarray, xs: np.ndarray, ys: np.ndarray, support: int) -> np.ndarray:
    """SIFT descriptors for every (y, x) combination of window centres."""
    O = _orientation_channels(gray)
    W = _cell_weights(support)
    half = support // 2
    x0 = xs - half
    y0 = ys - half
    A = np.zeros((NUM_ORIENT, gray.shape[0], len(xs), NUM_CELLS))
    for p in range(support):
        cols = O[:, :, x0 + p]
        for j in np.nonzero(W[p])[0]:
            A[..., j] += W[p, j] * cols
    B = np.zeros((NUM_ORIENT, len(ys), len(xs), NUM_CELLS, NUM_CELLS))
    for q in range(support):
        rows = A[:, y0 + q]
        for j in np.nonzero(W[q])[0]:
            B[:, :, :, j, :] += W[q, j] * rows
    # -> (ny, nx, cell_y, cell_x, orientation)
    desc = B.transpose(1, 2, 3, 4, 0).reshape(len(ys) * len(xs), SIFT_DIM)
    return normalize_sift(desc)


def normalize_sift(desc: np.ndarray, clip: float = CLIP) -> np.ndarray:
    desc = np.array(desc, dtype=float)
    n = np.linalg.norm(desc, axis=1, keepdims=True)
    flat = n[:, 0] <= FLAT_NORM
    desc[flat] = 0.0
    np.divide(desc, n, out=desc, where=n > FLAT_NORM)
    np.minimum(desc, clip, out=desc)
    n = np.linalg.norm(desc, axis=1, keepdims=True)
    np.divide(desc, n, out=desc, where=n > 0)
    return desc


def _window_means(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, support: int) -> np.ndarray:
    """Mean colour over each ``support``-sized window via a summed-area table."""
    sat = np.zeros((img.shape[0] + 1, img.shape[1] + 1, img.shape[2]))
    sat[1:, 1:] = img.cumsum(0).cumsum(1)
    half = support // 2
    X0, Y0 = np.meshgrid(xs - half, ys - half)
    X0, Y0 = X0.ravel(), Y0.ravel()
    X1, Y1 = X0 + support, Y0 + support
    s = sat[Y1, X1] - sat[Y0, X1] - sat[Y1, X0] + sat[Y0, X0]
    return s / float(support * support)


def extract_dense(image: np.ndarray, step: int = 4, n_scales: int = 4,
                  scale_factor: float = float(np.sqrt(2.0)), support: int = 16) -> DenseFeatureField:
    """Dense 131-D SIFT+RGB field over an ``n_scales`` pyramid."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {img.shape}")
    rgb = img.astype(float) / 255.0 if img.dtype == np.uint8 else img.astype(float)
    H, W = rgb.shape[:2]
    locs, scales, descs = [], [], []
    skipped = 0
    for level in range(n_scales):
        w_s, h_s = level_size(W, H, level, scale_factor)
        xs = grid_centers(w_s, step, support)
        ys = grid_centers(h_s, step, support)
        if len(xs) == 0 or len(ys) == 0:
            skipped += 1
            continue
        lvl = _resize(rgb, w_s, h_s)
        gray = lvl @ LUMA
        sift = _sift_at(gray, xs, ys, support)
        color = _window_means(lvl, xs, ys, support)
        U, V = np.meshgrid(xs * (W / w_s), ys * (H / h_s))
        locs.append(np.stack([U.ravel(), V.ravel()], axis=1))
        scales.append(np.full(len(sift), level, dtype=np.int64))
        descs.append(np.hstack([sift, color]))
    if skipped:
        log.warning("skipped %d pyramid level(s): image %dx%d smaller than descriptor support",
                    skipped, W, H)
    if descs:
        return DenseFeatureField(np.vstack(locs), np.concatenate(scales), np.vstack(descs),
                                 (W, H), step, n_scales, scale_factor, skipped)
    return DenseFeatureField(np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros((0, RAW_DIM)),
                             (W, H), step, n_scales, scale_factor, skipped)


# ---------------------------------------------------------------------- PCA

def fit_pca(samples: np.ndarray, out_dim: int = 80, rank_tol: float = 1e-10) -> PcaModel:
    X = np.asarray(samples, dtype=float)
    n, d = X.shape
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds input dimension {d}")
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    scale = evals[0] if evals[0] > 0 else 1.0
    rank = int(np.sum(evals > rank_tol * scale)) if evals[0] > 0 else 0
    if rank < out_dim:
        raise ValueError(f"rank-deficient data: achieved rank {rank} < out_dim {out_dim}")
    P = evecs[:, :out_dim].T.copy()
    idx = np.argmax(np.abs(P), axis=1)
    signs = np.sign(P[np.arange(out_dim), idx])
    P *= signs[:, None]
    return PcaModel(mean, P, evals[:out_dim].copy())


def apply_pca(model: PcaModel, field: DenseFeatureField) -> DenseFeatureField:
    if field.dim != model.in_dim:
        raise ValueError(f"dimension mismatch: field has {field.dim}-D descriptors, "
                         f"PCA expects {model.in_dim}")
    return replace(field, descriptors=model.transform(field.descriptors))


def subsample(X: np.ndarray, max_n: int, seed: int) -> np.ndarray:
    """Seeded uniform subsample without replacement (order-preserving shuffle)."""
    rng = np.random.default_rng(seed)
    if len(X) <= max_n:
        return X[rng.permutation(len(X))]
    return X[rng.choice(len(X), size=max_n, replace=False)]


# --------------------------------------------------------------- debug dumps

def save_field(field: DenseFeatureField, path) -> None:
    """Dump a field as ``.npz`` with keys locations, scales, descriptors, meta.

    ``meta`` is int64 ``[width, height, step, n_scales, skipped_scales]``;
    the scale factor is stored separately as ``scale_factor``.
    """
    meta = np.array([field.image_size[0], field.image_size[1], field.step,
                     field.n_scales, field.skipped_scales], dtype=np.int64)
    np.savez(path, locations=field.locations, scales=field.scales,
             descriptors=field.descriptors, meta=meta,
             scale_factor=np.array([field.scale_factor]))


def load_field(path) -> DenseFeatureField:
    with np.load(path) as z:
        m = z["meta"]
        return DenseFeatureField(z["locations"], z["scales"], z["descriptors"],
                                 (int(m[0]), int(m[1])), int(m[2]), int(m[3]),
                                 float(z["scale_factor"][0]), int(m[4]))
