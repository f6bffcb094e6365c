"""VLAD aggregation, FLAIR integral grids and power/L2 normalisation.

A feature belongs to grid cell ``floor(u / cell_size)``; a cell lies inside a
pixel box iff its centre pixel ``j * cell_size + cell_size // 2`` does. Box
descriptors from :func:`query_flair` follow exactly this rule, which is also
what :func:`features_in_box` applies for brute-force aggregation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .codebook import Vocabulary, assign_many
from .features import DenseFeatureField
from .geometry import BoundingBox

DEFAULT_PYRAMID = (1, 2, 4)
RAW, NORMALIZED = "raw", "ssr+l2"


@dataclass
class VladDescriptor:
    vector: np.ndarray
    state: str = RAW
    is_zero: bool = False


def pyramid_cells(pyramid: Sequence[int] = DEFAULT_PYRAMID) -> int:
    return int(sum(n * n for n in pyramid))


def _check_pyramid(pyramid):
    if not pyramid or any(n not in (1, 2, 4) for n in pyramid):
        raise ValueError(f"pyramid levels must be drawn from (1, 2, 4), got {tuple(pyramid)}")


# ----------------------------------------------------------------- VLAD

def vlad_naive(features: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    """Un-normalised VLAD: per-codeword sums of residuals, blocks in codeword order."""
    X = np.asarray(features, dtype=float).reshape(-1, vocab.dim)
    v = np.zeros((vocab.k, vocab.dim))
    if len(X):
        lab = assign_many(vocab.centers, X)
        np.add.at(v, lab, X - vocab.centers[lab])
    return v.reshape(-1)


def features_in_box(field: DenseFeatureField, box: BoundingBox, cell_size: int = 4) -> np.ndarray:
    """Boolean mask of samples whose grid cell's centre pixel lies in ``box``."""
    x0, y0, x1, y1 = snap_box(box)
    cell = np.floor(field.locations / cell_size).astype(np.int64)
    cx = cell[:, 0] * cell_size + cell_size // 2
    cy = cell[:, 1] * cell_size + cell_size // 2
    return (cx >= x0) & (cx < x1) & (cy >= y0) & (cy < y1)


def snap_box(box: BoundingBox) -> Tuple[int, int, int, int]:
    """Integer pixel box covering ``box`` (floor of minima, ceil of maxima)."""
    return (int(np.floor(box.x_min)), int(np.floor(box.y_min)),
            int(np.ceil(box.x_max)), int(np.ceil(box.y_max)))


def split_edges(lo: int, hi: int, parts: int) -> np.ndarray:
    """Split ``[lo, hi)`` into ``parts`` integer bins, remainder to the later bins."""
    w = hi - lo
    base, rem = divmod(w, parts)
    sizes = np.full(parts, base, dtype=np.int64)
    if rem:
        sizes[parts - rem:] += 1
    return lo + np.concatenate([[0], np.cumsum(sizes)])


# ------------------------------------------------------------------ FLAIR

@dataclass
class IntegralVladGrid:
    """Per-codeword summed-area tables of residual sums and counts.

    ``table[y, x, k, :D]`` is the residual sum for codeword ``k`` over cells
    ``[0, y) x [0, x)``; ``table[..., D]`` holds the matching feature count.
    """

    table: np.ndarray
    cell_size: int
    image_size: Tuple[int, int]
    k: int
    dim: int

    @property
    def cells_x(self) -> int:
        return self.table.shape[1] - 1

    @property
    def cells_y(self) -> int:
        return self.table.shape[0] - 1

    @property
    def precision(self) -> str:
        return str(self.table.dtype)

    def nbytes(self) -> int:
        return self.table.nbytes


def build_flair(field: DenseFeatureField, vocab: Vocabulary, image_size=None,
                cell_size: int = 4, dtype=np.float32) -> IntegralVladGrid:
    """Bin residuals into cells and take exclusive 2-D prefix sums per codeword.

    Accumulation runs in float64 regardless of the storage ``dtype``.
    """
    W, H = image_size if image_size is not None else field.image_size
    gx = -(-W // cell_size)
    gy = -(-H // cell_size)
    K, D = vocab.k, vocab.dim
    C = D + 1
    table = np.zeros((gy + 1, gx + 1, K, C), dtype=dtype)
    if len(field) == 0:
        return IntegralVladGrid(table, cell_size, (W, H), K, D)
    if field.dim != D:
        raise ValueError(f"dimension mismatch: field is {field.dim}-D, vocabulary {D}-D")
    loc = field.locations
    if np.any(loc < 0) or np.any(loc[:, 0] >= W) or np.any(loc[:, 1] >= H):
        raise ValueError("feature location outside image bounds")
    cx = np.floor(loc[:, 0] / cell_size).astype(np.int64)
    cy = np.floor(loc[:, 1] / cell_size).astype(np.int64)
    lab = assign_many(vocab.centers, field.descriptors)
    vals = np.empty((len(field), C))
    vals[:, :D] = field.descriptors - vocab.centers[lab]
    vals[:, D] = 1.0
    flat = (cy * gx + cx) * K + lab
    order = np.argsort(flat, kind="stable")
    keys, start = np.unique(flat[order], return_index=True)
    sums = np.add.reduceat(vals[order], start, axis=0)
    row_len = gx * K
    bounds = np.searchsorted(keys // row_len, np.arange(gy + 1))
    running = np.zeros((gx, K, C))
    row = np.zeros((row_len, C))
    for y in range(gy):
        s, e = bounds[y], bounds[y + 1]
        if e > s:
            row[:] = 0.0
            row[keys[s:e] - y * row_len] = sums[s:e]
            running += np.cumsum(row.reshape(gx, K, C), axis=0)
        table[y + 1, 1:] = running
    return IntegralVladGrid(table, cell_size, (W, H), K, D)


def _box_indices(grid: IntegralVladGrid, boxes: np.ndarray, parts: int):
    """Cell-index edges ``(n, parts+1)`` for x and y of each box at one pyramid level."""
    ex = np.stack([split_edges(b[0], b[2], parts) for b in boxes])
    ey = np.stack([split_edges(b[1], b[3], parts) for b in boxes])
    h = grid.cell_size // 2
    ix = np.clip(-((h - ex) // grid.cell_size), 0, grid.cells_x)
    iy = np.clip(-((h - ey) // grid.cell_size), 0, grid.cells_y)
    return ix, iy


def _snap_and_check(grid: IntegralVladGrid, boxes) -> np.ndarray:
    W, H = grid.image_size
    out = []
    for b in boxes:
        s = snap_box(b)
        if s[0] < 0 or s[1] < 0 or s[2] > W or s[3] > H:
            raise ValueError(f"box {b.as_tuple()} outside the {W}x{H} grid")
        out.append(s)
    return np.array(out, dtype=np.int64).reshape(-1, 4)


def query_flair_many(grid: IntegralVladGrid, boxes: Sequence[BoundingBox],
                     pyramid: Sequence[int] = DEFAULT_PYRAMID, chunk: int = 8,
                     out_dtype=np.float32) -> Iterator[np.ndarray]:
    """Yield raw pyramid descriptors for ``boxes`` in chunks of ``(n, K*D*S)``.

    Each sub-box costs four table lookups per codeword-channel whatever its area.
    Small chunks keep the gathered corners cache-resident, so per-box cost does
    not grow with the batch size.
    """
    _check_pyramid(pyramid)
    snapped = _snap_and_check(grid, boxes)
    D = grid.dim
    T = grid.table
    for s in range(0, len(snapped), chunk):
        sb = snapped[s:s + chunk]
        blocks = []
        for parts in pyramid:
            ix, iy = _box_indices(grid, sb, parts)
            G = T[iy[:, :, None], ix[:, None, :], :, :D].astype(np.float64)
            v = G[:, 1:, 1:] - G[:, :-1, 1:] - G[:, 1:, :-1] + G[:, :-1, :-1]
            blocks.append(v.reshape(len(sb), -1))
        yield np.concatenate(blocks, axis=1).astype(out_dtype, copy=False)


def query_flair(grid: IntegralVladGrid, box: BoundingBox,
                pyramid: Sequence[int] = DEFAULT_PYRAMID) -> VladDescriptor:
    vec = next(query_flair_many(grid, [box], pyramid, out_dtype=np.float64))[0]
    return VladDescriptor(vec, RAW)


def query_counts(grid: IntegralVladGrid, box: BoundingBox) -> np.ndarray:
    """Per-codeword feature counts inside ``box`` (a BoVW histogram)."""
    sb = _snap_and_check(grid, [box])
    ix, iy = _box_indices(grid, sb, 1)
    T = grid.table[..., grid.dim].astype(np.float64)
    y0, y1, x0, x1 = iy[0, 0], iy[0, 1], ix[0, 0], ix[0, 1]
    return T[y1, x1] - T[y0, x1] - T[y1, x0] + T[y0, x0]


# ---------------------------------------------------------- normalisation

def ssr(z, alpha: float = 0.5) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.abs(z) ** alpha


def normalize_many(X, alpha: float = 0.5, per_block: int = 0) -> np.ndarray:
    """Signed power normalisation then L2, row-wise.

    With ``per_block > 0`` each consecutive block of that length is
    L2-normalised separately and the result rescaled to unit norm.
    """
    Z = ssr(np.atleast_2d(X), alpha)
    if per_block:
        B = Z.reshape(len(Z), -1, per_block)
        n = np.linalg.norm(B, axis=2, keepdims=True)
        np.divide(B, n, out=B, where=n > 0)
        Z = B.reshape(len(Z), -1)
    n = np.linalg.norm(Z, axis=1, keepdims=True)
    np.divide(Z, n, out=Z, where=n > 0)
    return Z


def normalize(desc, alpha: float = 0.5, per_block: int = 0) -> VladDescriptor:
    vec = desc.vector if isinstance(desc, VladDescriptor) else np.asarray(desc, dtype=float)
    if isinstance(desc, VladDescriptor) and desc.state != RAW:
        raise ValueError("descriptor is already normalised")
    out = normalize_many(vec[None, :], alpha, per_block)[0]
    return VladDescriptor(out, NORMALIZED, is_zero=not np.any(out))
