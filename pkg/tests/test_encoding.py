import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slamrecog.codebook import Vocabulary
from slamrecog.encoding import (NORMALIZED, RAW, VladDescriptor, build_flair, features_in_box,
                                normalize, normalize_many, pyramid_cells, query_counts,
                                query_flair, query_flair_many, split_edges, ssr, vlad_naive)
from slamrecog.features import DenseFeatureField
from slamrecog.geometry import BoundingBox


def random_field(rng, n, w=160, h=120, d=8):
    loc = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    return DenseFeatureField(loc, np.zeros(n, np.int64), rng.normal(size=(n, d)), (w, h))


def random_box(rng, w=160, h=120):
    x0, x1 = np.sort(rng.integers(0, w + 1, 2))
    y0, y1 = np.sort(rng.integers(0, h + 1, 2))
    return BoundingBox(int(x0), int(y0), int(x1), int(y1))


@pytest.fixture
def vocab(rng):
    return Vocabulary(rng.normal(size=(6, 8)))


# --------------------------------------------------------------------- VLAD

def test_vlad_zero_residual(vocab):
    v = vlad_naive(vocab.centers[5][None], vocab)
    assert v.shape == (6 * 8,) and not np.any(v)


def test_vlad_symmetric_cancellation(vocab):
    delta = 1e-3 * np.ones(8)
    v = vlad_naive(np.stack([vocab.centers[2] + delta, vocab.centers[2] - delta]), vocab)
    assert np.allclose(v, 0.0, atol=1e-15)


def test_vlad_empty_is_zero(vocab):
    assert not np.any(vlad_naive(np.zeros((0, 8)), vocab))


def test_vlad_matches_hand_aggregation(rng, vocab):
    X = rng.normal(size=(200, 8))
    ref = np.zeros((6, 8))
    for x in X:
        k = int(np.argmin(((vocab.centers - x) ** 2).sum(1)))
        ref[k] += x - vocab.centers[k]
    assert np.allclose(vlad_naive(X, vocab), ref.ravel(), atol=1e-12)


# ------------------------------------------------------------------- tables

def test_empty_field_gives_zero_grid(vocab):
    f = DenseFeatureField(np.zeros((0, 2)), np.zeros(0, np.int64), np.zeros((0, 8)), (40, 40))
    g = build_flair(f, vocab)
    assert not np.any(g.table)
    assert not np.any(query_flair(g, BoundingBox(0, 0, 40, 40)).vector)


def test_single_feature_point_inclusion(vocab):
    x = vocab.centers[4] + 0.01
    vocab7 = Vocabulary(np.vstack([vocab.centers, [x + 0.001 * np.arange(8)], vocab.centers[:1] + 5]))
    # codeword 6 is nearest to x; relabel through the vocabulary's own assignment
    k = vocab7.assign(x)
    f = DenseFeatureField(np.array([[10.0, 10.0]]), np.zeros(1, np.int64), x[None], (40, 40))
    g = build_flair(f, vocab7, dtype=np.float64)
    inside = query_flair(g, BoundingBox(5, 5, 20, 20), (1,)).vector.reshape(vocab7.k, 8)
    assert np.allclose(inside[k], x - vocab7.centers[k])
    assert not np.any(np.delete(inside, k, axis=0))
    outside = query_flair(g, BoundingBox(20, 20, 40, 40), (1,)).vector
    assert not np.any(outside)


def test_table_border_and_full_query(rng, vocab):
    f = random_field(rng, 500)
    g = build_flair(f, vocab, dtype=np.float64)
    assert not np.any(g.table[0]) and not np.any(g.table[:, 0])
    full = query_flair(g, BoundingBox(0, 0, 160, 120), (1,)).vector
    assert np.allclose(full, vlad_naive(f.descriptors, vocab), atol=1e-10)
    assert query_counts(g, BoundingBox(0, 0, 160, 120)).sum() == 500


def test_counts_monotone_under_containment(rng, vocab):
    g = build_flair(random_field(rng, 300), vocab)
    for _ in range(50):
        outer = random_box(rng)
        ix0 = rng.uniform(outer.x_min, outer.x_max)
        iy0 = rng.uniform(outer.y_min, outer.y_max)
        inner = BoundingBox(ix0, iy0, rng.uniform(ix0, outer.x_max), rng.uniform(iy0, outer.y_max))
        assert np.all(query_counts(g, inner) <= query_counts(g, outer))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-10), (np.float32, 1e-5)])
def test_flair_matches_naive(rng, dtype, tol):
    from slamrecog.codebook import fit_kmeans
    for _ in range(3):
        f = random_field(rng, 2000, d=8)
        vocab = fit_kmeans(f.descriptors, 16, seed=0)
        g = build_flair(f, vocab, dtype=dtype)
        boxes = [random_box(rng) for _ in range(40)]
        for b, raw in zip(boxes, np.vstack(list(query_flair_many(g, boxes, (1,), out_dtype=np.float64)))):
            ref = vlad_naive(f.descriptors[features_in_box(f, b)], vocab)
            assert np.max(np.abs(raw - ref)) <= tol


def test_pyramid_layout_and_additivity(rng, vocab):
    g = build_flair(random_field(rng, 1500), vocab, dtype=np.float64)
    KD = 6 * 8
    for _ in range(20):
        b = random_box(rng)
        v = query_flair(g, b, (1, 2, 4)).vector
        assert v.shape == (KD * 21,)
        whole, quads, sixteen = v[:KD], v[KD:5 * KD].reshape(4, KD), v[5 * KD:].reshape(16, KD)
        assert np.allclose(quads.sum(0), whole, atol=1e-10)
        assert np.allclose(sixteen.sum(0), whole, atol=1e-10)


def test_pyramid_bins_match_naive_sub_boxes(rng, vocab):
    f = random_field(rng, 1500)
    g = build_flair(f, vocab, dtype=np.float64)
    b = BoundingBox(13, 7, 150, 101)
    v = query_flair(g, b, (4,)).vector.reshape(16, -1)
    ex, ey = split_edges(13, 150, 4), split_edges(7, 101, 4)
    for r in range(4):
        for c in range(4):
            sub = BoundingBox(ex[c], ey[r], ex[c + 1], ey[r + 1])
            ref = vlad_naive(f.descriptors[features_in_box(f, sub)], vocab)
            assert np.allclose(v[4 * r + c], ref, atol=1e-10)


def test_split_edges_remainder_to_later_bins():
    assert split_edges(0, 10, 4).tolist() == [0, 2, 4, 7, 10]
    assert split_edges(3, 7, 4).tolist() == [3, 4, 5, 6, 7]


def test_sub_cell_box_equals_cell_content(rng, vocab):
    f = random_field(rng, 3000)
    f.locations[:3] = [[8.2, 9.0], [11.9, 8.0], [10.0, 11.5]]
    g = build_flair(f, vocab, dtype=np.float64)
    # snaps to pixels [9, 11), which holds only the centre pixel (10, 10) of cell (2, 2)
    v = query_flair(g, BoundingBox(9.5, 9.5, 10.5, 10.5), (1,)).vector
    cell = np.floor(f.locations / 4).astype(int)
    mask = (cell[:, 0] == 2) & (cell[:, 1] == 2)
    assert mask.any()
    assert np.allclose(v, vlad_naive(f.descriptors[mask], vocab), atol=1e-10)


def test_box_outside_grid_raises(rng, vocab):
    g = build_flair(random_field(rng, 10), vocab)
    with pytest.raises(ValueError, match="outside"):
        query_flair(g, BoundingBox(0, 0, 161, 50))


def test_feature_outside_image_raises(vocab):
    f = DenseFeatureField(np.array([[50.0, 5.0]]), np.zeros(1, np.int64), np.zeros((1, 8)), (40, 40))
    with pytest.raises(ValueError, match="outside image"):
        build_flair(f, vocab)


def test_bad_pyramid_rejected(rng, vocab):
    g = build_flair(random_field(rng, 10), vocab)
    with pytest.raises(ValueError):
        query_flair(g, BoundingBox(0, 0, 10, 10), (3,))
    assert pyramid_cells() == 21


def test_build_time_roughly_linear(rng):
    vocab = Vocabulary(rng.normal(size=(64, 80)))

    def best_build(n):
        f = random_field(np.random.default_rng(n), n, 640, 480, 80)
        best = np.inf
        for _ in range(3):
            t = time.perf_counter()
            build_flair(f, vocab)
            best = min(best, time.perf_counter() - t)
        return best

    assert best_build(40000) <= 2.5 * best_build(20000)


# ------------------------------------------------------------ normalisation

def test_ssr_spot_values():
    assert ssr(0.25) == 0.5
    assert ssr(-4.0) == -2.0
    assert ssr(0.0) == 0.0


def test_normalize_unit_norm_and_flags(rng):
    raw = VladDescriptor(rng.normal(size=500) * 10)
    out = normalize(raw)
    assert out.state == NORMALIZED and not out.is_zero
    assert abs(np.linalg.norm(out.vector) - 1) <= 1e-6
    with pytest.raises(ValueError):
        normalize(out)
    z = normalize(VladDescriptor(np.zeros(10)))
    assert z.is_zero and not np.any(z.vector) and z.state == NORMALIZED
    assert raw.state == RAW


def test_normalize_global_not_per_block():
    v = np.array([4.0, 0.0, 0.0, 1.0])
    out = normalize_many(v, 0.5)[0]
    assert np.allclose(out, np.array([2.0, 0, 0, 1.0]) / np.sqrt(5))
    blk = normalize_many(v, 0.5, per_block=2)[0]
    assert np.allclose(blk, np.array([1.0, 0, 0, 1.0]) / np.sqrt(2))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=64))
def test_normalize_property(vals):
    x = np.array(vals)
    out = normalize_many(x, 0.5)[0]
    if np.any(np.sqrt(np.abs(x)) > 0):
        assert abs(np.linalg.norm(out) - 1) <= 1e-6
        assert np.all(np.sign(out) == np.sign(x))
    else:
        assert not np.any(out)
