import logging

import numpy as np
import pytest

from slamrecog.features import (RAW_DIM, SIFT_DIM, DenseFeatureField, PcaModel, apply_pca,
                                extract_dense, fit_pca, grid_centers, level_size, load_field,
                                normalize_sift, save_field, subsample)


def smooth_image(rng, h, w):
    from scipy import ndimage
    img = ndimage.gaussian_filter(rng.uniform(0, 255, (h, w, 3)), (1.5, 1.5, 0))
    return np.clip(img, 0, 255).astype(np.uint8)


# --------------------------------------------------------------- extraction

def test_constant_image_has_zero_sift_and_exact_colour():
    img = np.zeros((64, 80, 3), np.uint8)
    img[:] = (51, 102, 204)
    f = extract_dense(img)
    assert f.dim == RAW_DIM and len(f) > 0
    assert np.all(f.descriptors[:, :SIFT_DIM] == 0)
    assert np.allclose(f.descriptors[:, SIFT_DIM:], [0.2, 0.4, 0.8], atol=1e-12)


def test_ninety_degree_rotation_permutes_bins_and_locations(rng):
    # 192 and 136 stay multiples of 4 at every pyramid level, so the grids align
    img = smooth_image(rng, 136, 192)
    rot = np.rot90(img)  # counter-clockwise; shape (192, 136)
    a = extract_dense(img)
    b = extract_dense(rot)
    assert len(a) == len(b)
    W = img.shape[1]
    # location (u, v) in the original lands at (v, W - u) in the rotated image
    mapped = np.stack([a.locations[:, 1], W - a.locations[:, 0]], axis=1)
    key = lambda loc, s: [(int(s_), round(x, 6), round(y, 6)) for (x, y), s_ in zip(loc, s)]  # noqa: E731
    index_b = {k: i for i, k in enumerate(key(b.locations, b.scales))}
    order = [index_b[k] for k in key(mapped, a.scales)]
    db = b.descriptors[order]
    # cell (cy, cx) -> (3 - cx, cy); orientation bin o -> o - 2
    sa = a.descriptors[:, :SIFT_DIM].reshape(-1, 4, 4, 8)
    expected = np.zeros_like(sa)
    for cy in range(4):
        for cx in range(4):
            expected[:, 3 - cx, cy] = np.roll(sa[:, cy, cx], -2, axis=1)
    assert np.allclose(db[:, :SIFT_DIM].reshape(-1, 4, 4, 8), expected, atol=1e-6)
    assert np.allclose(db[:, SIFT_DIM:], a.descriptors[:, SIFT_DIM:], atol=1e-9)


def test_vga_sample_counts_match_enumeration():
    img = np.random.default_rng(0).integers(0, 256, (480, 640, 3)).astype(np.uint8)
    f = extract_dense(img)
    for level in range(4):
        ws, hs = level_size(640, 480, level)
        # direct enumeration of centres 4i+2 whose 16-px window fits
        nx = sum(1 for x in range(ws) if x % 4 == 2 and x - 8 >= 0 and x + 8 <= ws)
        ny = sum(1 for y in range(hs) if y % 4 == 2 and y - 8 >= 0 and y + 8 <= hs)
        assert (ws // 4) * (hs // 4) >= nx * ny
        assert np.sum(f.scales == level) == nx * ny
    assert f.skipped_scales == 0
    assert np.all(f.locations >= 0)
    assert np.all(f.locations[:, 0] < 640) and np.all(f.locations[:, 1] < 480)
    assert np.all(f.descriptors[:, :SIFT_DIM] >= 0)
    assert np.allclose(np.linalg.norm(f.descriptors[:, :SIFT_DIM], axis=1), 1.0)


def test_coarse_locations_mapped_to_base_pixels():
    img = np.zeros((100, 100, 3), np.uint8)
    f = extract_dense(img)
    ws, _ = level_size(100, 100, 2)
    xs = grid_centers(ws)
    got = np.unique(f.locations[f.scales == 2, 0])
    assert np.allclose(got, xs * 100 / ws)


def test_small_image_skips_levels_with_warning(caplog):
    img = np.zeros((20, 20, 3), np.uint8)
    with caplog.at_level(logging.WARNING):
        f = extract_dense(img)
    assert f.skipped_scales == 3
    assert "skipped 3" in caplog.text
    tiny = extract_dense(np.zeros((8, 8, 3), np.uint8))
    assert len(tiny) == 0 and tiny.skipped_scales == 4


def test_extraction_is_bit_deterministic(rng):
    img = smooth_image(rng, 64, 64)
    a, b = extract_dense(img), extract_dense(img.copy())
    assert np.array_equal(a.descriptors, b.descriptors)
    assert np.array_equal(a.locations, b.locations)


def test_rejects_non_rgb():
    with pytest.raises(ValueError):
        extract_dense(np.zeros((32, 32), np.uint8))


def test_sift_clipping():
    d = np.zeros((1, SIFT_DIM))
    d[0, 0] = 10.0
    d[0, 1] = 1.0
    out = normalize_sift(d)
    assert np.linalg.norm(out) == pytest.approx(1.0)
    # the dominant bin is clipped to 0.2 before renormalising
    assert out[0, 0] / out[0, 1] == pytest.approx(0.2 / (1 / np.sqrt(101)))


def test_field_dump_round_trip(tmp_path, rng):
    f = extract_dense(smooth_image(rng, 40, 48))
    save_field(f, tmp_path / "f.npz")
    g = load_field(tmp_path / "f.npz")
    assert np.array_equal(g.descriptors, f.descriptors) and g.image_size == f.image_size
    assert g.scale_factor == f.scale_factor


# ---------------------------------------------------------------------- PCA

def test_pca_exact_plane(rng):
    basis = np.linalg.qr(rng.normal(size=(131, 2)))[0].T
    X = rng.normal(size=(300, 2)) @ basis + rng.normal(size=131)
    m = fit_pca(X, 2)
    Z = m.transform(X)
    recon = Z @ m.components + m.mean
    assert np.max(np.abs(recon - X)) < 1e-9


def test_pca_full_rank_is_orthonormal_basis(rng):
    X = rng.normal(size=(400, 131))
    m = fit_pca(X, 131)
    assert np.max(np.abs(m.components @ m.components.T - np.eye(131))) < 1e-9
    recon = m.transform(X) @ m.components + m.mean
    assert np.max(np.abs(recon - X)) < 1e-9


def test_pca_eigenvalues_match_svd_oracle(rng):
    X = rng.normal(size=(500, 131)) * rng.uniform(0.1, 3.0, 131)
    m = fit_pca(X, 80)
    s = np.linalg.svd(X - X.mean(0), compute_uv=False)
    ref = (s ** 2 / (len(X) - 1))[:80]
    assert np.allclose(m.explained_variance, ref, rtol=1e-8, atol=0)


def test_pca_properties(rng):
    X = rng.normal(size=(600, 131)) @ rng.normal(size=(131, 131))
    m = fit_pca(X, 80)
    P = m.components
    assert np.max(np.abs(P @ P.T - np.eye(80))) <= 1e-6
    assert np.all(np.diff(m.explained_variance) <= 0)
    assert np.max(np.abs(m.transform(m.mean[None, :]))) <= 1e-6
    idx = np.argmax(np.abs(P), axis=1)
    assert np.all(P[np.arange(80), idx] > 0)
    Xc = X - m.mean
    Z = m.transform(X)
    assert np.all(np.linalg.norm(Z, axis=1) <= np.linalg.norm(Xc, axis=1) + 1e-9)
    assert np.allclose(Z, Xc @ P.T)
    assert Z.var(0).sum() <= Xc.var(0).sum()


def test_pca_rank_deficient_names_rank(rng):
    X = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 131))
    with pytest.raises(ValueError, match="achieved rank 5"):
        fit_pca(X, 80)


def test_pca_precondition_errors(rng):
    with pytest.raises(ValueError):
        fit_pca(rng.normal(size=(50, 131)), 80)
    with pytest.raises(ValueError):
        fit_pca(rng.normal(size=(500, 131)), 132)


def test_apply_pca_twice_is_an_error(rng):
    X = rng.normal(size=(300, 131))
    m = fit_pca(X, 80)
    f = DenseFeatureField(np.zeros((300, 2)), np.zeros(300, int), X, (10, 10))
    once = apply_pca(m, f)
    assert once.dim == 80 and np.array_equal(once.locations, f.locations)
    with pytest.raises(ValueError, match="dimension mismatch"):
        apply_pca(m, once)


def test_pca_container_round_trip(rng):
    m = fit_pca(rng.normal(size=(300, 131)), 80)
    back = PcaModel.from_container(m.to_container())
    assert np.allclose(back.components, m.components, atol=1e-6)
    again = PcaModel.from_container(back.to_container())
    assert np.array_equal(again.components, back.components)


def test_subsample_seeded(rng):
    X = rng.normal(size=(1000, 3))
    a, b = subsample(X, 100, 7), subsample(X, 100, 7)
    assert np.array_equal(a, b) and len(a) == 100
    assert not np.array_equal(a, subsample(X, 100, 8))
