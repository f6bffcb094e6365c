import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slamrecog.config import PipelineConfig, load_config, save_config


def test_defaults():
    cfg = PipelineConfig().validate()
    assert (cfg.step, cfg.n_scales, cfg.pca_dim, cfg.vocab_k) == (4, 4, 80, 64)
    assert cfg.pyramid == (1, 2, 4) and cfg.ssr_alpha == 0.5
    assert cfg.min_box == 20.0 and cfg.iou_thresh == 0.5 and cfg.prob_floor == 1e-9
    assert cfg.descriptor_dim == 64 * 80 * 21


def test_round_trip(tmp_path):
    cfg = PipelineConfig(vocab_k=16, pyramid=(1, 2), per_block_norm=True, scale_factor=1.3, seed=9)
    save_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 512), eps=st.floats(1e-6, 10, allow_nan=False),
       alpha=st.floats(0, 1), pyr=st.sampled_from([(1,), (1, 2), (2, 4), (1, 2, 4)]))
def test_round_trip_property(tmp_path_factory, k, eps, alpha, pyr):
    cfg = PipelineConfig(vocab_k=k, base_eps=eps, ssr_alpha=alpha or 0.5, pyramid=pyr)
    p = tmp_path_factory.mktemp("cfg") / "c.ini"
    save_config(cfg, p)
    assert load_config(p) == cfg


def test_overrides():
    cfg = PipelineConfig().with_overrides(["vocab_k=8", "pyramid = 1,2", "per_block_norm=yes"])
    assert cfg.vocab_k == 8 and cfg.pyramid == (1, 2) and cfg.per_block_norm is True


@pytest.mark.parametrize("pair,msg", [("vocab_k", "key=value"), ("nope=1", "unknown"),
                                      ("vocab_k=0", "vocab_k"), ("pyramid=3", "pyramid"),
                                      ("iou_thresh=1.5", "iou_thresh"), ("per_block_norm=maybe", "boolean"),
                                      ("table_dtype=float16", "table_dtype")])
def test_bad_overrides(pair, msg):
    with pytest.raises(ValueError, match=msg):
        PipelineConfig().with_overrides([pair])


def test_bad_files_name_the_path(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("vocab_k = 3\n")
    with pytest.raises(ValueError, match="c.ini"):
        load_config(p)
    p.write_text("[pipeline]\nvocab_k = x\n")
    with pytest.raises(ValueError, match="c.ini"):
        load_config(p)
    with pytest.raises(ValueError, match="missing.ini"):
        load_config(tmp_path / "missing.ini")
