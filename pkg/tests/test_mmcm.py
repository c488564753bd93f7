"""Missing-modality construction: shapes, pooling, blanks, gradient support."""
import numpy as np
import pytest

from himie.autodiff import ParamTree, Tensor, gradcheck
from himie.config import ModelConfig
from himie.mmcm import (
    blank_image,
    blank_text,
    construct_image_from_text,
    construct_text_from_image,
    init_mmcm,
)

CFG = ModelConfig(d_h=8, n_l=6, heads=2, n_p=4, d_in=3, d_vae=4, prompt_len=5,
                  vocab=64, max_len=32)


@pytest.fixture
def params():
    p = ParamTree()
    init_mmcm(p.scoped("mmcm"), CFG, np.random.default_rng(0))
    return p


def test_image_from_text_shapes(params):
    h = Tensor(np.random.default_rng(1).normal(size=(7, CFG.d_h)))
    lv = construct_image_from_text(h, params.scoped("mmcm"), CFG, n_g=3, n_p=CFG.n_p)
    for t in (lv.low, lv.mid, lv.high, lv.base):
        assert t.data.shape == (3, CFG.n_p, CFG.d_h)


def test_text_from_image_shapes(params):
    h = Tensor(np.random.default_rng(2).normal(size=(2, CFG.n_p, CFG.d_h)))
    lv = construct_text_from_image(h, params.scoped("mmcm"), CFG, n_x=9)
    for t in (lv.low, lv.mid, lv.high, lv.base):
        assert t.data.shape == (9, CFG.d_h)


def test_base_is_mean_of_levels(params):
    h = Tensor(np.random.default_rng(3).normal(size=(6, CFG.d_h)))
    lv = construct_image_from_text(h, params.scoped("mmcm"), CFG, n_g=2, n_p=CFG.n_p)
    expect = (lv.low.data + lv.mid.data + lv.high.data) / 3.0
    assert np.allclose(lv.base.data, expect, atol=1e-12)


def test_target_length_shorter_and_longer_than_source(params):
    s = params.scoped("mmcm")
    h = Tensor(np.random.default_rng(4).normal(size=(1, CFG.n_p, CFG.d_h)))
    for n_x in (1, 3, CFG.n_p + CFG.prompt_len + 7):
        lv = construct_text_from_image(h, s, CFG, n_x=n_x)
        assert lv.base.data.shape == (n_x, CFG.d_h)


def test_levels_are_nonnegative_after_relu(params):
    h = Tensor(np.random.default_rng(5).normal(size=(6, CFG.d_h)))
    lv = construct_image_from_text(h, params.scoped("mmcm"), CFG, n_g=2, n_p=CFG.n_p)
    for t in (lv.low, lv.mid, lv.high):
        assert np.all(t.data >= 0)


def test_levels_differ_between_each_other(params):
    # per-level prompts and convs must produce distinct features
    h = Tensor(np.random.default_rng(6).normal(size=(6, CFG.d_h)))
    lv = construct_image_from_text(h, params.scoped("mmcm"), CFG, n_g=2, n_p=CFG.n_p)
    assert not np.allclose(lv.low.data, lv.mid.data)
    assert not np.allclose(lv.mid.data, lv.high.data)


def test_output_depends_on_input(params):
    s = params.scoped("mmcm")
    a = construct_text_from_image(
        Tensor(np.zeros((1, CFG.n_p, CFG.d_h))), s, CFG, n_x=4).base.data
    b = construct_text_from_image(
        Tensor(np.ones((1, CFG.n_p, CFG.d_h))), s, CFG, n_x=4).base.data
    assert not np.allclose(a, b)


def test_blank_fill_is_all_zeros():
    t = blank_text(5, CFG)
    g = blank_image(2, CFG.n_p, CFG)
    for lv, shape in ((t, (5, CFG.d_h)), (g, (2, CFG.n_p, CFG.d_h))):
        for x in (lv.low, lv.mid, lv.high, lv.base):
            assert x.data.shape == shape
            assert not np.any(x.data)


def test_gradient_reaches_prompts_and_convs(params):
    h = Tensor(np.random.default_rng(7).normal(size=(6, CFG.d_h)))
    lv = construct_image_from_text(h, params.scoped("mmcm"), CFG, n_g=2, n_p=CFG.n_p)
    params.zero_grad()
    (lv.base * lv.base).sum().backward()
    for name in ("mmcm.t2g.conv_in.k", "mmcm.t2g.low.prompt",
                 "mmcm.t2g.high.conv.k", "mmcm.t2g.mid.conv.b"):
        assert np.any(params[name].grad != 0), name


def test_gradcheck_both_directions(params):
    src_t = Tensor(np.random.default_rng(8).normal(size=(5, CFG.d_h)))
    src_g = Tensor(np.random.default_rng(9).normal(size=(2, CFG.n_p, CFG.d_h)))

    def loss():
        a = construct_image_from_text(src_t, params.scoped("mmcm"), CFG, 2, CFG.n_p)
        b = construct_text_from_image(src_g, params.scoped("mmcm"), CFG, 6)
        return (a.base * a.base).sum() + (b.base * b.base).sum()

    report = gradcheck(loss, params, samples=60, seed=3)
    assert report.ok(1e-4), report.worst()
