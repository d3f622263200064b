import numpy as np
import pytest

from nerfedit import autodiff as ad
from nerfedit.autodiff import Tensor
from nerfedit.errors import ContractError
from nerfedit.style import (FeatureExtractor, LossWeights, StyleConfig,
                            depth_guidance, gram, load_style_image, smooth_loss,
                            style_loss, tv_losses, warmup_schedule)

from util import finite_difference_check


def test_gram_rank_one_outer_product():
    f = Tensor(np.array([2.0, 3.0], np.float32).reshape(2, 1, 1))
    np.testing.assert_allclose(gram(f).data, [[4.0, 6.0], [6.0, 9.0]], atol=1e-6)


def test_gram_zero_features():
    f = Tensor(np.zeros((3, 4, 4), np.float32))
    np.testing.assert_array_equal(gram(f).data, np.zeros((3, 3)))


def test_gram_symmetric_psd():
    rng = np.random.default_rng(0)
    f = Tensor(rng.standard_normal((6, 8, 8)).astype(np.float32))
    g = gram(f).data.astype(np.float64)
    np.testing.assert_allclose(g, g.T, atol=1e-6)
    assert np.linalg.eigvalsh(g).min() >= -1e-6


def test_gram_normalized_by_pixel_count():
    f = Tensor(np.ones((1, 4, 8), np.float32) * 2.0)
    np.testing.assert_allclose(gram(f).data, [[4.0]], atol=1e-6)


# -- extractor -----------------------------------------------------------------------


def test_extractor_is_deterministic_and_layered():
    ex = FeatureExtractor.seeded_random(seed=42)
    img = np.random.default_rng(0).random((64, 64, 3), dtype=np.float32)
    with ad.no_grad():
        a = ex(img)
        b = ex(img)
    assert len(a) == 3
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.data, fb.data)
    assert a[0].data.shape[0] == 8 and a[2].data.shape[0] == 32


def test_extractor_rejects_tiny_images():
    ex = FeatureExtractor.seeded_random()
    with pytest.raises(ContractError):
        with ad.no_grad():
            ex(np.zeros((8, 8, 3), np.float32))


def test_extractor_checkpoint_roundtrip(tmp_path):
    ex = FeatureExtractor.seeded_random(seed=7)
    ex.save(tmp_path / "fx")
    loaded = FeatureExtractor.from_checkpoint(tmp_path / "fx")
    img = np.random.default_rng(1).random((32, 32, 3), dtype=np.float32)
    with ad.no_grad():
        for fa, fb in zip(ex(img), loaded(img)):
            np.testing.assert_array_equal(fa.data, fb.data)


def test_extractor_differentiable_wrt_image():
    ex = FeatureExtractor.seeded_random(seed=2)
    img = Tensor(np.random.default_rng(3).random((16, 16, 3), dtype=np.float32),
                 requires_grad=True, name="img")

    def loss(im):
        feats = ex(im)
        return ad.tmean(gram(feats[0]) ** 2.0)

    finite_difference_check(loss, [img], rel_tol=2e-3)


# -- style loss -----------------------------------------------------------------------


def make_config(**kwargs):
    rng = np.random.default_rng(0)
    img = (np.indices((256, 256)).sum(axis=0) % 32 / 31.0).astype(np.float32)
    style = np.stack([img, 1 - img, img], axis=2)
    return StyleConfig(image=style, **kwargs)


def test_style_loss_zero_on_itself():
    cfg = make_config()
    loss = style_loss(cfg, Tensor(cfg.image), lam=130.0)
    assert float(loss.data) < 1e-8


def test_style_loss_zero_when_disabled():
    cfg = make_config()
    img = Tensor(np.random.default_rng(0).random((32, 32, 3), dtype=np.float32))
    assert float(style_loss(cfg, img, lam=0.0).data) == 0.0


def test_style_loss_positive_and_decreases_along_gradient():
    cfg = make_config()
    img = Tensor(np.full((32, 32, 3), 0.5, np.float32), requires_grad=True, name="img")
    loss = style_loss(cfg, img, lam=1.0)
    assert float(loss.data) > 0
    ad.backward(loss)
    step = img.data - 0.02 * img.grad / (np.abs(img.grad).max() + 1e-9)
    with ad.no_grad():
        after = style_loss(cfg, Tensor(step), lam=1.0)
    assert float(after.data) < float(loss.data)


def test_style_config_validates_shape():
    with pytest.raises(ContractError):
        StyleConfig(image=np.zeros((128, 128, 3), np.float32))


# -- depth guidance --------------------------------------------------------------------


def test_guidance_forward_differences_with_zero_border():
    depth = np.array([[1.0, 1.0, 2.0]], np.float32)
    t_alpha = np.ones((1, 3), np.float32)
    g = depth_guidance(depth, t_alpha)
    np.testing.assert_allclose(g[0, :, 0], [0.0, 1.0, 0.0])  # horizontal
    np.testing.assert_allclose(g[0, :, 1], [0.0, 0.0, 0.0])  # no row below


def test_guidance_alpha_annihilation():
    depth = np.tile(np.arange(6, dtype=np.float32), (6, 1))
    t_alpha = np.ones((6, 6), np.float32)
    t_alpha[2, 3] = 0.0
    g = depth_guidance(depth, t_alpha)
    # horizontal entries at row 2 with j in {1..4} involve pixel (2,3): all zero
    assert np.all(g[2, 1:5, 0] == 0.0)
    # vertical entries in column 3 with i in {0..3} involve pixel (2,3)
    assert np.all(g[0:4, 3, 1] == 0.0)
    # far-away entries survive
    assert g[5, 1, 0] == 1.0


def test_guidance_translation_equivariance():
    rng = np.random.default_rng(0)
    depth = rng.random((8, 8), dtype=np.float32)
    t_alpha = rng.random((8, 8), dtype=np.float32)
    g = depth_guidance(depth, t_alpha)
    g_shift = depth_guidance(np.roll(depth, 1, axis=1), np.roll(t_alpha, 1, axis=1))
    # interior pixels (away from the roll seam and the alpha window) shift along
    np.testing.assert_allclose(g_shift[:, 2:6], g[:, 1:5], atol=1e-6)


def test_guidance_shape_mismatch_rejected():
    with pytest.raises(ContractError):
        depth_guidance(np.zeros((4, 4)), np.zeros((4, 5)))


# -- tv and depth-discontinuity losses -------------------------------------------------


def test_tv_zero_on_constant_patch():
    img = Tensor(np.full((4, 4, 3), 0.3, np.float32))
    guide = np.zeros((4, 4, 2), np.float32)
    l_tv, l_dd = tv_losses(img, guide, lam_tv=1.0, lam_dd=1.0)
    assert float(l_tv.data) == 0.0 and float(l_dd.data) == 0.0


def test_tv_fully_masked_by_guidance():
    rng = np.random.default_rng(0)
    img = Tensor(rng.random((4, 4, 3), dtype=np.float32))
    guide = np.ones((4, 4, 2), np.float32)
    l_tv, l_dd = tv_losses(img, guide, lam_tv=1.0, lam_dd=1.0)
    assert float(l_tv.data) == 0.0
    assert float(l_dd.data) < 0.0  # returned as a negative quantity


def test_tv_two_pixel_hand_case():
    img = Tensor(np.array([[[0.0, 0.0, 0.0]], [[1.0, 1.0, 1.0]]], np.float32))
    guide = np.zeros((2, 1, 2), np.float32)
    l_tv, _ = tv_losses(img, guide, lam_tv=1.0, lam_dd=0.0)
    # gradient magnitude 3 (squared norm), squared -> 9, one contributing pixel
    np.testing.assert_allclose(float(l_tv.data), 9.0, rtol=1e-5)


def test_tv_losses_backpropagate():
    rng = np.random.default_rng(1)
    img = Tensor(rng.random((4, 4, 3), dtype=np.float32), requires_grad=True, name="img")
    guide = rng.random((4, 4, 2), dtype=np.float32) * 0.5

    def loss(im):
        l_tv, l_dd = tv_losses(im, guide, lam_tv=1.0, lam_dd=0.3)
        return l_tv + l_dd

    finite_difference_check(loss, [img])


# -- smooth loss -----------------------------------------------------------------------


def test_smooth_loss_zero_outside_transition():
    pred = Tensor(np.random.default_rng(0).random((8, 3), dtype=np.float32))
    gt = np.random.default_rng(1).random((8, 3)).astype(np.float32)
    assert float(smooth_loss(pred, gt, np.zeros(8, np.float32), 1e-3).data) == 0.0


def test_smooth_loss_zero_on_perfect_reconstruction():
    gt = np.random.default_rng(2).random((8, 3)).astype(np.float32)
    pred = Tensor(gt.copy())
    assert float(smooth_loss(pred, gt, np.ones(8, np.float32), 1e-3).data) == 0.0


def test_smooth_loss_single_ray_arithmetic():
    pred = Tensor(np.array([[0.6, 0.2, 0.2]], np.float32))
    gt = np.array([[0.5, 0.2, 0.2]], np.float32)
    out = smooth_loss(pred, gt, np.array([0.5], np.float32), lam=1e-3)
    np.testing.assert_allclose(float(out.data), 1e-3 * 0.01 * 0.5, rtol=1e-4)


def test_smooth_loss_backpropagates():
    rng = np.random.default_rng(4)
    pred = Tensor(rng.random((6, 3), dtype=np.float32), requires_grad=True, name="pred")
    gt = rng.random((6, 3)).astype(np.float32)
    dt = rng.random(6).astype(np.float32)

    def loss(p):
        return smooth_loss(p, gt, dt, 0.5)

    finite_difference_check(loss, [pred])


# -- warm-up schedule -------------------------------------------------------------------


def test_warmup_iteration_zero_active_set():
    active = warmup_schedule(0, "style", warmup_iters=1000)
    assert active == frozenset({"content", "weight", "palette", "dd", "smooth"})


def test_warmup_complete_enables_everything():
    active = warmup_schedule(1000, "style", warmup_iters=1000)
    assert active == frozenset(
        {"content", "weight", "palette", "offset", "smooth", "style", "tv", "dd"})


def test_recolor_never_activates_style_losses():
    for it in (0, 10, 100000):
        active = warmup_schedule(it, "recolor")
        assert "style" not in active and "tv" not in active and "dd" not in active
        assert "content" in active and "offset" in active


def test_warmup_rejects_bad_args():
    with pytest.raises(ContractError):
        warmup_schedule(-1, "style")
    with pytest.raises(ContractError):
        warmup_schedule(0, "sepia")


# -- style image ingestion ---------------------------------------------------------------


def test_load_style_image_resizes_and_crops(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(0)
    src = (rng.random((100, 160, 3)) * 255).astype(np.uint8)
    p = tmp_path / "style.png"
    Image.fromarray(src).save(p)
    out = load_style_image(p)
    assert out.shape == (256, 256, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0
    # crop rectangle is honored and clamped
    out2 = load_style_image(p, crop=(150, 90, 500, 500))
    assert out2.shape == (256, 256, 3)
    out3 = load_style_image(p.read_bytes())
    np.testing.assert_array_equal(out, out3)


def test_identity_crop_of_exact_size_image(tmp_path):
    from PIL import Image

    rng = np.random.default_rng(1)
    src = (rng.random((256, 256, 3)) * 255).astype(np.uint8)
    p = tmp_path / "s.png"
    Image.fromarray(src).save(p)
    out = load_style_image(p, crop=(0, 0, 256, 256))
    np.testing.assert_allclose(out, src / 255.0, atol=1e-6)
