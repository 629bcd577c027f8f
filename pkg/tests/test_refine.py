import logging

import numpy as np
import pytest

from msrefine import tensor as T
from msrefine.errors import ParameterError
from msrefine.image_ops import downscale
from msrefine.net import InpaintNet, NetConfig
from msrefine.refine import (
    ABORTED,
    BASE,
    REFINED,
    SKIPPED,
    UNREFINED,
    RefinementConfig,
    comparison_mask,
    multiscale_inpaint,
    predict,
    predict_and_refine,
)

SMALL = NetConfig(base_channels=4, z_channels=8, n_res_blocks=1, training_resolution=32)


@pytest.fixture(scope="module")
def model():
    return InpaintNet(SMALL, seed=1)


def _scene(size=64, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((3, size, size)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[size // 4:3 * size // 4, size // 4:size // 2 + 4] = 1
    return img, mask


def _guide(model, img, mask):
    small = downscale(T.Tensor(img), 2.0).data
    small_mask = mask[::2, ::2]
    return predict(model, small, small_mask)


# ---------------------------------------------------------- comparison mask


def test_comparison_mask_radius_zero_is_downscaled_mask():
    m = np.zeros((32, 32), dtype=np.uint8)
    m[5:9, 7:20] = 1
    out = comparison_mask(m, (16, 16), 0)
    expected = np.zeros((16, 16), dtype=np.uint8)
    expected[2:5, 3:10] = 1
    np.testing.assert_array_equal(out, expected)


def test_comparison_mask_square_100_at_512():
    m = np.zeros((512, 512), dtype=np.uint8)
    m[100:200, 240:340] = 1
    out = comparison_mask(m, (256, 256), 15)
    expected = np.zeros((256, 256), dtype=np.uint8)
    expected[65:85, 135:155] = 1
    np.testing.assert_array_equal(out, expected)


def test_comparison_mask_thin_hole_vanishes():
    m = np.zeros((128, 128), dtype=np.uint8)
    m[60:70, 10:120] = 1
    assert not comparison_mask(m, (64, 64), 4).any()


# ---------------------------------------------------------- single level


def test_zero_iterations_equal_plain_forward(model):
    img, mask = _scene()
    res = predict_and_refine(img, mask, _guide(model, img, mask), model, RefinementConfig(n_iters=0, erosion_radius=1))
    with T.no_grad():
        plain = model.rear(model.front(img, mask)).data
    assert res.status == UNREFINED
    assert res.prediction.tobytes() == plain.tobytes()
    assert len(res.losses) == 1


def test_fixed_point_keeps_output(model):
    img, mask = _scene(seed=1)
    initial = predict(model, img, mask)
    guide = downscale(T.Tensor(initial), 2.0).data
    res = predict_and_refine(img, mask, guide, model, RefinementConfig(erosion_radius=1))
    assert res.status == REFINED
    assert res.losses[0] == 0.0
    assert np.max(np.abs(res.prediction - initial)) < 1e-6
    with T.no_grad():
        z0 = model.front(img, mask).data
    assert np.max(np.abs(res.z - z0)) < 1e-6


@pytest.mark.parametrize("n_iters", [1, 3, 7])
def test_trajectory_length(model, n_iters):
    img, mask = _scene(seed=2)
    res = predict_and_refine(img, mask, _guide(model, img, mask), model,
                             RefinementConfig(n_iters=n_iters, erosion_radius=1))
    assert len(res.losses) == n_iters + 1
    pred, losses = res
    assert pred.shape == img.shape and losses is res.losses


def test_refinement_reduces_consistency_loss(model):
    img, mask = _scene(seed=3)
    res = predict_and_refine(img, mask, _guide(model, img, mask), model,
                             RefinementConfig(n_iters=20, lr=0.05, erosion_radius=1))
    assert res.losses[-1] < res.losses[0]


def test_weights_untouched(model):
    before = {n: p.data.tobytes() for n, p in model.named_parameters()}
    img, mask = _scene(seed=4)
    predict_and_refine(img, mask, _guide(model, img, mask), model, RefinementConfig(n_iters=3, erosion_radius=1))
    for n, p in model.named_parameters():
        assert p.data.tobytes() == before[n]
        assert p.grad is None


def test_empty_comparison_mask_skips(model, caplog):
    img = np.random.default_rng(5).random((3, 64, 64)).astype(np.float32)
    mask = np.zeros((64, 64), dtype=np.uint8)
    mask[30:33, 5:60] = 1
    with caplog.at_level(logging.WARNING, logger="msrefine.refine"):
        res = predict_and_refine(img, mask, _guide(model, img, mask), model, RefinementConfig(erosion_radius=3))
    assert res.status == SKIPPED and res.losses == []
    assert res.prediction.tobytes() == predict(model, img, mask).tobytes()
    assert "skipping" in caplog.text


def test_nan_guide_aborts_to_unrefined(model):
    img, mask = _scene(seed=6)
    guide = np.full((3, 32, 32), np.nan, dtype=np.float32)
    res = predict_and_refine(img, mask, guide, model, RefinementConfig(n_iters=2, erosion_radius=1))
    assert res.status == ABORTED
    assert res.prediction.tobytes() == predict(model, img, mask).tobytes()


def test_non_divisible_size_is_padded(model):
    img, mask = _scene(size=60, seed=7)
    res = predict_and_refine(img, mask, _guide(model, img, mask), model, RefinementConfig(n_iters=2, erosion_radius=1))
    assert res.prediction.shape == (3, 60, 60)


@pytest.mark.parametrize("kwargs", [dict(n_iters=-1), dict(lr=0), dict(factor=1.0), dict(erosion_radius=-2),
                                    dict(smallest_scale=0)])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        RefinementConfig(**kwargs)


# ---------------------------------------------------------- full pipeline


def test_single_level_is_plain_forward(model):
    img, mask = _scene(size=32)
    out, report = multiscale_inpaint(img, mask, model, RefinementConfig(composite_output=False))
    assert [lv["status"] for lv in report.levels] == [BASE]
    assert out.tobytes() == predict(model, img, mask).tobytes()


def test_stage_count_and_report(model):
    img, mask = _scene(size=128, seed=8)
    cfg = RefinementConfig(n_iters=2, erosion_radius=1)
    out, report = multiscale_inpaint(img, mask, model, cfg)
    assert [(lv["height"], lv["width"]) for lv in report.levels] == [(32, 32), (64, 64), (128, 128)]
    assert len(report.trajectories) == 2
    assert all(len(t) == 3 for t in report.trajectories)
    assert set(report.to_dict()) == {"levels"}


def test_known_region_preserved_bitwise(model):
    img, mask = _scene(size=64, seed=9)
    out, _ = multiscale_inpaint(img, mask, model, RefinementConfig(n_iters=2, erosion_radius=1))
    keep = mask == 0
    assert out[:, keep].tobytes() == img[:, keep].tobytes()
    assert not np.array_equal(out[:, mask > 0], img[:, mask > 0])


def test_deterministic(model):
    img, mask = _scene(size=64, seed=10)
    cfg = RefinementConfig(n_iters=3, erosion_radius=1)
    a, ra = multiscale_inpaint(img, mask, model, cfg)
    b, rb = multiscale_inpaint(img, mask, model, cfg)
    assert a.tobytes() == b.tobytes()
    assert ra.trajectories == rb.trajectories


def test_mismatched_mask_rejected(model):
    img, _ = _scene()
    with pytest.raises(ParameterError):
        multiscale_inpaint(img, np.zeros((10, 10)), model)
