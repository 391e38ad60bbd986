import json

import numpy as np
import pytest

from unoise import tensor as T
from unoise.interpret import (ImportanceMap, export_pgm, grad_cam, importance_from_logits,
                              occlusion_sensitivity, read_pgm, unoise_map)
from unoise.tensor import Tensor
from unoise.unet import SINGLE_LOGIT, UNetConfig, build, forward

from oracles import occlusion_direct


class ThresholdUtility:
    """Callable utility: class-1 logit = x − 0.5 (channel mean), class-0 logit = 0."""

    def __call__(self, batch):
        z = np.asarray(batch).mean(axis=1) - 0.5
        return np.stack([np.zeros_like(z), z], axis=1)


def _blob_image(h=16, w=16):
    x = np.zeros((1, h, w))
    x[0, 4:9, 6:12] = 1.0
    return x


# ---------------------------------------------------------------- U-Noise maps

def _noise_model_with_bias(value):
    model = build(UNetConfig(1, 2, 1, 1, SINGLE_LOGIT), 0)
    model.params["head.conv.weight"].data[:] = 0.0
    model.params["head.conv.bias"].data[:] = value
    return model


def test_unoise_map_all_tolerant_is_zero():
    mask, imap = unoise_map(_noise_model_with_bias(10.0), np.random.default_rng(0).random((1, 8, 8)))
    assert imap.method == "unoise"
    np.testing.assert_array_equal(imap.values, 0.0)
    assert np.all(mask.B > 0.99) and np.all(mask.B < 1)


def test_unoise_importance_peaks_at_most_negative_logit():
    logits = np.full((8, 8), 2.0)
    logits[5, 3] = -9.0
    logits[1, 1] = -1.0
    imap = importance_from_logits(logits)
    assert np.unravel_index(imap.values.argmax(), imap.values.shape) == (5, 3)
    assert imap.values.max() == 1.0 and imap.values.min() == 0.0


def test_unoise_rejects_class_head():
    with pytest.raises(ValueError, match="single"):
        unoise_map(build(UNetConfig(1, 2, 1, 2), 0), np.zeros((1, 8, 8)))


def test_noise_mask_is_sigmoid_of_logits():
    model = build(UNetConfig(1, 2, 1, 1, SINGLE_LOGIT), 3)
    x = np.random.default_rng(1).random((1, 8, 8))
    mask, _ = unoise_map(model, x)
    with T.no_grad():
        logits = forward(model, Tensor(x[None])).data[0]
    np.testing.assert_array_equal(mask.logits, logits)
    np.testing.assert_allclose(mask.B, 1 / (1 + np.exp(-logits)), rtol=1e-12)


def test_rescaling_keeps_argmax(rng):
    for _ in range(20):
        logits = rng.standard_normal((6, 6)) * 4
        raw = np.maximum(-logits, 0)
        if raw.max() == 0:
            continue
        imap = importance_from_logits(logits)
        assert imap.values.argmax() == raw.argmax()


def test_importance_map_validation():
    with pytest.raises(ValueError, match="non-finite"):
        ImportanceMap(np.array([[np.nan]]), "unoise")
    with pytest.raises(ValueError, match="method"):
        ImportanceMap(np.zeros((2, 2)), "lime")
    with pytest.raises(ValueError):
        ImportanceMap(np.zeros(4), "unoise")


# ---------------------------------------------------------------- occlusion

def test_occlusion_matches_enumeration_oracle():
    util = ThresholdUtility()
    x = _blob_image()
    for window, stride, fill in [(5, 2, 0.0), (5, 3, 0.0), (4, 2, 1.0)]:
        imap = occlusion_sensitivity(util, x, window, stride, fill, batch_size=7)
        ref = occlusion_direct(lambda b: util(b).argmax(axis=1), x, window, stride, fill)
        np.testing.assert_array_equal(imap.values, ref)


def test_occlusion_matches_oracle_on_unet():
    model = build(UNetConfig(1, 2, 1, 2), 5)
    x = np.random.default_rng(2).random((1, 16, 16))

    def predict(b):
        with T.no_grad():
            return forward(model, Tensor(b)).data.argmax(axis=1)

    imap = occlusion_sensitivity(model, x, 5, 2)
    np.testing.assert_array_equal(imap.values, occlusion_direct(predict, x, 5, 2))


def test_occlusion_constant_utility_is_zero():
    const = lambda b: np.broadcast_to(np.array([0.0, 1.0])[None, :, None, None],
                                      (len(b), 2) + b.shape[2:])
    imap = occlusion_sensitivity(const, _blob_image(), 5, 2)
    np.testing.assert_array_equal(imap.values, 0.0)


def test_occlusion_single_window_is_constant():
    util = ThresholdUtility()
    x = _blob_image()
    imap = occlusion_sensitivity(util, x, 16, 3, fill=0.0)
    # fill image predicts nothing; original predicts the blob -> dice 0 -> score 1
    np.testing.assert_array_equal(imap.values, 1.0)
    assert imap.flags["positions"] == 1


def test_occlusion_self_fill_is_zero():
    x = _blob_image()
    imap = occlusion_sensitivity(ThresholdUtility(), x, 5, 2, fill=x)
    np.testing.assert_array_equal(imap.values, 0.0)


def test_occlusion_errors():
    with pytest.raises(ValueError, match="stride"):
        occlusion_sensitivity(ThresholdUtility(), _blob_image(), 5, 0)
    with pytest.raises(ValueError, match="window"):
        occlusion_sensitivity(ThresholdUtility(), _blob_image(), 17, 2)


def test_occlusion_importance_concentrates_on_object():
    imap = occlusion_sensitivity(ThresholdUtility(), _blob_image(), 5, 1)
    assert imap.values[4:9, 6:12].mean() > imap.values.mean()


# ---------------------------------------------------------------- Grad-CAM

class LinearNet:
    """Bottleneck A = x (one channel, no downsampling); logits = [0, α·A + β]."""

    def __init__(self, alpha, beta):
        self.alpha, self.beta = alpha, beta

    def encode(self, x):
        return x, None

    def decode(self, a, ctx):
        z = T.scalar_add(T.scalar_mul(a, self.alpha), self.beta)
        return T.concat_channels([T.scalar_mul(a, 0.0), z])


def test_grad_cam_linear_closed_form():
    alpha, beta = 1.5, -0.2
    x = np.random.default_rng(3).random((1, 4, 4))
    imap = grad_cam(LinearNet(alpha, beta), x)
    region = alpha * x[0] + beta > 0
    # d(score)/dA = α on the predicted region, 0 elsewhere; w = α·|region|/(H·W)
    w = alpha * region.mean()
    cam = np.maximum(w * x[0], 0)
    np.testing.assert_allclose(imap.values, cam / cam.max(), atol=1e-8)
    assert imap.flags["empty_target"] is False


def test_grad_cam_empty_target_is_flagged():
    imap = grad_cam(LinearNet(1.0, -10.0), np.random.default_rng(0).random((1, 4, 4)))
    np.testing.assert_array_equal(imap.values, 0.0)
    assert imap.flags["empty_target"] is True


def test_grad_cam_unet_contract():
    model = build(UNetConfig(2, 4, 1, 2), 0)
    model.params["head.conv.bias"].data[:] = [0.0, 5.0]  # everything predicted as target
    before = [p.requires_grad for p in model]
    imap = grad_cam(model, np.random.default_rng(1).random((1, 16, 16)))
    assert imap.values.shape == (16, 16)
    assert 0.0 <= imap.values.min() and imap.values.max() <= 1.0
    assert [p.requires_grad for p in model] == before
    assert all(p.grad is None for p in model)


# ---------------------------------------------------------------- export

def test_pgm_export_round_trip(tmp_path):
    values = np.linspace(-1, 3, 12).reshape(3, 4)
    path = export_pgm(ImportanceMap(values, "occlusion", {"window": 5}), tmp_path / "m.pgm")
    pix = read_pgm(path)
    np.testing.assert_array_equal(pix, np.rint(255 * (values + 1) / 4).astype(int))
    side = json.loads((tmp_path / "m.pgm.json").read_text())
    assert side["method"] == "occlusion" and side["scaling"] == {"min": -1.0, "max": 3.0, "levels": 255}
    text = path.read_text().split("\n")
    assert text[:3] == ["P2", "4 3", "255"]
    again = export_pgm(ImportanceMap(values, "occlusion", {"window": 5}), tmp_path / "n.pgm")
    assert again.read_bytes() == path.read_bytes()


def test_pgm_constant_map(tmp_path):
    path = export_pgm(ImportanceMap(np.full((2, 2), 0.3), "gradcam"), tmp_path / "c.pgm")
    np.testing.assert_array_equal(read_pgm(path), 0)
