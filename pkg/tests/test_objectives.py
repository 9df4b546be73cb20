import numpy as np
import pytest

from eegmoe.model import PriseModel, variant_config
from eegmoe.model.tokenizer import psd_db
from eegmoe.objectives import (channel_mask, class_weights, combine_pretrain, loss_gpt, loss_mae, loss_wce,
                               n_masked, patch_mask, pretrain_loss, reference_targets)
from eegmoe.signals.synth import DEFAULT_MONTAGE
from eegmoe.tensor import RngStream, Tensor, ops
from eegmoe.tensor.core import backward


def _sig(b=2, t=4, seed=0):
    return np.random.default_rng(seed).normal(size=(b, t, 12, 256)) * 1e-5


@pytest.mark.parametrize("n,expected", [(4, 2), (5, 3), (12, 6), (7, 4), (1, 1)])
def test_mask_count_rounding(n, expected):
    assert n_masked(n) == expected


def test_patch_mask_covers_whole_patches():
    m = patch_mask(3, 5, 12, RngStream(0))
    per_patch = m.all(axis=2) | ~m.any(axis=2)
    assert per_patch.all()
    assert (m.all(axis=2).sum(1) == 3).all()


def test_channel_mask_covers_whole_channels():
    m = channel_mask(3, 4, 12, RngStream(1))
    assert (m.all(axis=1).sum(1) == 6).all()
    assert (m.any(axis=1) == m.all(axis=1)).all()


def test_mae_loss_hand_value():
    pred = Tensor(np.zeros((1, 1, 2, 3)))
    target = np.array([[[[3.0, 4.0, 0.0], [1.0, 0.0, 0.0]]]])
    omega = np.array([[[True, False]]])
    assert loss_mae(pred, target, omega).item() == pytest.approx(5.0)
    with pytest.raises(ValueError):
        loss_mae(pred, target, np.zeros((1, 1, 2), bool))


def test_gpt_loss_shifts_by_one_patch():
    target = np.arange(3 * 2 * 4, dtype=float).reshape(1, 3, 2, 4)
    pred = Tensor(target[:, [1, 2, 2]])          # perfect next-patch prediction on the first two
    assert loss_gpt(pred, target).item() == pytest.approx(0.0)
    with pytest.raises(ValueError):
        loss_gpt(Tensor(target[:, :1]), target[:, :1])


def test_reference_targets_layout():
    sig = _sig(1, 1)
    ref = reference_targets(sig, 1e5, 256)
    assert ref.shape == (1, 1, 12, 256 + 129)
    np.testing.assert_allclose(ref[..., :256], sig * 1e5)
    spec = ref[..., 256:]
    np.testing.assert_allclose(spec.mean(-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(spec.std(-1), 1.0, atol=1e-5)


def test_psd_of_sinusoid_peaks_at_its_frequency():
    t = np.arange(256) / 256
    spec = psd_db(np.sin(2 * np.pi * 10 * t), 256).data
    assert int(np.argmax(spec)) == 10


def test_class_weights_mean_one_inverse_frequency():
    w = class_weights(np.array([0, 0, 0, 1]), 2)
    assert w.mean() == pytest.approx(1.0)
    assert w[1] / w[0] == pytest.approx(3.0)


def test_weighted_ce_matches_manual():
    logits = np.array([[2.0, 0.0], [0.0, 1.0]])
    w = np.array([0.5, 1.5])
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    expected = -(w[0] * lp[0, 0] + w[1] * lp[1, 1]) / 2
    assert loss_wce(Tensor(logits), np.array([0, 1]), w).item() == pytest.approx(expected)


def test_combine_pretrain():
    out = combine_pretrain(Tensor(3.0), Tensor(6.0), Tensor(9.0), Tensor(2.0), beta=0.5)
    assert out.item() == pytest.approx(7.0)


def test_masked_raw_values_get_zero_gradient():
    model = PriseModel(variant_config("tiny", n_domains=2), 4).eval()
    raw = _sig()
    sig = Tensor(raw, requires_grad=True)
    mask = patch_mask(2, 4, 12, RngStream(2)) | channel_mask(2, 4, 12, RngStream(3))
    fwd = model.encode(sig, DEFAULT_MONTAGE, "pretrain", mask=mask, domains=np.array([0, 1]))
    pred, _ = model.reconstruct(fwd.h, DEFAULT_MONTAGE, np.array([0, 1]))
    backward(loss_mae(pred, reference_targets(raw, 1e5, 256), mask))
    assert np.all(sig.grad[mask] == 0.0)
    assert np.any(sig.grad[~mask] != 0.0)


def test_causal_pass_has_no_path_from_future_patches():
    model = PriseModel(variant_config("tiny", n_domains=2), 4).eval()
    for t in range(3):
        sig = Tensor(_sig(), requires_grad=True)
        fwd = model.encode(sig, DEFAULT_MONTAGE, "pretrain", domains=np.array([0, 1]), causal=True)
        pred, _ = model.reconstruct(fwd.h, DEFAULT_MONTAGE, np.array([0, 1]))
        backward(ops.sum(pred[:, t] ** 2))
        assert np.all(sig.grad[:, t + 1:] == 0.0)
        assert np.any(sig.grad[:, : t + 1] != 0.0)


def test_pretrain_loss_parts_and_determinism():
    model = PriseModel(variant_config("tiny", n_domains=2), 4)
    sig = _sig()
    a = pretrain_loss(model, sig, DEFAULT_MONTAGE, np.array([0, 1]), RngStream(5))
    b = pretrain_loss(model, sig, DEFAULT_MONTAGE, np.array([0, 1]), RngStream(5))
    assert a.values() == b.values()
    v = a.values()
    assert v["total"] == pytest.approx((v["mae_tp"] + v["mae_ch"] + v["gpt"]) / 3 + 1e-5 * v["aux"])
    # stats: every pool appears once per pass, three passes
    assert len(a.stats) == 3 * len(model.pools())
