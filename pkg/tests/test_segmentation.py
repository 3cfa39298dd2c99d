import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from taskaug.errors import ShapeMismatch
from taskaug.segmentation import (ClassWeights, UNet, dice_per_structure, dice_score,
                                  load_segmenter, predict_volume, save_segmenter,
                                  weighted_cross_entropy)


def dice_oracle(pred, gt, code):
    """Count matches pixel by pixel."""
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        tp += p == code and g == code
        fp += p == code and g != code
        fn += p != code and g == code
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_dice_matches_counting_oracle(seed):
    r = np.random.default_rng(seed)
    pred = r.integers(0, 4, (4, 16, 16))
    gt = r.integers(0, 4, (4, 16, 16))
    for name, code in (("RV", 1), ("Myo", 2), ("LV", 3)):
        assert dice_score(pred, gt, name) == dice_oracle(pred, gt, code)


def test_dice_edge_cases():
    empty = np.zeros((2, 4, 4), int)
    assert dice_score(empty, empty, "LV") == 1.0
    full = np.full((2, 4, 4), 3)
    assert dice_score(empty, full, "LV") == 0.0
    assert dice_per_structure(full, full) == {"RV": 1.0, "Myo": 1.0, "LV": 1.0}
    with pytest.raises(ShapeMismatch):
        dice_score(empty, np.zeros((2, 4, 5)), 1)


def test_uniform_logits_on_background():
    logits = torch.zeros(2, 5, 5, 4)
    target = torch.zeros(2, 5, 5, 4)
    target[..., 0] = 1
    loss = weighted_cross_entropy(logits, target, ClassWeights((0.1, 0.3, 0.3, 0.3)))
    assert float(loss) == pytest.approx(0.1 * math.log(4), abs=1e-6)
    assert float(weighted_cross_entropy(logits, target, include_background=False)) == 0.0


def test_cross_entropy_hand_value():
    logits = torch.tensor([[[[1.0, 2.0, 0.0, -1.0]]]], dtype=torch.float64)
    target = torch.tensor([[[[0.0, 0.5, 0.5, 0.0]]]], dtype=torch.float64)
    logp = torch.log_softmax(logits, -1)[0, 0, 0]
    expected = -(0.3 * 0.5 * logp[1] + 0.3 * 0.5 * logp[2])
    torch.testing.assert_close(weighted_cross_entropy(logits, target), expected)


def test_cross_entropy_logit_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 1, (1, 8, 8, 4))
    target = np.eye(4)[rng.integers(0, 4, (1, 8, 8))]
    t = torch.tensor(logits, requires_grad=True)
    weighted_cross_entropy(t, target).backward()

    def f(x):
        return float(weighted_cross_entropy(torch.tensor(x), target))

    eps = 1e-6
    numeric = np.zeros_like(logits)
    for idx in np.ndindex(logits.shape):
        up, down = logits.copy(), logits.copy()
        up[idx] += eps
        down[idx] -= eps
        numeric[idx] = (f(up) - f(down)) / (2 * eps)
    np.testing.assert_allclose(t.grad.numpy(), numeric, rtol=1e-3, atol=1e-9)


def test_class_weight_validation():
    with pytest.raises(ValueError):
        ClassWeights((0.1, 0.3, 0.3))
    with pytest.raises(ShapeMismatch):
        weighted_cross_entropy(torch.zeros(1, 2, 2, 4), torch.zeros(1, 2, 2, 3))


def test_unet_shapes_and_prediction():
    torch.manual_seed(0)
    net = UNet((4, 4, 8, 8))
    assert net(torch.rand(2, 32, 32, 1)).shape == (2, 32, 32, 4)
    pred = predict_volume(net, np.random.default_rng(0).random((3, 32, 32)), batch_size=2)
    assert pred.shape == (3, 32, 32) and pred.dtype == np.uint8
    assert net.training
    with pytest.raises(ShapeMismatch):
        net(torch.rand(1, 30, 30, 1))


def test_segmenter_checkpoint_is_bit_exact(tmp_path):
    torch.manual_seed(1)
    net = UNet((4, 4, 8, 8))
    net(torch.rand(4, 32, 32, 1))   # move batch-norm statistics away from defaults
    save_segmenter(net, tmp_path / "s.pt", (4, 4, 8, 8))
    back = load_segmenter(tmp_path / "s.pt")
    for k, v in net.state_dict().items():
        assert torch.equal(v, back.state_dict()[k]), k
    x = np.random.default_rng(2).random((2, 32, 32))
    np.testing.assert_array_equal(predict_volume(net, x), predict_volume(back, x))
