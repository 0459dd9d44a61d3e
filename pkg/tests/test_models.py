import math

import numpy as np
import pytest

from diffaug import autodiff as ad
from diffaug.models import (SGD, Adam, adam_step, build_classifier, build_mlp, build_smallcnn, conv3x3,
                            evaluate_loss, forward_loss, linear_lr, load_checkpoint, save_checkpoint,
                            sgd_step)
from conftest import assert_grad_close, central_diff


def test_zero_weights_give_ln2():
    model = build_mlp((4, 4, 1), 2)
    for w in model.weights:
        w.data[...] = 0.0
    loss = forward_loss(model, np.random.default_rng(0).random((5, 4, 4, 1)), np.array([0, 1, 1, 0, 1]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_label_out_of_range():
    model = build_mlp((4, 4, 1), 2)
    with pytest.raises(ValueError):
        forward_loss(model, np.zeros((1, 4, 4, 1)), np.array([2]))


@pytest.mark.parametrize("arch", ["mlp", "smallcnn"])
def test_overfit_small_batch(arch):
    rng = np.random.default_rng(1)
    x = rng.random((8, 8, 8, 1))
    y = np.array([0, 1, 0, 1, 1, 0, 1, 0])
    model = build_classifier(arch, (8, 8, 1), 2, rng)
    opt = SGD(model.arrays(), 0.05, 0.9)
    for _ in range(300):
        opt.step(evaluate_loss(model, x, y).weight_grads)
    assert evaluate_loss(model, x, y, weight_grads=False).loss < 0.01


@pytest.mark.parametrize("arch", ["mlp", "smallcnn"])
def test_weight_gradients_match_finite_differences(arch):
    rng = np.random.default_rng(2)
    x = rng.random((3, 4, 4, 1))
    y = np.array([0, 2, 1])
    model = build_classifier(arch, (4, 4, 1), 3, rng)
    arrays = model.arrays()
    grads = evaluate_loss(model, x, y).weight_grads

    def value():
        return evaluate_loss(model, x, y, weight_grads=False).loss

    for a, g in zip(arrays, grads):
        assert_grad_close(g, central_diff(value, a))


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.random((2, 4, 4, 1))
    y = np.array([1, 0])
    model = build_smallcnn((4, 4, 1), 2, rng=rng)
    g = evaluate_loss(model, x, y, input_grad=True).input_grad
    assert_grad_close(g, central_diff(lambda: evaluate_loss(model, x, y, weight_grads=False).loss, x))


def test_centre_tap_convolution_is_a_linear_layer():
    rng = np.random.default_rng(4)
    c_in, c_out = 3, 5
    x = rng.normal(size=(2, 6, 6, c_in))
    w = rng.normal(size=(c_in, c_out))
    b = rng.normal(size=c_out)
    kernel = np.zeros((9 * c_in, c_out))
    kernel[4 * c_in:5 * c_in] = w          # tap (1, 1) is the centre
    out = conv3x3(ad.Tensor(x), ad.Tensor(kernel), ad.Tensor(b)).data
    assert np.allclose(out, x @ w + b, atol=1e-12)


# ---------------------------------------------------------------- optimisers

def test_sgd_plain_step():
    p = np.array([1.0, -2.0])
    sgd_step(SGD([p], 0.1, momentum=0.0), grads=[np.array([0.5, 1.0])])
    assert np.allclose(p, [0.95, -2.1], atol=1e-15)


def test_sgd_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    opt = SGD([p], 0.1, momentum=0.9)
    for _ in range(5):
        opt.step([np.zeros(2)])
    assert p.tolist() == [1.0, -2.0]


def test_sgd_quadratic_bowl():
    target = np.array([1.5, -0.5, 3.0])
    p = np.zeros(3)
    opt = SGD([p], 0.1, momentum=0.9)
    for _ in range(500):
        opt.step([p - target])
    assert np.max(np.abs(p - target)) < 1e-6


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        SGD([np.zeros(2)], 0.1).step([np.zeros(3)])


def test_adam_first_step_is_lr_sign():
    p = np.array([0.3, 0.3, 0.3])
    adam_step(Adam([p], 5e-3), grads=[np.array([2.0, -0.01, 40.0])])
    assert np.allclose(p - 0.3, [-5e-3, 5e-3, -5e-3], rtol=1e-5)


def test_adam_zero_gradient_keeps_params():
    p = np.array([0.3])
    opt = Adam([p], 5e-3)
    for _ in range(3):
        opt.step([np.zeros(1)])
    assert p.tolist() == [0.3]


def test_adam_three_step_trace():
    # g = 1 each step: m_t = 1 - 0.5^t and v_t = 1 - 0.999^t, so both
    # bias-corrected moments are exactly 1 and every step is lr / (1 + eps)
    p = np.array([1.0])
    opt = Adam([p], 5e-3, (0.5, 0.999), 1e-8)
    expected = 1.0
    for t in range(1, 4):
        opt.step([np.ones(1)])
        m_hat = (1 - 0.5**t) / (1 - 0.5**t)
        v_hat = (1 - 0.999**t) / (1 - 0.999**t)
        expected -= 5e-3 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert p[0] == pytest.approx(expected, abs=1e-15)
    assert p[0] == pytest.approx(1.0 - 0.015, abs=1e-9)


def test_linear_lr_rule():
    assert linear_lr(128) == pytest.approx(0.05)
    assert linear_lr(256) == pytest.approx(0.1)


# ---------------------------------------------------------------- determinism / checkpoints

def test_training_is_deterministic():
    from diffaug.bilevel import TrainConfig, train_classifier
    from diffaug.data import synth_rotor

    ds = synth_rotor(200, seed=1)
    runs = [train_classifier(ds, None, TrainConfig(epochs=2, seed=3)).arrays() for _ in range(2)]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(*runs))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=7), np.array(2.5)]
    save_checkpoint(tmp_path / "w.ckpt", arrays)
    loaded = load_checkpoint(tmp_path / "w.ckpt")
    assert all(a.tobytes() == b.tobytes() and a.shape == b.shape for a, b in zip(arrays, loaded))
    raw = (tmp_path / "w.ckpt").read_bytes()
    assert raw[:8] == b"AUGCKPT1"
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
