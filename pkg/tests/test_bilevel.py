import logging

import numpy as np
import pytest

from diffaug import bilevel as B
from diffaug import estimators as E
from diffaug.data import reduce_and_split, synth_rotor
from diffaug.models import evaluate_loss
from diffaug.policy import PolicyParams


# ---------------------------------------------------------------- quadratic probe
#   L_train(w, d) = (w - d)^2,  L_val(w) = w^2
#   w' = w - 2 zeta (w - d)  and  dL_val(w')/dd = 4 zeta w'

def probe_hypergradient(w, d, zeta, epsilon_scale=0.01):
    return B.finite_difference_hypergradient(
        [np.array(w)], zeta,
        grad_w_train=lambda ws: [2.0 * (ws[0] - d)],
        grad_w_val=lambda ws: [2.0 * ws[0]],
        grad_d_train=lambda ws: -2.0 * (ws[0] - d),
        epsilon_scale=epsilon_scale)


def test_quadratic_probe_matches_unrolled_derivative():
    rng = np.random.default_rng(0)
    for _ in range(100):
        w, d, zeta = rng.normal(), rng.normal(), rng.uniform(0.01, 0.5)
        hyper, info = probe_hypergradient(w, d, zeta)
        w_virtual = w - 2 * zeta * (w - d)
        assert abs(float(hyper) - 4 * zeta * w_virtual) < 1e-4
        assert info["epsilon"] == pytest.approx(0.01 / abs(2 * w_virtual))


def test_doubling_epsilon_changes_little():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w, d, zeta = rng.normal(), rng.normal(), rng.uniform(0.01, 0.5)
        a, _ = probe_hypergradient(w, d, zeta, 0.01)
        b, _ = probe_hypergradient(w, d, zeta, 0.02)
        assert abs(float(a) - float(b)) < 1e-6


def test_linear_in_zeta_when_validation_gradient_is_fixed():
    # a linear validation loss a * w has a gradient that does not depend on
    # where the virtual step lands, so zeta enters only as the outer factor
    rng = np.random.default_rng(2)
    for _ in range(20):
        w, d, zeta, a = rng.normal(), rng.normal(), rng.uniform(0.01, 0.5), rng.normal()
        run = lambda z: B.finite_difference_hypergradient(
            [np.array(w)], z, lambda ws: [2.0 * (ws[0] - d)], lambda ws: [np.array(a)],
            lambda ws: -2.0 * (ws[0] - d))[0]
        assert abs(float(run(2 * zeta)) - 2 * float(run(zeta))) < 1e-9


def test_linear_in_zeta_at_stationary_weights():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d, zeta = rng.normal(), rng.uniform(0.01, 0.5)
        one, _ = probe_hypergradient(d, d, zeta)
        two, _ = probe_hypergradient(d, d, 2 * zeta)
        assert abs(float(two) - 2 * float(one)) < 1e-9


def test_policy_independent_training_loss_gives_zero():
    hyper, _ = B.finite_difference_hypergradient(
        [np.array([0.4, -1.0])], 0.1, lambda ws: [2 * ws[0]], lambda ws: [ws[0] - 1.0],
        lambda ws: np.zeros(3))
    assert np.all(hyper == 0)


def test_vanishing_validation_gradient_returns_none():
    hyper, info = B.finite_difference_hypergradient(
        [np.array([0.4])], 0.1, lambda ws: [ws[0]], lambda ws: [np.zeros(1)], lambda ws: np.ones(1))
    assert hyper is None and info["val_grad_norm"] == 0.0


def test_exact_enumeration_matches_unrolled_objective():
    """Finite-difference hypergradient with the exact policy gradient vs
    central differences of L_val(w - zeta grad_w E_d[L_train(w)]) in d."""
    rng = np.random.default_rng(4)
    n, k, dim = 2, 2, 3
    targets = rng.normal(size=(n, 2, 2, dim))
    v = rng.normal(size=dim)
    w0 = rng.normal(size=dim)
    zeta = 0.2
    params = PolicyParams(rng.normal(size=n), rng.normal(size=(n, k)), np.full((n, k), 0.5))

    def expected_train_grad(p, w):
        _, probs = E.outcome_probabilities(p)
        flat = targets.reshape(-1, dim)
        return probs @ (w - flat)           # grad of E[0.5 |w - T(c, b)|^2]

    def unrolled(p):
        w_virtual = w0 - zeta * expected_train_grad(p, w0)
        return 0.5 * np.sum((w_virtual - v) ** 2)

    def grad_d_train(ws):
        est = E.enumerate_exact_grad(params, lambda c, b: 0.5 * np.sum((ws[0] - targets[(c,) + b]) ** 2))
        return est

    hyper, _ = B.finite_difference_hypergradient(
        [w0], zeta, lambda ws: [expected_train_grad(params, ws[0])], lambda ws: [ws[0] - v], grad_d_train)

    h = 1e-5
    for name, arr, got in (("alpha", params.alpha, hyper.d_alpha), ("beta", params.beta_logits, hyper.d_beta)):
        flat, gflat = arr.reshape(-1), got.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = unrolled(params)
            flat[i] = old - h
            down = unrolled(params)
            flat[i] = old
            assert abs(gflat[i] - (up - down) / (2 * h)) < 1e-4, (name, i)


# ---------------------------------------------------------------- search state

OPS = ("rotate", "invert", "cutout")


@pytest.fixture(scope="module")
def tiny():
    ds = synth_rotor(256, size=8, seed=0)
    return reduce_and_split(ds, 256, 0)


def small_config(**kw):
    base = dict(epochs=1, batch_size=32, ops=OPS, seed=0, n_reduced=256)
    base.update(kw)
    return B.SearchConfig(**base)


def batches(ds, size=32, start=0):
    return ds.images[start:start + size], ds.labels[start:start + size]


@pytest.mark.parametrize("estimator", B.ESTIMATORS)
def test_policy_step_leaves_weights_bit_identical(tiny, estimator):
    train, val = tiny
    state = B.init_state(small_config(estimator=estimator), train.image_shape, 2)
    before = [a.copy() for a in state.model.arrays()]
    alpha_before = state.params.alpha.copy()
    record = B.policy_step(state, batches(train), batches(val))
    assert not record["skipped"]
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, state.model.arrays()))
    assert not np.array_equal(alpha_before, state.params.alpha)


def test_policy_step_rejects_empty_batches(tiny):
    train, val = tiny
    state = B.init_state(small_config(), train.image_shape, 2)
    with pytest.raises(ValueError):
        B.policy_step(state, batches(train), (val.images[:0], val.labels[:0]))


def test_no_augmentation_weight_step_is_plain_sgd(tiny):
    train, _ = tiny
    state = B.init_state(small_config(), train.image_shape, 2)
    state.params.beta_logits[:] = -12.0
    x, y = batches(train)
    grads = evaluate_loss(state.model, x, y).weight_grads
    expected = [a.copy() for a in state.model.arrays()]
    vel = [g.copy() for g in grads]
    for e, v in zip(expected, vel):
        e -= state.weight_opt.lr * (v + state.weight_opt.weight_decay * e)
    B.weight_step(state, (x, y))
    assert all(np.array_equal(a, b) for a, b in zip(expected, state.model.arrays()))


def test_weight_steps_reduce_loss(tiny):
    train, _ = tiny
    state = B.init_state(small_config(), train.image_shape, 2)
    state.params.beta_logits[:] = -12.0
    x, y = train.images[:64], train.labels[:64]
    start = evaluate_loss(state.model, x, y, weight_grads=False).loss
    for _ in range(100):
        B.weight_step(state, (x, y))
    assert evaluate_loss(state.model, x, y, weight_grads=False).loss < 0.5 * start


def test_weight_step_deterministic(tiny):
    train, _ = tiny
    out = []
    for _ in range(2):
        state = B.init_state(small_config(), train.image_shape, 2)
        for i in range(3):
            B.weight_step(state, batches(train, start=32 * i))
        out.append(state.model.arrays())
    assert all(a.tobytes() == b.tobytes() for a, b in zip(*out))


def test_zero_policy_lr_keeps_policy(tiny):
    train, val = tiny
    result = B.run_search(small_config(policy_lr=0.0), train, val)
    p = result.state.params
    assert np.all(p.alpha == 1e-3) and np.all(p.beta == 0.5) and np.all(p.magnitudes == 0.5)


def test_skipped_step_is_counted(tiny, monkeypatch, caplog):
    train, val = tiny
    state = B.init_state(small_config(), train.image_shape, 2)
    monkeypatch.setattr(B, "finite_difference_hypergradient", lambda *a, **k: (None, {"val_grad_norm": 0.0}))
    alpha = state.params.alpha.copy()
    with caplog.at_level(logging.INFO, logger="diffaug.bilevel"):
        record = B.policy_step(state, batches(train), batches(val))
    assert record["skipped"] and state.skipped_steps == 1
    assert np.array_equal(alpha, state.params.alpha)
    assert "skipped" in caplog.text


@pytest.mark.parametrize("estimator", B.ESTIMATORS)
def test_run_search_outputs(tiny, estimator):
    train, val = tiny
    result = B.run_search(small_config(estimator=estimator, epochs=2), train, val)
    assert [m["epoch"] for m in result.metrics] == [1, 2]
    assert set(result.metrics[0]) == set(B.METRIC_COLUMNS)
    assert len(result.policy["subpolicies"]) == 3      # top_n clamped to N
    assert all(np.isfinite(m["val_loss"]) for m in result.metrics)


def test_run_search_deterministic(tiny):
    train, val = tiny
    a = B.run_search(small_config(), train, val).policy
    b = B.run_search(small_config(), train, val).policy
    assert a == b


def test_config_validation():
    with pytest.raises(B.ConfigError):
        B.SearchConfig(estimator="reinforce++")
    with pytest.raises(B.ConfigError):
        B.SearchConfig(tau=0.0)
    with pytest.raises(B.ConfigError):
        B.SearchConfig(pairing="zigzag")
    cfg = B.SearchConfig()
    assert cfg.epochs == 20 and cfg.tau == 0.5 and cfg.epsilon_scale == 0.01 and cfg.top_n == 25
    assert cfg.initial_weight_lr == pytest.approx(0.05)


def test_empty_policy_matches_baseline(tiny):
    train, val = tiny
    cfg = B.TrainConfig(epochs=2, seed=1)
    empty = B.evaluate_policy({"version": 1, "k": 2, "subpolicies": []}, train, val, cfg)
    base = B.evaluate_policy(None, train, val, cfg)
    assert empty["accuracy"] == base["accuracy"]
