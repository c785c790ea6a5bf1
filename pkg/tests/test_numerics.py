import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prodembed.numerics import (
    AdamState,
    GradTape,
    adam_step,
    grad_check,
    masked_cross_entropy,
    ops,
    softmax,
)


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3))


def test_softmax_no_overflow():
    out = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_closed_form():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(softmax(x), expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(softmax(x), [0.09003, 0.24473, 0.66524], atol=1e-4)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(FloatingPointError):
        softmax(np.array([0.0, bad]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    out = softmax(x)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_ce_uniform_is_log_v():
    V = 37
    loss = masked_cross_entropy(np.zeros((4, V)), [0, 1, 2, 3], [False, True, False, False])
    assert float(loss.value) == pytest.approx(math.log(V), abs=1e-12)


def test_masked_ce_margin_limit():
    losses = []
    for margin in (1.0, 10.0, 100.0):
        logits = np.zeros((1, 5))
        logits[0, 2] = margin
        losses.append(float(masked_cross_entropy(logits, [2], [True]).value))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-30


def test_masked_ce_ignores_unmasked_positions():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(5, 6))
    targets = rng.integers(0, 6, size=5)
    flags = np.array([True, False, True, False, False])
    base = float(masked_cross_entropy(logits, targets, flags).value)
    perturbed = logits.copy()
    perturbed[[1, 3, 4]] += rng.normal(scale=5.0, size=(3, 6))
    assert float(masked_cross_entropy(perturbed, targets, flags).value) == base


def test_masked_ce_gradient_zero_off_mask():
    rng = np.random.default_rng(1)
    tape = GradTape()
    logits = tape.watch(rng.normal(size=(6, 9)))
    flags = np.array([0, 1, 0, 1, 1, 0], dtype=bool)
    loss = masked_cross_entropy(logits, rng.integers(0, 9, size=6), flags)
    (g,) = tape.gradient(loss, [logits])
    assert np.all(g[~flags] == 0.0)
    assert np.abs(g[flags]).sum() > 0


def test_masked_ce_requires_a_mask():
    with pytest.raises(ValueError):
        masked_cross_entropy(np.zeros((2, 3)), [0, 1], [False, False])


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0, 3.0])
    assert state.step == 1


def test_adam_first_step_hand_evaluated():
    # t=1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    params = {"p": np.array([1.0])}
    state = AdamState.for_params(params, lr=0.1)
    adam_step(params, {"p": np.array([1.0])}, state)
    assert params["p"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert params["p"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_identical_params_identical_updates():
    params = {"a": np.array([0.5, 0.5]), "b": np.array([0.5, 0.5])}
    state = AdamState.for_params(params, lr=0.01)
    for g in (0.3, -1.2, 2.0):
        adam_step(params, {"a": np.full(2, g), "b": np.full(2, g)}, state)
    np.testing.assert_array_equal(params["a"], params["b"])


def test_adam_shape_mismatch():
    params = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(4)}, AdamState.for_params(params))


def test_adam_step_counter_increments():
    params = {"w": np.zeros(2)}
    state = AdamState.for_params(params)
    for t in range(1, 4):
        adam_step(params, {"w": np.ones(2)}, state)
        assert state.step == t


def test_grad_check_square():
    def f(p):
        x = p["x"]
        return float(x[0] ** 2), {"x": 2 * x}

    err = grad_check(f, {"x": np.array([3.0])}, eps=1e-5)
    assert err < 1e-8


def test_grad_check_detects_wrong_gradient():
    def f(p):
        x = p["x"]
        return float(x[0] ** 2), {"x": 3 * x}

    assert grad_check(f, {"x": np.array([3.0])}) > 0.1


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        grad_check(lambda p: (0.0, {"x": np.zeros(1)}), {"x": np.zeros(1)}, eps=1e-1)


def _tape_fn(build):
    """Wrap a tape expression over named params into a grad_check objective."""

    def fn(params):
        tape = GradTape()
        bound = {k: tape.watch(v) for k, v in params.items()}
        loss = build(bound)
        grads = tape.gradient(loss, list(bound.values()))
        return float(loss.value), dict(zip(bound, grads))

    return fn


@pytest.mark.parametrize(
    "name,build",
    [
        ("layer_norm", lambda b: ops.sum_(ops.tanh(ops.layer_norm(b["x"], b["g"], b["b"])) * b["w"])),
        ("gelu", lambda b: ops.sum_(ops.gelu(b["x"]) * b["w"])),
        ("masked_softmax", lambda b: ops.sum_(
            ops.masked_softmax(b["x"], np.array([True, True, False, True, True, True])) * b["w"])),
        ("sigmoid_matmul", lambda b: ops.sum_(ops.sigmoid(b["x"] @ b["m"]))),
        ("concat_stack", lambda b: ops.sum_(
            ops.stack([ops.concat([b["x"], b["w"]], axis=-1), ops.concat([b["w"], b["x"]], axis=-1)])
            * ops.stack([ops.concat([b["w"], b["w"]], axis=-1)] * 2))),
    ],
)
def test_primitive_gradients(name, build):
    rng = np.random.default_rng(3)
    params = {
        "x": rng.normal(size=(4, 6)),
        "g": rng.normal(size=6),
        "b": rng.normal(size=6),
        "w": rng.normal(size=(4, 6)),
        "m": rng.normal(size=(6, 3)),
    }
    assert grad_check(_tape_fn(build), params, n_samples=None) < 1e-6


@pytest.mark.parametrize("a_shape,b_shape", [((4, 3), (3,)), ((2, 4, 3), (3,)), ((3,), (3,)), ((3,), (3, 2))])
def test_matmul_vector_operand_gradients(a_shape, b_shape):
    rng = np.random.default_rng(6)
    params = {"a": rng.normal(size=a_shape), "b": rng.normal(size=b_shape)}
    out_shape = (np.zeros(a_shape) @ np.zeros(b_shape)).shape
    w = rng.normal(size=out_shape)
    assert grad_check(_tape_fn(lambda b: ops.sum_((b["a"] @ b["b"]) * w)), params, n_samples=None) < 1e-6


def test_matmul_array_on_left():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(2, 4))
    params = {"x": rng.normal(size=(4, 3))}
    assert grad_check(_tape_fn(lambda b: ops.sum_(ops.tanh(m @ b["x"]))), params, n_samples=None) < 1e-6


def test_take_rows_and_getitem_gradients():
    rng = np.random.default_rng(4)
    ids = np.array([[0, 2, 2], [1, 0, 3]])

    def build(b):
        x = ops.take_rows(b["t"], ids)
        return ops.sum_(ops.getitem(ops.reshape(x, (6, 3)), np.array([0, 2, 5])) * b["w"])

    params = {"t": rng.normal(size=(4, 3)), "w": rng.normal(size=(3, 3))}
    assert grad_check(_tape_fn(build), params, n_samples=None) < 1e-6


def test_bce_gradient():
    rng = np.random.default_rng(5)
    labels = np.array([0, 1, 1, 0, 1])
    params = {"z": rng.normal(size=5) * 3}
    err = grad_check(_tape_fn(lambda b: ops.bce_with_logits(b["z"], labels)), params, n_samples=None)
    assert err < 1e-6


def test_tape_unused_source_gets_zero():
    tape = GradTape()
    a, b = tape.watch(np.ones(3)), tape.watch(np.ones(2))
    ga, gb = tape.gradient(ops.sum_(a * a), [a, b])
    np.testing.assert_array_equal(ga, 2 * np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(2))


def test_dropout_identity_without_rng():
    x = np.arange(6.0)
    np.testing.assert_array_equal(ops.dropout(x, 0.5, None).value, x)
