from __future__ import annotations

import numpy as np
import pytest

from stcnet.autodiff import (
    NonFiniteError,
    SurrogateConfig,
    Tape,
    Tensor,
    add,
    conv2d,
    detach,
    group_norm,
    mul,
    parameter,
    reshape,
    sigmoid,
    sum_all,
    surrogate_heaviside,
    tanh,
    transpose,
)

from conftest import check_op_gradients, max_rel_err, numeric_grad


# ---------------------------------------------------------------------------
# backward basics


def test_backward_tanh_at_zero():
    with Tape() as tape:
        x = parameter(np.array(0.0))
        loss = tanh(x)
    grads = tape.backward(loss)
    assert grads[x] == 1.0


def test_backward_bilinear():
    a_val = np.array([1.0, -2.0, 3.0])
    b_val = np.array([0.5, 4.0, -1.0])
    with Tape() as tape:
        a = parameter(a_val)
        b = parameter(b_val)
        loss = sum_all(mul(a, b))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[a], b_val)
    np.testing.assert_array_equal(grads[b], a_val)


def test_backward_requires_scalar():
    with Tape() as tape:
        x = parameter(np.ones(3))
        y = mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_foreign_node():
    with Tape():
        x = parameter(np.array(1.0))
        y = tanh(x)
    with Tape() as other:
        pass
    with pytest.raises(ValueError, match="tape"):
        other.backward(y)


def test_backward_deterministic_bitwise(rng):
    x_val = rng.normal(size=(4, 7))

    def run():
        with Tape() as tape:
            x = parameter(x_val)
            loss = sum_all(mul(tanh(x), x))
        return tape.backward(loss)[x]

    g1, g2 = run(), run()
    np.testing.assert_array_equal(g1, g2)


def test_gradient_accumulates_over_reuse(rng):
    x_val = rng.normal(size=5)
    with Tape() as tape:
        x = parameter(x_val)
        loss = sum_all(add(mul(x, x), x))   # d/dx = 2x + 1
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x], 2.0 * x_val + 1.0, rtol=1e-12)


# ---------------------------------------------------------------------------
# detach


def test_detach_forward_identity(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    d = detach(x)
    assert np.array_equal(d.data, x.data)
    assert not d.requires_grad


def test_detach_cuts_product_rule(rng):
    x_val = rng.normal(size=6)
    with Tape() as tape:
        x = parameter(x_val)
        loss = sum_all(mul(detach(x), x))
    grads = tape.backward(loss)
    # only the undetached branch contributes: d/dx = detach(x)
    np.testing.assert_array_equal(grads[x], x_val)


def test_detach_fully_cut_path_zero_grad(rng):
    with Tape() as tape:
        x = parameter(rng.normal(size=4))
        loss = sum_all(detach(x))
    grads = tape.backward(loss)
    assert x not in grads


def test_detach_never_changes_forward(rng):
    x_val = rng.normal(size=(2, 3))
    with Tape():
        x = parameter(x_val)
        direct = sum_all(mul(tanh(x), x))
        cut = sum_all(mul(tanh(detach(x)), x))
    assert direct.data == cut.data


# ---------------------------------------------------------------------------
# elementwise kernels: values and finite differences


def test_elementwise_gradients(rng):
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    check_op_gradients(lambda t: add(t["a"], t["b"]), {"a": a, "b": b})
    check_op_gradients(lambda t: mul(t["a"], t["b"]), {"a": a, "b": b})
    check_op_gradients(lambda t: tanh(t["a"]), {"a": a})
    check_op_gradients(lambda t: sigmoid(t["a"]), {"a": a})


def test_broadcast_gradients(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(3, 1))
    check_op_gradients(lambda t: mul(t["a"], t["b"]), {"a": a, "b": b})
    check_op_gradients(lambda t: add(t["a"], t["b"]), {"a": a, "b": b})


def test_reshape_transpose_gradients(rng):
    a = rng.normal(size=(2, 3, 4))
    check_op_gradients(lambda t: reshape(t["a"], (6, 4)), {"a": a})
    check_op_gradients(lambda t: transpose(t["a"], (2, 0, 1)), {"a": a})


def test_scalar_operand_folding(rng):
    x_val = rng.normal(size=4)
    with Tape() as tape:
        x = parameter(x_val)
        loss = sum_all(2.0 * x - 1.0 + (-x) * 0.5)
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x], np.full(4, 1.5), rtol=1e-12)


def test_dtype_mismatch_rejected():
    a = Tensor(np.zeros(3, dtype=np.float64))
    b = Tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(TypeError, match="dtype"):
        add(a, b)


# ---------------------------------------------------------------------------
# convolution


def test_conv_allones_covers_image():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 5, 5)))
    out = conv2d(x, w, padding=2)
    # the padded 5x5 window always covers the whole 3x3 image
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(2, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = conv2d(x, w, padding=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_input_gradient_finite_difference(rng):
    x = rng.normal(size=(2, 4, 8, 8))
    w = rng.normal(size=(3, 4, 3, 3))

    def f(xv):
        return float(np.sum(conv2d(Tensor(xv), Tensor(w), padding=1).data))

    with Tape() as tape:
        xt = parameter(x)
        loss = sum_all(conv2d(xt, Tensor(w), padding=1))
    ad = tape.backward(loss)[xt]
    err = max_rel_err(ad, numeric_grad(f, x))
    assert err < 1e-4


@pytest.mark.parametrize("groups,cin,cout,k,pad", [
    (1, 4, 3, 3, 1),
    (2, 4, 6, 3, 1),
    (4, 4, 4, 5, 2),   # depthwise fast path
    (3, 3, 3, 1, 0),   # 1x1 depthwise (per-channel circuit)
])
def test_conv_all_gradients(rng, groups, cin, cout, k, pad):
    arrays = {
        "x": rng.normal(size=(2, cin, 6, 6)),
        "w": rng.normal(size=(cout, cin // groups, k, k)),
        "b": rng.normal(size=cout),
    }
    check_op_gradients(
        lambda t: conv2d(t["x"], t["w"], t["b"], groups=groups, padding=pad), arrays)


def test_conv_shape_errors(rng):
    x = Tensor(rng.normal(size=(1, 4, 5, 5)))
    with pytest.raises(ValueError, match="groups"):
        conv2d(x, Tensor(rng.normal(size=(6, 2, 3, 3))), groups=3)
    with pytest.raises(ValueError, match="Cin"):
        conv2d(x, Tensor(rng.normal(size=(6, 3, 3, 3))), groups=1)
    with pytest.raises(ValueError, match="bias"):
        conv2d(x, Tensor(rng.normal(size=(6, 4, 3, 3))), Tensor(np.zeros(5)))


# ---------------------------------------------------------------------------
# group norm


def test_group_norm_constant_input_collapses_to_zero():
    x = Tensor(np.full((2, 4, 3, 3), 7.5))
    out = group_norm(x, 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros_like(x.data))


def test_group_norm_scale_annihilation(rng):
    x = Tensor(rng.normal(size=(2, 4, 3, 3)))
    out = group_norm(x, 2, Tensor(np.zeros(4)), Tensor(np.full(4, 3.25)))
    np.testing.assert_array_equal(out.data, np.full(x.shape, 3.25))


def test_group_norm_moments(rng):
    # large variance so the eps bias stays below the tolerance
    x = Tensor(rng.normal(0.0, 100.0, size=(3, 8, 5, 5)))
    out = group_norm(x, 4, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    grouped = out.data.reshape(3, 4, 2 * 25)
    assert np.abs(grouped.mean(axis=2)).max() < 1e-10
    assert np.abs(grouped.var(axis=2) - 1.0).max() < 1e-6


def test_group_norm_gradients(rng):
    arrays = {
        "x": rng.normal(size=(2, 6, 4, 4)),
        "gamma": rng.normal(size=6),
        "beta": rng.normal(size=6),
    }
    check_op_gradients(
        lambda t: group_norm(t["x"], 3, t["gamma"], t["beta"]), arrays)


def test_group_norm_divisibility_error(rng):
    x = Tensor(rng.normal(size=(1, 6, 2, 2)))
    with pytest.raises(ValueError, match="divide"):
        group_norm(x, 4, Tensor(np.ones(6)), Tensor(np.zeros(6)))


# ---------------------------------------------------------------------------
# surrogate heaviside


def test_surrogate_forward_step_values():
    cfg = SurrogateConfig()
    out = surrogate_heaviside(Tensor(np.array([1.5, 0.5, 1.0])), 1.0, cfg)
    np.testing.assert_array_equal(out.data, [1.0, 0.0, 1.0])


def test_surrogate_backward_at_threshold():
    cfg = SurrogateConfig(width=2.0)
    with Tape() as tape:
        x = parameter(np.array(1.0))
        loss = surrogate_heaviside(x, 1.0, cfg)
    grads = tape.backward(loss)
    assert grads[x] == pytest.approx(1.0)   # width/2 at u = 0


def test_surrogate_backward_one_above_threshold():
    cfg = SurrogateConfig(width=2.0)
    with Tape() as tape:
        x = parameter(np.array(2.0))
        loss = surrogate_heaviside(x, 1.0, cfg)
    grads = tape.backward(loss)
    assert grads[x] == pytest.approx(1.0 / (1.0 + np.pi ** 2), rel=1e-12)


def test_surrogate_derivative_properties(rng):
    cfg = SurrogateConfig(width=2.0)
    u = rng.normal(0.0, 3.0, size=100)
    d = cfg.derivative(u)
    assert np.all(d >= 0.0)
    np.testing.assert_allclose(d, cfg.derivative(-u), rtol=1e-12)
    assert cfg.derivative(np.array(0.0)) >= d.max()


def test_surrogate_smooth_mode_matches_derivative(rng):
    cfg = SurrogateConfig(width=2.0, smooth=True)
    x = rng.normal(size=8)

    def f(xv):
        return float(np.sum(surrogate_heaviside(Tensor(xv), 1.0, cfg).data))

    with Tape() as tape:
        xt = parameter(x)
        loss = sum_all(surrogate_heaviside(xt, 1.0, cfg))
    ad = tape.backward(loss)[xt]
    assert max_rel_err(ad, numeric_grad(f, x)) < 1e-6


# ---------------------------------------------------------------------------
# non-finite guard


def test_nonfinite_result_raises_named_error():
    big = Tensor(np.array(1e308))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
        mul(big, big)


def test_nonfinite_in_conv_raises():
    x = Tensor(np.full((1, 1, 2, 2), 1e308))
    w = Tensor(np.full((1, 1, 1, 1), 1e308))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="conv2d"):
        conv2d(x, w)
