import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv2d_naive, conv2d_ref, maxpool_ref, ReferenceModel
from recipnet import kernels
from recipnet.nn import (ConvBlock, GraphError, ModelConfig, NonFiniteError, OptimState, Tensor,
                         adam_step, backward, conv2d, forward, global_avg_pool, init_params, linear,
                         load_checkpoint, loss_and_grads, maxpool2d, mse_loss, relu, save_checkpoint)
from recipnet.nn.checkpoint import CheckpointError, params_from_bytes, params_to_bytes
from recipnet.nn.ops import ShapeError, flatten_scalar

SMALL = ModelConfig(input_shape=(4, 16, 8), conv_blocks=(ConvBlock(4), ConvBlock(6)), dense=(5,))


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


# --------------------------------------------------------------------------
# kernels


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9),
       st.sampled_from([(1, 1), (3, 3), (2, 3)]), st.integers(1, 2), st.integers(0, 2),
       st.integers(0, 10**6))
def test_conv2d_matches_naive(n, c, h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    if h + 2 * pad < k[0] or w + 2 * pad < k[1]:
        return
    x, wt, b = rand(rng, n, c, h, w), rand(rng, 2, c, *k), rand(rng, 2)
    got = conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
    want = conv2d_naive(x.astype(np.float64), wt.astype(np.float64), b.astype(np.float64), stride, pad)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) <= 1e-5 * max(1.0, np.abs(want).max())


def test_fast_reference_agrees_with_naive():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((2, 3, 7, 6)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    np.testing.assert_allclose(conv2d_ref(x, w, b, 2, 1), conv2d_naive(x, w, b, 2, 1), atol=1e-12)


@pytest.mark.parametrize("stride, pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_im2col_col2im_adjoint_and_backends(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rand(rng, 2, 3, 9, 7)
    cols = kernels.NUMBA_KERNELS["im2col"](x, 3, 2, stride, pad)
    np.testing.assert_array_equal(cols, kernels.NUMPY_KERNELS["im2col"](x, 3, 2, stride, pad))
    c = rand(rng, *cols.shape)
    back_nb = kernels.NUMBA_KERNELS["col2im"](c, 2, 3, 9, 7, 3, 2, stride, pad)
    back_np = kernels.NUMPY_KERNELS["col2im"](c, 2, 3, 9, 7, 3, 2, stride, pad)
    np.testing.assert_allclose(back_nb, back_np, atol=1e-5)
    lhs = np.sum(cols.astype(np.float64) * c)
    rhs = np.sum(x.astype(np.float64) * back_nb)
    assert lhs == pytest.approx(rhs, rel=1e-5)


def test_maxpool_backends_and_routing():
    rng = np.random.default_rng(1)
    x = rand(rng, 2, 3, 7, 6)
    o1, a1 = kernels.NUMBA_KERNELS["maxpool_fwd"](x)
    o2, a2 = kernels.NUMPY_KERNELS["maxpool_fwd"](x)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    np.testing.assert_array_equal(o1, maxpool_ref(x))
    g = rand(rng, *o1.shape)
    b1 = kernels.NUMBA_KERNELS["maxpool_bwd"](g, a1, 7, 6)
    np.testing.assert_array_equal(b1, kernels.NUMPY_KERNELS["maxpool_bwd"](g, a2, 7, 6))
    assert np.sum(b1) == pytest.approx(np.sum(g), rel=1e-5)
    assert np.all(b1[:, :, 6, :] == 0)  # odd trailing row dropped
    assert np.count_nonzero(b1) == np.count_nonzero(g)


# --------------------------------------------------------------------------
# autodiff


def test_dense_layer_closed_form_gradient():
    rng = np.random.default_rng(2)
    x, w, b = rand(rng, 5, 3), rand(rng, 1, 3), rand(rng, 1)
    y = rng.standard_normal(5)
    wt, bt = Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)
    out = linear(Tensor(x), wt, bt)
    resid = out.data[:, 0].astype(np.float64) - y
    backward(mse_loss(flatten_scalar(out), y))
    np.testing.assert_allclose(wt.grad[0], 2 / 5 * resid @ x, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(bt.grad, [2 / 5 * resid.sum()], rtol=1e-5, atol=1e-6)


def test_relu_gap_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rand(rng, 2, 3, 4, 4), requires_grad=True)
    out = global_avg_pool(relu(x))
    w = Tensor(np.ones((1, 3), np.float32))
    loss = mse_loss(flatten_scalar(linear(out, w, Tensor(np.zeros(1, np.float32)))), np.zeros(2))
    backward(loss)
    s = np.maximum(x.data, 0).mean(axis=(2, 3)).sum(axis=1)
    want = (2 / 2 * s)[:, None, None, None] / 16 * (x.data > 0)
    np.testing.assert_allclose(x.grad, want, rtol=1e-5, atol=1e-7)


def test_backward_twice_raises():
    t = Tensor(np.ones((1, 1), np.float32), requires_grad=True)
    loss = mse_loss(_scalar_head(t), np.zeros(1))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def _scalar_head(t):
    return flatten_scalar(linear(t, Tensor(np.ones((1, 1), np.float32)), Tensor(np.zeros(1, np.float32))))


def test_unused_parameter_gets_no_gradient():
    used = Tensor(np.ones((1, 1), np.float32), requires_grad=True)
    unused = Tensor(np.ones((1, 1), np.float32), requires_grad=True)
    backward(mse_loss(_scalar_head(used), np.zeros(1)))
    assert used.grad is not None and unused.grad is None


def test_backward_without_grad_inputs_raises():
    loss = mse_loss(_scalar_head(Tensor(np.ones((1, 1), np.float32))), np.zeros(1))
    with pytest.raises(GraphError):
        backward(loss)


def test_nonfinite_output_raises():
    x = Tensor(np.array([[np.inf]], np.float32))
    with pytest.raises(NonFiniteError):
        relu(x)


def test_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 1, 4))))


def test_inputs_not_modified():
    rng = np.random.default_rng(4)
    p = init_params(SMALL, 0)
    before = {k: v.copy() for k, v in p.tensors.items()}
    x = rand(rng, 3, 4, 16, 8)
    x0 = x.copy()
    loss_and_grads(p, x, np.full(3, 100.0))
    assert all(np.array_equal(before[k], p.tensors[k]) for k in before)
    assert np.array_equal(x, x0)


# --------------------------------------------------------------------------
# model


def test_model_matches_float64_reference():
    rng = np.random.default_rng(5)
    p = init_params(SMALL, 1)
    x = rand(rng, 4, 4, 16, 8)
    _, want = ReferenceModel(SMALL, p.tensors).stage_inputs(x.astype(np.float64))
    np.testing.assert_allclose(forward(p, x), want, rtol=1e-5)


def test_zero_head_predicts_mid_range():
    p = init_params(SMALL, 0)
    p.tensors["out.weight"][:] = 0
    x = np.random.default_rng(0).random((3, 4, 16, 8))
    assert np.all(forward(p, x) == 110.0)
    assert forward(p, x[0]) == 110.0


def test_default_model_shapes():
    cfg = ModelConfig(input_shape=(4, 64, 16))
    assert cfg.layer_shapes()[-1] == (64, 4, 1)
    with pytest.raises(ValueError):
        ModelConfig(input_shape=(4, 8, 8))
    assert init_params(cfg, 0).num_parameters() == 60721


def test_init_deterministic_and_bounded():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    w = a.tensors["conv0.weight"]
    assert np.abs(w).max() <= np.sqrt(6 / (4 * 9))
    assert np.all(a.tensors["conv0.bias"] == 0)


def test_training_steps_reduce_loss():
    rng = np.random.default_rng(6)
    x = rand(rng, 16, 4, 16, 8)
    y = 100 + 10 * x[:, 2].mean(axis=(1, 2))
    p = init_params(SMALL, 0)
    state = OptimState.for_params(p.tensors, lr=1e-2)
    first = None
    for _ in range(60):
        loss, grads, _ = loss_and_grads(p, x, y)
        first = loss if first is None else first
        p.tensors, state = adam_step(p.tensors, grads, state)
    assert loss < 0.2 * first


# --------------------------------------------------------------------------
# optimizer


def test_adam_first_step_and_purity():
    params = {"w": np.array([1.0, -2.0], np.float32)}
    grads = {"w": np.array([0.5, -3.0], np.float32)}
    state = OptimState.for_params(params, lr=0.1)
    new, st2 = adam_step(params, grads, state)
    # first bias-corrected step moves each weight by lr * sign(g)
    np.testing.assert_allclose(new["w"], [0.9, -1.9], atol=1e-6)
    assert params["w"].tolist() == [1.0, -2.0] and state.step == 0 and st2.step == 1
    assert np.all(state.m["w"] == 0)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(7)
    p = {"a": rng.standard_normal(4).astype(np.float32)}
    st_ = OptimState.for_params(p, lr=0.01)
    ref, m, v = p["a"].astype(np.float64), np.zeros(4), np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4).astype(np.float32)
        p, st_ = adam_step(p, {"a": g}, st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["a"], ref, atol=1e-5)


def test_adam_rejects_mismatched_names():
    with pytest.raises(KeyError):
        adam_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, OptimState.for_params({"a": np.zeros(1)}))


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, 9)
    save_checkpoint(p, tmp_path / "m.rpnn")
    q = load_checkpoint(tmp_path / "m.rpnn")
    assert q.config == p.config and q.init == p.init
    assert all(p.tensors[k].tobytes() == q.tensors[k].tobytes() for k in p.tensors)
    x = np.random.default_rng(0).random((2, 4, 16, 8))
    assert forward(p, x).tobytes() == forward(q, x).tobytes()


def test_checkpoint_rejects_bad_magic_and_shapes():
    blob = params_to_bytes(init_params(SMALL, 0))
    with pytest.raises(CheckpointError):
        params_from_bytes(b"XXXX" + blob[4:])
    other = ModelConfig(input_shape=(4, 16, 8), conv_blocks=(ConvBlock(4), ConvBlock(7)), dense=(5,))
    p = init_params(SMALL, 0)
    p.config = other
    with pytest.raises(CheckpointError):
        params_from_bytes(params_to_bytes(p))
